"""YAML run configuration with itemized validation.

A config has a required ``model`` section and optional ``run``, ``density``
and ``fbm_test`` sections.  Environment variables ``NFBM_<SECTION>__<KEY>``
override file values (the value is parsed as YAML), e.g.
``NFBM_RUN__N_PATHS=50``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError
from .model import InitialFunction, ModelSpec
from .resolvent import MemoryKernel
from .spectral import registry_lookup

__all__ = ["RunConfig", "parse_config", "load_config", "DEFAULTS", "ENV_PREFIX", "default_config_text"]

ENV_PREFIX = "NFBM_"

REQUIRED_MODEL = ("hurst", "horizon", "delay", "dt", "phi")

DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "blocks": None,
        "n_modes": 32,
        "n_points": 127,
        "derivative_depth": 2,
        "g": {"name": "zero", "params": []},
        "f": {"name": "zero", "params": []},
        "sigma": {"name": "zero", "params": []},
        "kernel": {"name": "zero", "params": []},
    },
    "run": {"n_paths": 100, "seed": 0, "threads": 1, "d2_samples": 2, "dump_paths": 0},
    "density": {"t": None, "epsilon": 1e-10, "functional": "norm", "vector": None},
    "fbm_test": {"hurst": None, "n_points": 8, "n_paths": 20000},
}

_ALLOWED = {
    "model": set(REQUIRED_MODEL) | set(DEFAULTS["model"]),
    "run": set(DEFAULTS["run"]),
    "density": set(DEFAULTS["density"]),
    "fbm_test": set(DEFAULTS["fbm_test"]),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration and its normalized echo (defaults filled)."""

    model: ModelSpec
    run: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)
    fbm_test: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict, repr=False)

    @property
    def n_paths(self) -> int:
        return int(self.run["n_paths"])

    @property
    def seed(self) -> int:
        return int(self.run["seed"])

    @property
    def threads(self) -> int:
        return int(self.run["threads"])


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = copy.deepcopy(v)
    return out


def _env_overrides(raw: dict, environ) -> list[str]:
    errors = []
    for key, value in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) != 2 or parts[0] not in _ALLOWED:
            errors.append(f"unrecognized environment override {key}")
            continue
        section, name = parts
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            errors.append(f"section {section} must be a mapping")
            continue
        raw[section][name] = yaml.safe_load(value)
    return errors


def _coefficient(spec, where: str, errors: list[str]):
    if not isinstance(spec, dict) or "name" not in spec:
        errors.append(f"{where} must be a mapping with 'name' and 'params'")
        return None
    extra = set(spec) - {"name", "params"}
    if extra:
        errors.append(f"unknown key(s) {sorted(extra)} in {where}")
    try:
        return registry_lookup(str(spec["name"]), tuple(spec.get("params") or ()))
    except (ConfigError, TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _number(section: dict, key: str, where: str, errors: list[str], kind=float):
    v = section.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(f"{where}.{key} must be a number, got {v!r}")
        return None
    if kind is int and not float(v).is_integer():
        errors.append(f"{where}.{key} must be an integer, got {v!r}")
        return None
    return kind(v)


def parse_config(text: str, environ=None) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    errors = _env_overrides(raw, os.environ if environ is None else environ)
    for section in raw:
        if section not in _ALLOWED:
            errors.append(f"unknown section {section!r}")
    for section, allowed in _ALLOWED.items():
        given = raw.get(section) or {}
        if not isinstance(given, dict):
            errors.append(f"section {section} must be a mapping")
            raw[section] = {}
            continue
        for key in sorted(set(given) - allowed):
            errors.append(f"unknown key {section}.{key}")
    model_raw = raw.get("model")
    if not isinstance(model_raw, dict):
        errors.append("missing section model")
        raise ConfigError(errors)
    missing = [f"missing key model.{key}" for key in REQUIRED_MODEL if key not in model_raw]
    if missing:
        raise ConfigError(errors + missing)

    norm = {s: _merge(DEFAULTS[s], raw.get(s) or {}) for s in DEFAULTS}
    m = norm["model"]
    fields = {}
    for key in ("hurst", "horizon", "delay", "dt"):
        fields[key] = _number(m, key, "model", errors)
    for key in ("blocks", "n_modes", "n_points", "derivative_depth"):
        fields[key] = _number(m, key, "model", errors, int)
    phi = m["phi"]
    if not isinstance(phi, dict) or "coefficients" not in phi:
        errors.append("model.phi must be a mapping with 'coefficients'")
        phi_obj = None
    else:
        extra = set(phi) - {"coefficients", "profile", "params"}
        if extra:
            errors.append(f"unknown key(s) {sorted(extra)} in model.phi")
        phi.setdefault("profile", "constant")
        phi.setdefault("params", [])
        try:
            phi_obj = InitialFunction(tuple(phi["coefficients"]), phi["profile"], tuple(phi["params"]))
        except (ConfigError, TypeError, ValueError) as exc:
            errors.append(f"model.phi: {exc}")
            phi_obj = None
    coeffs = {name: _coefficient(m[name], f"model.{name}", errors) for name in ("g", "f", "sigma")}
    kern = m["kernel"]
    try:
        kernel = MemoryKernel(str(kern["name"]), tuple(kern.get("params") or ()))
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"model.kernel: {exc}")
        kernel = None
    run = norm["run"]
    for key in ("n_paths", "seed", "threads", "d2_samples", "dump_paths"):
        if _number(run, key, "run", errors, int) is None:
            errors.append(f"run.{key} must be set")
    if isinstance(run.get("threads"), int) and run["threads"] < 1:
        errors.append(f"run.threads must be at least 1: {run['threads']}")
    if isinstance(run.get("seed"), int) and run["seed"] < 0:
        errors.append(f"run.seed must be nonnegative: {run['seed']}")
    dens = norm["density"]
    _number(dens, "t", "density", errors)
    _number(dens, "epsilon", "density", errors)
    if dens["functional"] not in ("norm", "linear"):
        errors.append(f"density.functional must be 'norm' or 'linear', got {dens['functional']!r}")
    elif dens["functional"] == "linear" and not dens.get("vector"):
        errors.append("density.vector is required for a linear functional")
    ft = norm["fbm_test"]
    _number(ft, "hurst", "fbm_test", errors)
    _number(ft, "n_points", "fbm_test", errors, int)
    _number(ft, "n_paths", "fbm_test", errors, int)
    parts_ok = phi_obj is not None and kernel is not None and None not in coeffs.values()
    parts_ok = parts_ok and all(fields[k] is not None for k in ("hurst", "horizon", "delay", "dt"))
    model = None
    if parts_ok:
        kwargs = dict(fields, phi=phi_obj, kernel=kernel, **coeffs)
        kwargs = {k: v for k, v in kwargs.items() if v is not None or k == "blocks"}
        for key in ("n_paths", "seed"):
            if isinstance(run[key], int) and not isinstance(run[key], bool):
                kwargs[key] = run[key]
        try:
            model = ModelSpec(**kwargs)
        except ConfigError as exc:
            errors.extend(exc.errors)
    if errors or model is None:
        raise ConfigError(errors or ["invalid model section"])
    m["blocks"] = model.blocks
    m["phi"] = {"coefficients": list(phi_obj.coefficients), "profile": phi_obj.profile, "params": list(phi_obj.params)}
    if dens["t"] is None:
        dens["t"] = model.horizon
    if ft["hurst"] is None:
        ft["hurst"] = model.hurst
    return RunConfig(model, run, dens, ft, norm)


def load_config(path: str, environ=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, environ)


def default_config_text() -> str:
    """The built-in nonlinear heat model with memory at desk scale."""
    return """\
model:
  hurst: 0.7
  horizon: 0.75
  delay: 0.25
  dt: 0.001953125
  n_modes: 32
  n_points: 127
  derivative_depth: 1
  phi: {coefficients: [1.0, 0.5, -0.3], profile: cosine, params: [2.0]}
  g: {name: scaled_tanh, params: [0.3, 1.0]}
  f: {name: scaled_tanh, params: [-0.5, 1.0]}
  sigma: {name: scaled_tanh, params: [0.6, 0.7, 0.4]}
  kernel: {name: exp_decay, params: [0.5, 1.0]}
run:
  n_paths: 100
  seed: 0
"""
