"""Problem description for the neutral delay equation with memory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fbm import HurstParameter, TimeGrid
from .resolvent import MemoryKernel
from .spectral import M_MAX, CoefficientFunction, SpaceGrid, registry_lookup

__all__ = ["InitialFunction", "ModelSpec", "MAX_DERIVATIVE_DEPTH"]

MAX_DERIVATIVE_DEPTH = 2
PROFILES = {"constant": 0, "linear": 2, "cosine": 1}


@dataclass(frozen=True)
class InitialFunction:
    """Deterministic history ``phi(t) = alpha(t) * field`` on ``[-r, 0]``.

    Profiles: ``constant`` (alpha = 1), ``linear(a0, a1)`` (a0 + a1 t),
    ``cosine(w)`` (cos(w t)).
    """

    coefficients: tuple[float, ...]
    profile: str = "constant"
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown phi profile {self.profile!r}; choose from {sorted(PROFILES)}")
        params = tuple(float(p) for p in self.params)
        if len(params) != PROFILES[self.profile]:
            raise ConfigError(
                f"phi profile {self.profile!r} takes {PROFILES[self.profile]} parameter(s)"
            )
        coeffs = tuple(float(c) for c in self.coefficients)
        if not all(math.isfinite(c) for c in coeffs):
            raise ConfigError("phi coefficients must be finite")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "coefficients", coeffs)

    def alpha(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.profile == "constant":
            return np.ones_like(t)
        if self.profile == "linear":
            return self.params[0] + self.params[1] * t
        return np.cos(self.params[0] * t)

    def field(self, n_modes: int) -> np.ndarray:
        out = np.zeros(n_modes)
        c = np.asarray(self.coefficients[:n_modes])
        out[: c.size] = c
        return out

    def __call__(self, t, n_modes: int) -> np.ndarray:
        """History values at times ``t`` (array), shape ``t.shape + (n_modes,)``."""
        return self.alpha(t)[..., None] * self.field(n_modes)


def _zero_fn() -> CoefficientFunction:
    return registry_lookup("zero")


@dataclass(frozen=True)
class ModelSpec:
    """Full problem description.

    The delay must be a whole number of steps and the horizon must satisfy
    ``T <= blocks * delay``; ``blocks`` defaults to ``ceil(T / delay)``.
    """

    hurst: float
    horizon: float
    delay: float
    dt: float
    phi: InitialFunction
    g: CoefficientFunction = field(default_factory=_zero_fn)
    f: CoefficientFunction = field(default_factory=_zero_fn)
    sigma: CoefficientFunction = field(default_factory=_zero_fn)
    kernel: MemoryKernel = field(default_factory=lambda: MemoryKernel("zero"))
    blocks: int | None = None
    n_modes: int = 32
    n_points: int = 127
    derivative_depth: int = 2
    n_paths: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        errors = self.validation_errors()
        if errors:
            raise ConfigError(errors)
        if self.blocks is None:
            object.__setattr__(self, "blocks", self._default_blocks())

    def _default_blocks(self) -> int:
        return max(1, math.ceil(self.horizon / self.delay - 1e-9))

    def validation_errors(self) -> list[str]:
        errors: list[str] = []
        try:
            HurstParameter(self.hurst)
        except ValueError:
            errors.append(f"hurst out of (1/2,1): {self.hurst}")
        bad = [
            f"{name} must be positive and finite: {getattr(self, name)}"
            for name in ("horizon", "delay", "dt")
            if not _positive(getattr(self, name))
        ]
        if bad:
            return errors + bad
        if not _is_multiple(self.delay, self.dt):
            errors.append(f"delay/dt must be an integer: {self.delay}/{self.dt}")
        if not _is_multiple(self.horizon, self.dt):
            errors.append(f"horizon/dt must be an integer: {self.horizon}/{self.dt}")
        blocks = self.blocks if self.blocks is not None else self._default_blocks()
        if blocks < 1:
            errors.append(f"blocks must be at least 1: {blocks}")
        elif self.horizon > blocks * self.delay * (1 + 1e-12):
            errors.append(f"T exceeds m·r: {self.horizon} > {blocks}*{self.delay}")
        fns = {"g": self.g, "f": self.f, "sigma": self.sigma}
        for name in ("g", "f"):
            if not fns[name].zero_at_zero:
                errors.append(f"{name} must vanish at 0")
        if blocks >= 1:
            for name, fn in fns.items():
                if fn.m_max < min(blocks, M_MAX):
                    errors.append(f"{name} has derivatives only to order {fn.m_max} < m")
            if blocks > M_MAX:
                errors.append(f"blocks={blocks} exceeds the derivative order {M_MAX} of the registry")
        if self.n_modes < 1:
            errors.append(f"n_modes must be positive: {self.n_modes}")
        if self.n_points < self.n_modes:
            errors.append(f"n_points ({self.n_points}) must be >= n_modes ({self.n_modes})")
        if not 1 <= self.derivative_depth <= MAX_DERIVATIVE_DEPTH:
            errors.append(
                f"derivative_depth must be in 1..{MAX_DERIVATIVE_DEPTH}: {self.derivative_depth}"
            )
        if self.n_paths < 1:
            errors.append(f"n_paths must be positive: {self.n_paths}")
        return errors

    @property
    def steps_per_delay(self) -> int:
        return int(round(self.delay / self.dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.n_steps)

    @property
    def space_grid(self) -> SpaceGrid:
        return SpaceGrid(self.n_points)

    def replace(self, **changes) -> "ModelSpec":
        from dataclasses import replace

        if "horizon" in changes or "delay" in changes:
            changes.setdefault("blocks", None)
        return replace(self, **changes)


def _positive(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v) and v > 0


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio)) and round(ratio) >= 1
