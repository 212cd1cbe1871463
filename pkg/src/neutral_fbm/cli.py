"""Command line entry point: ``nfbm <subcommand> [--config PATH] ...``.

Subcommands write CSV tables and a ``summary.json`` into ``--out``.  Every
number in a table is formatted with 17 significant digits so that two runs
with the same config and seed produce identical bytes; ``--threads`` only
changes speed.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .audits import (
    block_consistency,
    boundedness_audit,
    last_interval_identity,
    skorohod_zero_mean,
)
from .config import RunConfig, default_config_text, load_config, parse_config
from .density import Functional, criterion_statistics
from .errors import ConfigError
from .fbm import TimeGrid, covariance_matrix, sample_fbm_paths
from .mc import derive_seed, monte_carlo_moments
from .resolvent import growth_audit, resolvent_identity_residual
from .solver import resolvent_for, solve_path

__all__ = ["main", "ResultBundle", "run_simulate", "run_density", "run_resolvent", "run_fbm_test", "run_validate", "format_number"]

COMMANDS = ("simulate", "density", "resolvent", "fbm-test", "validate")


def format_number(v) -> str:
    return format(float(v), ".17g")


def _csv(header: list[str], rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else format_number(v) for v in row))
    return "\n".join(lines) + "\n"


def version_stamp() -> str:
    """Package version plus the short commit hash when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class ResultBundle:
    """Tables (file name to CSV text) and the JSON summary of one command."""

    command: str
    config: RunConfig
    tables: dict[str, str] = field(default_factory=dict)
    audits: dict[str, dict] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.get("passed", True) for a in self.audits.values())

    @property
    def failing(self) -> list[str]:
        return [name for name, a in self.audits.items() if not a.get("passed", True)]

    def summary(self) -> dict:
        # thread count changes speed only; leaving it out keeps outputs byte-identical
        config = copy.deepcopy(self.config.normalized)
        config.get("run", {}).pop("threads", None)
        return {
            "command": self.command,
            "version": version_stamp(),
            "config": config,
            "audits": self.audits,
            "passed": self.passed,
            **self.extra,
        }

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        """Write every file atomically; the only place that touches the disk."""
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
        files = dict(self.tables)
        files["summary.json"] = json.dumps(_jsonable(self.summary()), indent=2, sort_keys=True) + "\n"
        written = []
        for name, text in files.items():
            target = out / name
            target.parent.mkdir(parents=True, exist_ok=True)
            _atomic_write(target, text)
            written.append(target)
        return written


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_simulate(config: RunConfig) -> ResultBundle:
    model = config.model
    table = resolvent_for(model)
    dumps: dict[str, str] = {}
    n_dump = int(config.run.get("dump_paths", 0))

    def hook(i, state):
        if i < n_dump:
            x = state.solution.trajectory
            header = ["t"] + [f"x_{k}" for k in range(1, model.n_modes + 1)]
            rows = ([t, *row] for t, row in zip(model.time_grid.points, x))
            dumps[f"paths/path_{i:05d}.csv"] = _csv(header, rows)

    report = monte_carlo_moments(
        model,
        n_paths=config.n_paths,
        seed=config.seed,
        threads=config.threads,
        d2_samples=int(config.run["d2_samples"]),
        table=table,
        path_hook=hook,
    )
    rows = zip(report.t, report.mean_sq_norm, report.se, report.variance)
    bundle = ResultBundle("simulate", config)
    bundle.tables["moments.csv"] = _csv(["t", "mean_sq_norm", "se", "variance"], rows)
    bundle.tables.update(sorted(dumps.items()))
    audit = report.audit()
    bundle.audits["finite_moments"] = {"passed": audit["finite"], **audit}
    bundle.audits["skorohod_zero_mean"] = skorohod_zero_mean(report)
    bundle.audits["boundedness"] = boundedness_audit(report, model, table)
    bundle.extra["bias_flags"] = report.bias_flags
    return bundle


def _functional(config: RunConfig) -> Functional:
    dens = config.density
    if dens["functional"] == "linear":
        return Functional.linear(dens["vector"])
    return Functional.norm()


def run_density(config: RunConfig) -> ResultBundle:
    model = config.model
    dens = config.density
    report = criterion_statistics(
        model,
        float(dens["t"]),
        n_paths=config.n_paths,
        epsilon=float(dens["epsilon"]),
        functional=_functional(config),
        seed=config.seed,
        threads=config.threads,
    )
    bundle = ResultBundle("density", config)
    header = ["seed", "criterion"]
    if report.unnormalized_values is not None:
        header.append("criterion_unnormalized")
        rows = [[str(s), v, w] for s, v, w in zip(report.seeds, report.values, report.unnormalized_values)]
    else:
        rows = [[str(s), v] for s, v in zip(report.seeds, report.values)]
    rows += [[str(s), "nan"] + (["nan"] if len(header) == 3 else []) for s in report.degenerate_seeds]
    bundle.tables["density.csv"] = _csv(header, rows)
    bundle.extra["density"] = report.summary()
    bundle.audits["nonnegative"] = {"passed": all(v >= 0 for v in report.values)}
    return bundle


def run_resolvent(config: RunConfig) -> ResultBundle:
    table = resolvent_for(config.model)
    bundle = ResultBundle("resolvent", config)
    bundle.tables["resolvent.csv"] = table.to_csv()
    bundle.audits["growth"] = growth_audit(table)
    bundle.extra["identity_residual"] = resolvent_identity_residual(table)
    return bundle


def fbm_covariance_audit(hurst: float, n_points: int, n_paths: int, seed: int, n_se: float = 3.0):
    """Empirical covariance of Cholesky paths on ``n_points`` grid times of ``[0, 1]``."""
    grid = TimeGrid(1.0, n_points)
    paths = sample_fbm_paths(grid, hurst, [derive_seed(seed, i) for i in range(n_paths)])[:, 1:]
    exact = covariance_matrix(grid.points[1:], hurst)
    prod = paths[:, :, None] * paths[:, None, :]
    emp = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_paths)
    z = np.abs(emp - exact) / se
    rows = []
    for i in range(n_points):
        for j in range(n_points):
            rows.append([grid.points[i + 1], grid.points[j + 1], emp[i, j], exact[i, j], se[i, j]])
    audit = {"passed": bool(np.all(z <= n_se)), "max_z": float(z.max()), "n_se": n_se}
    return rows, audit


def run_fbm_test(config: RunConfig) -> ResultBundle:
    ft = config.fbm_test
    rows, audit = fbm_covariance_audit(float(ft["hurst"]), int(ft["n_points"]), int(ft["n_paths"]), config.seed)
    bundle = ResultBundle("fbm-test", config)
    bundle.tables["fbm_covariance.csv"] = _csv(["s", "t", "empirical", "exact", "se"], rows)
    bundle.audits["fbm_covariance"] = audit
    return bundle


def run_validate(config: RunConfig) -> ResultBundle:
    """Module oracles and solution audits on the configured model."""
    from .fbm import sample_fbm_cholesky
    from .integrals import DerivativeSurface, IntegrandTrajectory, skorohod_integral

    model = config.model
    table = resolvent_for(model)
    bundle = ResultBundle("validate", config)
    bundle.audits["resolvent_growth"] = growth_audit(table)
    res = resolvent_identity_residual(table, n_check=1)
    bundle.audits["resolvent_identity"] = {"passed": res <= 1e-3, "residual": res}
    # delta(B) = B(T)^2 / 2 - T^{2H} / 2 on one path
    grid = model.time_grid
    path = sample_fbm_cholesky(grid, model.hurst, config.seed)
    surf = np.tril(np.ones((grid.n_steps + 1, grid.n_steps)), -1)
    delta = float(skorohod_integral(
        IntegrandTrajectory(grid, path.values), DerivativeSurface(grid, surf), path, model.hurst
    ))
    closed = 0.5 * path.values[-1] ** 2 - 0.5 * model.horizon ** (2 * model.hurst)
    err = abs(delta - closed)
    bundle.audits["skorohod_identity"] = {"passed": err <= 1e-10 * max(1.0, abs(closed)), "abs_error": err}
    bundle.audits["block_consistency"] = block_consistency(model, config.seed, table)
    state = solve_path(model, seed=config.seed, table=table)
    bundle.audits["last_interval_identity"] = last_interval_identity(state)
    report = monte_carlo_moments(model, n_paths=max(2, config.n_paths), seed=config.seed,
                                 threads=config.threads, table=table)
    audit = report.audit()
    bundle.audits["finite_moments"] = {"passed": audit["finite"], **audit}
    bundle.audits["skorohod_zero_mean"] = skorohod_zero_mean(report)
    bundle.audits["boundedness"] = boundedness_audit(report, model, table)
    bundle.extra["bias_flags"] = report.bias_flags
    return bundle


RUNNERS = {
    "simulate": run_simulate,
    "density": run_density,
    "resolvent": run_resolvent,
    "fbm-test": run_fbm_test,
    "validate": run_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config (default: built-in model)")
    common.add_argument("--paths", type=int, metavar="N", help="override run.n_paths")
    common.add_argument("--seed", type=int, metavar="S", help="override run.seed")
    common.add_argument("--out", default="out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, metavar="K", help="worker threads (speed only)")
    parser = argparse.ArgumentParser(prog="nfbm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "Monte Carlo moments of the solution",
        "density": "density criterion statistics at one time",
        "resolvent": "resolvent table of the memory equation",
        "fbm-test": "empirical covariance check of the fBm sampler",
        "validate": "run module oracles and solution audits",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config(default_config_text())
    overrides = {}
    if args.paths is not None:
        overrides["n_paths"] = args.paths
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if not overrides:
        return cfg
    import yaml

    norm = cfg.normalized
    norm["run"].update(overrides)
    return parse_config(yaml.safe_dump(norm), environ={})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load(args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    bundle = RUNNERS[args.command](config)
    try:
        written = bundle.write(args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for path in written:
        print(path)
    if not bundle.passed:
        for name in bundle.failing:
            print(f"audit failed: {name}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
