"""Reproducible Monte Carlo over independent noise paths.

Paths are processed in fixed-size chunks.  Each chunk accumulates its paths
in index order and chunks are merged in chunk order with Chan's update, so
the statistics do not depend on how many workers ran the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ModelSpec
from .resolvent import ResolventTable
from .solver import PathState, resolvent_for, second_derivative, solve_path

__all__ = [
    "derive_seed",
    "Welford",
    "run_chunked",
    "MomentsReport",
    "monte_carlo_moments",
    "path_moments",
]

_MASK = (1 << 64) - 1
CHUNK = 25


def derive_seed(base_seed: int, path_index: int) -> int:
    """Splitmix64 finalizer applied to ``(base_seed, path_index)``.

    The map ``i -> seed`` is a bijection on 64-bit integers for a fixed base,
    so distinct indices never collide.
    """
    z = (int(base_seed) * 0x9E3779B97F4A7C15 + int(path_index) + 1) & _MASK
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class Welford:
    """Running mean and centred second moment of array-valued samples."""

    def __init__(self) -> None:
        self.count = 0
        self.mean = None
        self.m2 = None

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        if self.mean is None:
            self.mean = x.copy()
            self.m2 = np.zeros_like(x)
            return
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "Welford") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        self.count = n

    @property
    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self.m2 / (self.count - 1)

    @property
    def se(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.mean, np.inf)
        return np.sqrt(self.variance / self.count)

    def copy(self) -> "Welford":
        out = Welford()
        out.merge(self)
        return out


def run_chunked(
    n_paths: int,
    per_path: Callable[[int], dict],
    threads: int = 1,
    chunk: int = CHUNK,
    snapshots: tuple[int, ...] = (),
) -> tuple[dict, dict]:
    """Accumulate ``per_path(i)`` (a dict of arrays) over ``i = 0..n_paths-1``.

    Returns the merged accumulators and copies taken after the first
    ``k`` paths for every ``k`` in ``snapshots`` (rounded up to a chunk).
    """
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]

    def work(bound):
        acc: dict[str, Welford] = {}
        for i in range(*bound):
            for key, value in per_path(i).items():
                acc.setdefault(key, Welford()).add(value)
        return acc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    total: dict[str, Welford] = {}
    taken: dict[int, dict] = {}
    wanted = sorted(set(snapshots))
    for (_, stop), part in zip(bounds, parts):
        for key, acc in part.items():
            total.setdefault(key, Welford()).merge(acc)
        while wanted and stop >= wanted[0]:
            taken[wanted.pop(0)] = {k: v.copy() for k, v in total.items()}
    return total, taken


@dataclass
class MomentsReport:
    """Monte Carlo summary of a model on its time grid."""

    t: np.ndarray
    n_paths: int
    mean_sq_norm: np.ndarray
    se: np.ndarray
    variance: np.ndarray
    mean: np.ndarray = field(repr=False)
    mode_variance: np.ndarray = field(repr=False)
    mode_se: np.ndarray = field(repr=False)
    d1_mean_sq: np.ndarray = field(repr=False)
    d1_se: np.ndarray = field(repr=False)
    d2_mean_sq: np.ndarray = field(repr=False)
    d2_se: np.ndarray = field(repr=False)
    d2_points: list = field(repr=False)
    increment_mean_sq: np.ndarray = field(repr=False)
    skorohod_mean: np.ndarray = field(repr=False)
    skorohod_se: np.ndarray = field(repr=False)
    pathwise_mean: np.ndarray = field(repr=False)
    pathwise_se: np.ndarray = field(repr=False)
    bias_flags: list[str] = field(default_factory=list)
    snapshots: dict = field(default_factory=dict, repr=False)

    @property
    def sup_mean_sq_norm(self) -> float:
        return float(self.mean_sq_norm.max())

    @property
    def sup_d1(self) -> float:
        return float(self.d1_mean_sq.max())

    @property
    def sup_d2(self) -> float:
        return float(self.d2_mean_sq.max()) if self.d2_mean_sq.size else 0.0

    @property
    def continuity(self) -> float:
        return float(self.increment_mean_sq.max())

    def audit(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "sup_mean_sq_norm": self.sup_mean_sq_norm,
            "sup_d1_mean_sq": self.sup_d1,
            "sup_d2_mean_sq": self.sup_d2,
            "continuity": self.continuity,
            "finite": bool(
                all(math.isfinite(v) for v in (self.sup_mean_sq_norm, self.sup_d1, self.sup_d2))
            ),
        }


def _d2_points(model: ModelSpec, count: int) -> list[tuple[int, int]]:
    """Sample ``(tau, cell)`` pairs where second derivatives are exact (blocks 1-2)."""
    if count <= 0:
        return []
    p, n = model.steps_per_delay, model.n_steps
    pts = [(max(1, p // 2), 0)]
    taus = sorted({min(n, p + max(1, (j * p) // count)) for j in range(1, count + 1)})
    for tau in taus:
        if tau <= p or tau > 2 * p:
            continue
        pts.append((tau, 0))
        pts.append((tau, max(0, (tau - p) // 2)))
    return pts


def path_moments(state: PathState, d2_points: list[tuple[int, int]]) -> dict:
    """Per-path quantities whose means make up :class:`MomentsReport`."""
    x = state.solution.trajectory
    d1 = state.malliavin.d1
    out = {
        "x": x,
        "sq_norm": np.einsum("an,an->a", x, x),
        "d1_sq": np.einsum("akn,akn->ak", d1, d1),
        "incr_sq": np.sum(np.diff(x, axis=0) ** 2, axis=1),
        "skorohod": state.skorohod_terms,
        "pathwise": state.skorohod_pathwise,
    }
    # one row per sampled (tau, cell), indexed by the second cell k
    d2_sq = np.zeros((len(d2_points), state.model.n_steps))
    by_tau: dict[int, list[int]] = {}
    for j, (tau, cell) in enumerate(d2_points):
        by_tau.setdefault(tau, []).append(j)
    for tau, rows in by_tau.items():
        d2, _ = second_derivative(state, tau, [d2_points[j][1] for j in rows])
        d2_sq[rows, :tau] = np.sum(d2**2, axis=-1)
    out["d2_sq"] = d2_sq
    return out


def monte_carlo_moments(
    model: ModelSpec,
    n_paths: int | None = None,
    seed: int | None = None,
    threads: int = 1,
    d2_samples: int = 2,
    snapshots: tuple[int, ...] = (),
    table: ResolventTable | None = None,
    path_hook: Callable[[int, PathState], None] | None = None,
) -> MomentsReport:
    """Moments of the solution and its derivatives over ``n_paths`` seeded paths."""
    n_paths = model.n_paths if n_paths is None else n_paths
    if n_paths < 2:
        raise ValueError("monte_carlo_moments needs at least two paths")
    seed = model.seed if seed is None else seed
    table = resolvent_for(model) if table is None else table
    pts = _d2_points(model, d2_samples)
    flags: dict[int, list[str]] = {}

    def per_path(i: int) -> dict:
        state = solve_path(model, seed=derive_seed(seed, i), table=table)
        if i == 0:
            flags[0] = list(state.malliavin.bias_flags)
        if path_hook is not None:
            path_hook(i, state)
        return path_moments(state, pts)

    total, taken = run_chunked(n_paths, per_path, threads=threads, snapshots=snapshots)
    report = _report(model, total, pts, flags.get(0, []))
    report.snapshots = {k: _report(model, v, pts, report.bias_flags) for k, v in taken.items()}
    return report


def _report(model: ModelSpec, acc: dict, pts, flags) -> MomentsReport:
    x = acc["x"]
    sq = acc["sq_norm"]
    return MomentsReport(
        t=model.time_grid.points,
        n_paths=sq.count,
        mean_sq_norm=sq.mean,
        se=sq.se,
        variance=x.variance.sum(axis=1),
        mean=x.mean,
        mode_variance=x.variance,
        mode_se=x.se,
        d1_mean_sq=acc["d1_sq"].mean,
        d1_se=acc["d1_sq"].se,
        d2_mean_sq=acc["d2_sq"].mean,
        d2_se=acc["d2_sq"].se,
        d2_points=list(pts),
        increment_mean_sq=acc["incr_sq"].mean,
        skorohod_mean=acc["skorohod"].mean,
        skorohod_se=acc["skorohod"].se,
        pathwise_mean=acc["pathwise"].mean,
        pathwise_se=acc["pathwise"].se,
        bias_flags=list(flags),
    )
