"""Absolute-continuity criterion for scalar functionals of the solution.

On the last delay interval the Malliavin derivative has the closed form

    D_u x(t) = R(t - u) sigma(x(u - r)),   t - r < u < t,

because no delayed argument on that interval depends on the noise after
``u``.  The criterion for ``F(x(t))`` is the integral over that interval of
``(F'(x(t)) D_u x(t))^2``.  A strictly positive value on almost every path
gives a density for the law of ``F(x(t))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mc import derive_seed
from .model import ModelSpec
from .resolvent import ResolventTable
from .solver import PathSolution, PathState, resolvent_for, solve_path
from .spectral import nemytskii_apply

__all__ = [
    "Functional",
    "CriterionReport",
    "last_interval_derivative",
    "last_interval_cell_derivative",
    "density_criterion",
    "criterion_integrand",
    "criterion_statistics",
    "DEFAULT_EPSILON",
    "DEGENERATE_NORM",
]

DEFAULT_EPSILON = 1e-10
DEGENERATE_NORM = 1e-12
KINDS = ("linear", "norm", "norm_unnormalized")


@dataclass(frozen=True)
class Functional:
    """Gradient rule for ``F``.

    ``linear``: ``F(x) = <v, x>``.  ``norm``: ``F(x) = ||x||`` with gradient
    ``x / ||x||``.  ``norm_unnormalized``: gradient ``x``, i.e. the norm
    criterion scaled by ``||x||^2``.
    """

    kind: str
    vector: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional {self.kind!r}; choose from {KINDS}")
        if self.kind == "linear" and not self.vector:
            raise ValueError("a linear functional needs its vector")
        object.__setattr__(self, "vector", tuple(float(v) for v in self.vector))

    @classmethod
    def linear(cls, v) -> "Functional":
        return cls("linear", tuple(np.asarray(v, dtype=float).ravel()))

    @classmethod
    def mode(cls, k: int, n_modes: int) -> "Functional":
        """``<e_k, .>`` with 1-based mode index."""
        v = np.zeros(n_modes)
        v[k - 1] = 1.0
        return cls.linear(v)

    @classmethod
    def norm(cls) -> "Functional":
        return cls("norm")

    @classmethod
    def norm_unnormalized(cls) -> "Functional":
        return cls("norm_unnormalized")

    def gradient(self, x: np.ndarray) -> np.ndarray | None:
        """Gradient at ``x``; ``None`` where it is undefined (``||x||`` below 1e-12)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            v = np.zeros(x.shape[-1])
            w = np.asarray(self.vector[: x.shape[-1]])
            v[: w.size] = w
            return v
        if self.kind == "norm_unnormalized":
            return x.copy()
        nx = float(np.linalg.norm(x))
        if nx < DEGENERATE_NORM:
            return None
        return x / nx


def _time_index(model: ModelSpec, t: float, what: str) -> int:
    a = t / model.dt
    k = int(round(a))
    if abs(a - k) > 1e-9 * max(1.0, abs(a)):
        raise ValueError(f"{what}={t} is not a grid time of step {model.dt}")
    return k


def _unpack(path: PathState | PathSolution, table: ResolventTable | None):
    if isinstance(path, PathState):
        return path.solution, path.table if table is None else table, path
    if table is None:
        table = resolvent_for(path.model)
    return path, table, None


def _sigma_coeffs(solution: PathSolution, nodes: np.ndarray) -> np.ndarray:
    """Coefficients of ``sigma(x(t_j - r))`` for node indices ``j``."""
    model = solution.model
    delayed = solution.values[np.asarray(nodes)]  # x_{j-p} sits at row j
    return nemytskii_apply(model.sigma, 0, delayed, model.space_grid)


def _check_t(model: ModelSpec, t: float) -> int:
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    a = _time_index(model, t, "t")
    if a > model.n_steps:
        raise ValueError(f"t={t} beyond the horizon {model.horizon}")
    return a


def last_interval_derivative(
    path: PathState | PathSolution,
    u: float,
    t: float,
    table: ResolventTable | None = None,
) -> np.ndarray:
    """``R(t - u) sigma(x(u - r))`` for grid times ``t - r < u < t``."""
    solution, table, _ = _unpack(path, table)
    model = solution.model
    a = _check_t(model, t)
    j = _time_index(model, u, "u")
    p = model.steps_per_delay
    if not (a - p < j < a and j >= 0):
        raise ValueError(f"u={u} outside ({t} - r, {t}); the formula only holds there")
    return table.entries[a - j] * _sigma_coeffs(solution, np.array([j]))[0]


def last_interval_cell_derivative(
    path: PathState | PathSolution,
    cell: int,
    t_index: int,
    table: ResolventTable | None = None,
) -> np.ndarray:
    """Cell form of the last-interval formula: the mean of its two node values.

    This is the derivative with respect to the increment over ``cell`` in the
    discrete scheme; valid for ``t_index - p <= cell < t_index``.
    """
    solution, table, _ = _unpack(path, table)
    p = solution.model.steps_per_delay
    if not (max(t_index - p, 0) <= cell < t_index):
        raise ValueError(f"cell {cell} is not in the last delay interval before index {t_index}")
    sig = _sigma_coeffs(solution, np.array([cell, cell + 1]))
    r = table.entries
    return 0.5 * (r[t_index - cell] * sig[0] + r[t_index - cell - 1] * sig[1])


def criterion_integrand(
    path: PathState | PathSolution,
    t: float,
    table: ResolventTable | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Node times ``u_j`` of the last interval and the fields ``R(t-u_j) sigma(x(u_j-r))``.

    The end nodes are the one-sided limits of the formula.
    """
    solution, table, _ = _unpack(path, table)
    model = solution.model
    a = _check_t(model, t)
    j0 = max(a - model.steps_per_delay, 0)
    nodes = np.arange(j0, a + 1)
    fields = table.entries[a - nodes] * _sigma_coeffs(solution, nodes)
    return nodes * model.dt, fields


def _trapezoid_weights(count: int, dt: float) -> np.ndarray:
    w = np.full(count, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def density_criterion(
    path: PathState | PathSolution,
    t: float,
    functional: Functional,
    table: ResolventTable | None = None,
    window: str = "last",
) -> float:
    """Trapezoid value of ``int (F'(x(t)) R(t-u) sigma(x(u-r)))^2 du`` over ``(t-r, t)``.

    ``window='full'`` adds the cells of ``(0, t - r)`` with the stored first
    derivatives ``D_l x(t)`` (needs a :class:`PathState`).  Returns ``nan``
    when the gradient is undefined at ``x(t)``.
    """
    solution, table, state = _unpack(path, table)
    model = solution.model
    a = _check_t(model, t)
    grad = functional.gradient(solution.at(a))
    if grad is None:
        return math.nan
    _, fields = criterion_integrand(solution, t, table)
    vals = (fields @ grad) ** 2
    total = float(_trapezoid_weights(vals.size, model.dt) @ vals)
    if window == "last":
        return total
    if window != "full":
        raise ValueError(f"unknown window {window!r}; use 'last' or 'full'")
    if state is None:
        raise ValueError("window='full' needs the stored derivatives of a PathState")
    j0 = max(a - model.steps_per_delay, 0)
    if j0 > 0:
        if state.d1_blocks_done < state.solution.block_of[a + model.steps_per_delay]:
            raise ValueError(f"first derivatives at t={t} were not computed")
        early = state.malliavin.d1[a, :j0] @ grad
        total += float(model.dt * np.sum(early**2))
    return total


@dataclass(frozen=True)
class CriterionReport:
    """Per-path criterion values at one time.

    Paths where the gradient is undefined are listed in ``degenerate_seeds``
    and excluded from ``values``.
    """

    t: float
    functional: str
    seeds: tuple[int, ...]
    values: tuple[float, ...]
    epsilon: float = DEFAULT_EPSILON
    degenerate_seeds: tuple[int, ...] = ()
    unnormalized_values: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.values):
            raise ValueError("criterion values must be nonnegative")

    @property
    def n_paths(self) -> int:
        return len(self.values) + len(self.degenerate_seeds)

    def fraction_positive(self, epsilon: float | None = None) -> float:
        eps = self.epsilon if epsilon is None else epsilon
        if not self.values:
            return 0.0
        return sum(v > eps for v in self.values) / len(self.values)

    @property
    def minimum(self) -> float:
        return min(self.values) if self.values else math.nan

    @property
    def quartiles(self) -> tuple[float, float, float]:
        if not self.values:
            return (math.nan,) * 3
        q = np.quantile(np.asarray(self.values), [0.25, 0.5, 0.75])
        return tuple(float(v) for v in q)

    def summary(self) -> dict:
        out = {
            "t": self.t,
            "functional": self.functional,
            "n_paths": self.n_paths,
            "epsilon": self.epsilon,
            "fraction_positive": self.fraction_positive(),
            "min": self.minimum,
            "quartiles": list(self.quartiles),
            "degenerate_paths": len(self.degenerate_seeds),
        }
        if self.unnormalized_values is not None:
            vals = np.asarray(self.unnormalized_values)
            out["unnormalized"] = {
                "fraction_positive": float(np.mean(vals > self.epsilon)) if vals.size else 0.0,
                "min": float(vals.min()) if vals.size else math.nan,
            }
        return out


def criterion_statistics(
    model: ModelSpec,
    t: float,
    n_paths: int | None = None,
    epsilon: float = DEFAULT_EPSILON,
    functional: Functional | None = None,
    seed: int | None = None,
    threads: int = 1,
    table: ResolventTable | None = None,
) -> CriterionReport:
    """Criterion values at ``t`` over seeded paths.

    The default functional is the norm; for it the unnormalized form is
    reported alongside.
    """
    n_paths = model.n_paths if n_paths is None else n_paths
    if n_paths < 1:
        raise ValueError("criterion_statistics needs at least one path")
    functional = Functional.norm() if functional is None else functional
    seed = model.seed if seed is None else seed
    table = resolvent_for(model) if table is None else table
    a = _check_t(model, t)
    block = max(1, math.ceil(a / model.steps_per_delay))
    seeds = [derive_seed(seed, i) for i in range(n_paths)]
    twin = Functional.norm_unnormalized() if functional.kind == "norm" else None

    def one(s: int) -> tuple[float, float | None]:
        state = solve_path(model, seed=s, table=table, through_block=block, final_derivatives=False)
        v = density_criterion(state.solution, t, functional, table)
        w = density_criterion(state.solution, t, twin, table) if twin is not None else None
        return v, w

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    good = [(s, v, w) for s, (v, w) in zip(seeds, results) if not math.isnan(v)]
    return CriterionReport(
        t=float(t),
        functional=functional.kind,
        seeds=tuple(s for s, _, _ in good),
        values=tuple(v for _, v, _ in good),
        epsilon=epsilon,
        degenerate_seeds=tuple(s for s, (v, _) in zip(seeds, results) if math.isnan(v)),
        unnormalized_values=tuple(w for _, _, w in good) if twin is not None else None,
    )
