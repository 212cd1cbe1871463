"""Resolvent family of ``v' = A v + int_0^t b(t - s) A v(s) ds`` on the sine basis.

With ``A e_n = -n^2 e_n`` the resolvent is diagonal: ``R(t) e_n = r_n(t) e_n``
where each ``r_n`` solves the scalar Volterra equation

    r' = -lam r - lam int_0^t b(t - s) r(s) ds,   r(0) = 1.

Each mode is integrated with the implicit trapezoidal rule and a trapezoidal
convolution sum (second order, A-stable for the stiff ``-lam`` term).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .fbm import TimeGrid

__all__ = [
    "MemoryKernel",
    "memory_kernel",
    "ResolventTable",
    "solve_mode_resolvent",
    "solve_resolvents",
    "build_resolvent_table",
    "apply_resolvent",
    "resolvent_identity_residual",
    "mild_solution_deterministic",
    "growth_constants",
]

KERNEL_NAMES = ("zero", "constant", "exp_decay")


@dataclass(frozen=True)
class MemoryKernel:
    """Scalar memory kernel ``b`` with ``B(t) = b(t) A``.

    Registry members are bounded with bounded, uniformly continuous
    derivative on ``[0, inf)``.
    """

    name: str
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        expected = {"zero": 0, "constant": 1, "exp_decay": 2}
        if self.name not in expected:
            raise ValueError(f"unknown memory kernel {self.name!r}; choose from {KERNEL_NAMES}")
        params = tuple(float(p) for p in self.params)
        if len(params) != expected[self.name]:
            raise ValueError(
                f"memory kernel {self.name!r} takes {expected[self.name]} parameter(s), "
                f"got {len(params)}"
            )
        if self.name == "exp_decay" and params[1] < 0:
            raise ValueError("exp_decay rate must be non-negative (b must stay bounded)")
        object.__setattr__(self, "params", params)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero" or (self.name != "zero" and self.params[0] == 0.0)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        if self.name == "zero":
            return np.zeros_like(t)
        if self.name == "constant":
            return np.full_like(t, self.params[0])
        beta, rate = self.params
        return beta * np.exp(-rate * t)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.name in ("zero", "constant"):
            return np.zeros_like(t)
        beta, rate = self.params
        return -rate * beta * np.exp(-rate * t)


def memory_kernel(name: str, *params: float) -> MemoryKernel:
    return MemoryKernel(name, tuple(params))


def solve_resolvents(
    lams: np.ndarray, kernel: MemoryKernel, grid: TimeGrid, growth_limit: float = 1e6
) -> np.ndarray:
    """Values ``r_n(t_i)`` for every eigenvalue in ``lams``; shape (n_steps+1, len(lams))."""
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    if np.any(lams <= 0):
        raise ValueError("resolvent eigenvalues must be positive")
    n, dt = grid.n_steps, grid.dt
    bv = kernel.value(grid.points)
    r = np.empty((n + 1, lams.size))
    r[0] = 1.0
    half = 0.5 * dt
    memory = not kernel.is_zero
    denom = 1.0 + half * lams * (1.0 + half * bv[0])
    # force F_i = -lam (r_i + Q_i); Q_0 = 0
    force = -lams * r[0]
    for i in range(n):
        if memory:
            # known part of Q_{i+1}: dt [b_{i+1} r_0 / 2 + sum_{j=1}^{i} b_{i+1-j} r_j]
            known = half * bv[i + 1] * r[0]
            if i > 0:
                known = known + dt * (bv[i:0:-1] @ r[1 : i + 1])
        else:
            known = 0.0
        r[i + 1] = (r[i] + half * force - half * lams * known) / denom
        force = -lams * (r[i + 1] + known + half * bv[0] * r[i + 1]) if memory else -lams * r[i + 1]
        if not np.all(np.isfinite(r[i + 1])) or np.max(np.abs(r[i + 1])) > growth_limit:
            raise NumericalError(
                f"resolvent step {i + 1} exceeded growth limit {growth_limit:g} "
                f"(dt={dt:g}, max lambda={lams.max():g}); refine the time step"
            )
    return r


def solve_mode_resolvent(lam: float, kernel: MemoryKernel, grid: TimeGrid) -> np.ndarray:
    return solve_resolvents(np.array([lam]), kernel, grid)[:, 0]


@dataclass(frozen=True)
class ResolventTable:
    grid: TimeGrid
    eigenvalues: np.ndarray
    entries: np.ndarray = field(repr=False)
    kernel: MemoryKernel | None = None

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    def apply(self, t_index: int, x: np.ndarray) -> np.ndarray:
        return apply_resolvent(self, t_index, x)

    def to_csv(self) -> str:
        """CSV text: header ``t,r_1..r_N``, one row per grid time, 17 significant digits."""
        buf = io.StringIO()
        cols = ",".join(f"r_{k}" for k in range(1, self.n_modes + 1))
        buf.write(f"t,{cols}\n")
        for t, row in zip(self.grid.points, self.entries):
            buf.write(",".join(format(v, ".17g") for v in (t, *row)))
            buf.write("\n")
        return buf.getvalue()


def build_resolvent_table(kernel: MemoryKernel, grid: TimeGrid, n_modes: int) -> ResolventTable:
    lams = np.arange(1, n_modes + 1, dtype=float) ** 2
    entries = solve_resolvents(lams, kernel, grid)
    entries.setflags(write=False)
    lams.setflags(write=False)
    return ResolventTable(grid, lams, entries, kernel)


def apply_resolvent(table: ResolventTable, t_index: int, x: np.ndarray) -> np.ndarray:
    """Coefficient-wise ``r_n(t_i) x_n``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != table.n_modes:
        raise ValueError(f"field has {x.shape[-1]} modes, table has {table.n_modes}")
    if not 0 <= t_index <= table.grid.n_steps:
        raise IndexError(f"t_index {t_index} outside grid 0..{table.grid.n_steps}")
    return table.entries[t_index] * x


def growth_constants(table: ResolventTable, floor: float = 1e-300) -> tuple[float, float]:
    """Fitted ``(N, beta)`` with ``||R(t_i)|| <= N exp(beta t_i)`` on the table.

    ``||R(t)||`` is the largest ``|r_n(t)|``.  ``beta`` comes from a least
    squares fit of ``log ||R||``; ``N`` is then the smallest constant making
    the bound hold at every grid time.
    """
    t = table.grid.points
    norm = np.max(np.abs(table.entries), axis=1)
    logn = np.log(np.maximum(norm, floor))
    beta = float(np.polyfit(t, logn, 1)[0])
    big_n = float(np.max(norm * np.exp(-beta * t)))
    return big_n, beta


def _convolution(bv: np.ndarray, r: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoidal ``int_0^{t_i} b(t_i - s) r(s) ds`` for all i (r may be 2-D)."""
    n = r.shape[0]
    out = np.zeros_like(r)
    for i in range(1, n):
        w = bv[i::-1] * dt
        w = w.copy()
        w[0] *= 0.5
        w[-1] *= 0.5
        out[i] = w @ r[: i + 1]
    return out


def resolvent_identity_residual(
    table: ResolventTable, kernel: MemoryKernel | None = None, n_check: int = 5
) -> float:
    """Max over interior times and the lowest modes of
    ``|r' + lam r + lam int b(t-s) r(s) ds| / lam`` with central differences.
    """
    kernel = kernel if kernel is not None else table.kernel
    grid = table.grid
    if grid.n_steps < 2:
        raise ValueError("need at least two steps for central differences")
    k = min(n_check, table.n_modes)
    r = table.entries[:, :k]
    lams = table.eigenvalues[:k]
    deriv = (r[2:] - r[:-2]) / (2 * grid.dt)
    if kernel is None or kernel.is_zero:
        conv = np.zeros_like(r)
    else:
        conv = _convolution(kernel.value(grid.points), r, grid.dt)
    res = np.abs(deriv + lams * (r[1:-1] + conv[1:-1])) / lams
    return float(res.max())


def mild_solution_deterministic(
    table: ResolventTable, v0: np.ndarray, q: np.ndarray
) -> np.ndarray:
    """Trapezoidal ``v(t_i) = R(t_i) v0 + int_0^{t_i} R(t_i - s) q(s) ds``.

    ``q`` holds the forcing on the table grid, shape (n_steps + 1, n_modes).
    """
    v0 = np.asarray(v0, dtype=float)
    q = np.asarray(q, dtype=float)
    n = table.grid.n_steps
    if q.shape != (n + 1, table.n_modes):
        raise ValueError(
            f"forcing must have shape {(n + 1, table.n_modes)} on the table grid, got {q.shape}"
        )
    if v0.shape != (table.n_modes,):
        raise ValueError(f"initial field must have {table.n_modes} modes")
    dt = table.grid.dt
    r = table.entries
    v = r * v0
    for i in range(1, n + 1):
        terms = r[i::-1] * q[: i + 1]
        v[i] += dt * (terms.sum(axis=0) - 0.5 * (terms[0] + terms[-1]))
    return v


def growth_audit(table: ResolventTable, max_constant: float = 2.0) -> dict:
    big_n, beta = growth_constants(table)
    return {"N": big_n, "beta": beta, "passed": bool(big_n <= max_constant and math.isfinite(beta))}
