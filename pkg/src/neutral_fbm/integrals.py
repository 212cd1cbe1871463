"""Pathwise and Skorohod integrals against fractional Brownian motion.

For H > 1/2 the Skorohod integral of an adapted-looking integrand ``u`` is
the pathwise (Young) integral minus a trace term

    int int D_v u(s) phi_H(s - v) dv ds.

Both pieces are discretised on the same grid.  With the node-averaged
(trapezoidal) pathwise sum

    sum_j (u(t_j) + u(t_{j+1})) / 2 * dB_j

the matching trace uses, for every cell j, the exact cell covariance row
``M[j]`` against the average derivative of its two nodes.  Because ``M`` is
the covariance of the increments, the discrete integral has mean zero
exactly whenever the discrete derivative is exact.  Left sums are available
for the pathwise part but carry an ``O(n^{1-2H})`` relative trace defect.

Derivative surfaces are indexed by cell: ``entries[q, l]`` is the derivative
of ``y(t_q)`` with respect to the increment ``dB_l`` over cell ``l``; it must
vanish for ``l >= q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fbm import FbmSample, HurstParameter, TimeGrid, cell_covariance
from .spectral import SpaceGrid, apply_multiplier

__all__ = [
    "IntegrandTrajectory",
    "DerivativeSurface",
    "young_riemann_sum",
    "trace_correction",
    "skorohod_integral",
    "wiener_variance_oracle",
    "wiener_covariance_oracle",
    "RULES",
]

RULES = ("left", "trapezoid")


@dataclass(frozen=True)
class IntegrandTrajectory:
    """Integrand values at the grid nodes, shape ``(n + 1,) + field_shape``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"integrand needs {self.grid.n_steps + 1} nodes, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("integrand has non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class DerivativeSurface:
    """Derivatives ``entries[q, l] = D_l y(t_q)``, shape ``(n + 1, n) + field_shape``."""

    grid: TimeGrid
    entries: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=float)
        n = self.grid.n_steps
        if entries.shape[:2] != (n + 1, n):
            raise ValueError(f"derivative surface must start with shape {(n + 1, n)}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def zeros(cls, grid: TimeGrid, field_shape: tuple[int, ...] = ()) -> "DerivativeSurface":
        return cls(grid, np.zeros((grid.n_steps + 1, grid.n_steps) + tuple(field_shape)))

    def check_triangular(self, i_from: int, i_to: int, atol: float = 0.0) -> None:
        n = self.grid.n_steps
        q = np.arange(i_from, i_to + 1)[:, None]
        mask = np.arange(n)[None, :] >= q
        block = self.entries[i_from : i_to + 1]
        bad = np.abs(block[mask]) > atol
        if np.any(bad):
            raise ValueError("derivative surface is not lower triangular on the window")


def _check_window(grid: TimeGrid, i_from: int, i_to: int) -> None:
    if not (0 <= i_from <= i_to <= grid.n_steps):
        raise IndexError(f"window [{i_from}, {i_to}] outside grid 0..{grid.n_steps}")


def _check_rule(rule: str) -> None:
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")


def _node_weights(grid: TimeGrid, i_from: int, i_to: int, rule: str) -> list[tuple[int, np.ndarray]]:
    """Per node q: the row of increments it pairs with, as weights over cells."""
    out = []
    if rule == "left":
        for q in range(i_from, i_to):
            w = np.zeros(grid.n_steps)
            w[q] = 1.0
            out.append((q, w))
        return out
    for q in range(i_from, i_to + 1):
        w = np.zeros(grid.n_steps)
        if q < i_to:
            w[q] += 0.5
        if q > i_from:
            w[q - 1] += 0.5
        if w.any():
            out.append((q, w))
    return out


def young_riemann_sum(
    integrand: IntegrandTrajectory,
    fbm: FbmSample,
    i_from: int = 0,
    i_to: int | None = None,
    rule: str = "left",
) -> np.ndarray:
    """``sum_j u_j dB_j`` over cells ``i_from..i_to-1``.

    ``rule='left'`` evaluates at the left node; ``rule='trapezoid'`` averages
    the two nodes of each cell.
    """
    grid = fbm.grid
    i_to = grid.n_steps if i_to is None else i_to
    _check_window(grid, i_from, i_to)
    _check_rule(rule)
    if integrand.grid != grid:
        raise ValueError("integrand and fBm sample live on different grids")
    u = integrand.values
    db = fbm.increments[i_from:i_to]
    if rule == "left":
        cell = u[i_from:i_to]
    else:
        cell = 0.5 * (u[i_from:i_to] + u[i_from + 1 : i_to + 1])
    return np.tensordot(db, cell, axes=(0, 0))


def trace_correction(
    derivative: DerivativeSurface,
    h: float | HurstParameter,
    i_from: int = 0,
    i_to: int | None = None,
    multiplier: np.ndarray | None = None,
    resolvent_weight: np.ndarray | None = None,
    space_grid: SpaceGrid | None = None,
    rule: str = "trapezoid",
) -> np.ndarray:
    """``sum_q w_q R_q [sigma'_q * (sum_l M_{row(q), l} D_l y_q)]`` over the window.

    ``multiplier`` is either a physical multiplier per node, shape
    ``(n + 1, P)`` (needs ``space_grid``), or a scalar per node.  ``None``
    means the identity.  ``resolvent_weight`` multiplies per node and mode.
    """
    grid = derivative.grid
    i_to = grid.n_steps if i_to is None else i_to
    _check_window(grid, i_from, i_to)
    _check_rule(rule)
    derivative.check_triangular(i_from, i_to)
    mat = cell_covariance(grid, float(h))
    field_shape = derivative.entries.shape[2:]
    total = np.zeros(field_shape)
    for q, w in _node_weights(grid, i_from, i_to, rule):
        row = w @ mat
        y = np.tensordot(row, derivative.entries[q], axes=(0, 0))
        if multiplier is not None:
            mq = np.asarray(multiplier[q])
            if mq.ndim == 0:
                y = mq * y
            else:
                if space_grid is None:
                    raise ValueError("a physical multiplier needs the space grid")
                y = apply_multiplier(mq, y, space_grid)
        if resolvent_weight is not None:
            y = resolvent_weight[q] * y
        total = total + y
    return total


def skorohod_integral(
    integrand: IntegrandTrajectory,
    derivative: DerivativeSurface | None,
    fbm: FbmSample,
    h: float | HurstParameter,
    i_from: int = 0,
    i_to: int | None = None,
    multiplier: np.ndarray | None = None,
    resolvent_weight: np.ndarray | None = None,
    space_grid: SpaceGrid | None = None,
    rule: str = "trapezoid",
) -> np.ndarray:
    """Pathwise sum of ``resolvent_weight * integrand`` minus the trace term.

    ``derivative`` describes the integrand's inner factor so that
    ``D_l u(t_q) = resolvent_weight_q * multiplier_q * entries[q, l]``;
    ``None`` marks a deterministic integrand.
    """
    values = integrand.values
    if resolvent_weight is not None:
        values = resolvent_weight * values
    pathwise = young_riemann_sum(IntegrandTrajectory(integrand.grid, values), fbm, i_from, i_to, rule)
    if derivative is None:
        return pathwise
    corr = trace_correction(
        derivative, h, i_from, i_to, multiplier, resolvent_weight, space_grid, rule
    )
    return pathwise - corr


def _cell_coefficients(u: np.ndarray, rule: str) -> np.ndarray:
    return u[:-1] if rule == "left" else 0.5 * (u[:-1] + u[1:])


def wiener_covariance_oracle(
    u: IntegrandTrajectory,
    v: IntegrandTrajectory,
    h: float | HurstParameter,
    rule: str = "trapezoid",
) -> np.ndarray:
    """Per-mode ``E[delta(u) delta(v)]`` for deterministic integrands.

    Both discrete integrals are linear in the increments, so the covariance
    is ``a^T M b`` with the cell coefficients implied by ``rule``.
    """
    _check_rule(rule)
    if u.grid != v.grid:
        raise ValueError("integrands live on different grids")
    mat = cell_covariance(u.grid, float(h))
    a = _cell_coefficients(u.values, rule)
    b = _cell_coefficients(v.values, rule)
    return np.einsum("i...,ij,j...->...", a, mat, b)


def wiener_variance_oracle(
    integrand: IntegrandTrajectory, h: float | HurstParameter, rule: str = "trapezoid"
) -> np.ndarray:
    return wiener_covariance_oracle(integrand, integrand, h, rule)
