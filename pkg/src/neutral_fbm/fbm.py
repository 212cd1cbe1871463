"""Fractional Brownian motion with Hurst index in (1/2, 1).

Closed-form covariance, the Volterra kernel of the Wiener-integral
representation, reproducing-kernel inner products of piecewise-constant
grid functions, and two independent path samplers (exact Cholesky and the
kernel quadrature of the Wiener representation).

Grid functions follow a right-endpoint convention: ``values[i + 1]`` is the
value on the cell ``(t_i, t_{i+1}]``.  Indicators ``1_{[0, t_k]}`` sampled at
grid points are therefore represented exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

from .errors import NumericalError

__all__ = [
    "HurstParameter",
    "TimeGrid",
    "FbmSample",
    "ScalarFunctionOnGrid",
    "covariance",
    "covariance_matrix",
    "normalizing_constant",
    "kernel_K",
    "kernel_K_dr",
    "kernel_K_star_apply",
    "kernel_K_star_norm_sq",
    "cell_covariance",
    "inner_product_H",
    "sample_fbm_cholesky",
    "sample_fbm_wiener",
    "sample_fbm_paths",
    "wiener_kernel_matrix",
    "wiener_quadrature_bias",
    "registry_test_functions",
]


@dataclass(frozen=True)
class HurstParameter:
    """Hurst index restricted to the open interval (1/2, 1)."""

    h: float

    def __post_init__(self) -> None:
        if not (0.5 < float(self.h) < 1.0):
            raise ValueError(f"hurst out of (1/2,1): {self.h}")

    def __float__(self) -> float:
        return float(self.h)


def _h(h: float | HurstParameter) -> float:
    return float(HurstParameter(float(h)))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, t_max]``."""

    t_max: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.n_steps < 1 or int(self.n_steps) != self.n_steps:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise ValueError(f"t_max must be positive and finite, got {self.t_max}")

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_max, self.n_steps * factor)


@dataclass(frozen=True)
class FbmSample:
    grid: TimeGrid
    values: np.ndarray
    seed_label: int

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)


@dataclass(frozen=True)
class ScalarFunctionOnGrid:
    """Piecewise-constant function; ``values[i+1]`` holds the value on cell i."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_steps + 1,):
            raise ValueError(
                f"expected {self.grid.n_steps + 1} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function has non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def cell_values(self) -> np.ndarray:
        return self.values[1:]

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray]):
        return cls(grid, np.asarray(fn(grid.points), dtype=float) * np.ones(grid.n_steps + 1))

    @classmethod
    def indicator(cls, grid: TimeGrid, a: float, b: float) -> "ScalarFunctionOnGrid":
        """Indicator of ``(a, b]`` (equal to ``[0, b]`` when ``a < 0``)."""
        t = grid.points
        tol = 1e-12 * grid.t_max
        vals = ((t > a + tol) & (t <= b + tol)).astype(float)
        return cls(grid, vals)


# ---------------------------------------------------------------------------
# covariance and constants
# ---------------------------------------------------------------------------


def covariance(s, t, h: float):
    """R_H(s, t) = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2.

    ``h`` is not range-checked here so that the formula can be evaluated at
    the Brownian endpoint h = 1/2 as a regression check.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("covariance requires non-negative times")
    two_h = 2.0 * float(h)
    out = 0.5 * (t**two_h + s**two_h - np.abs(t - s) ** two_h)
    return float(out) if out.ndim == 0 else out


def covariance_matrix(times: np.ndarray, h: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return covariance(times[:, None], times[None, :], h)


def normalizing_constant(h: float | HurstParameter) -> float:
    """c_H = sqrt(H(2H-1) / B(2-2H, H-1/2)), Beta via log-Gamma."""
    h = _h(h)
    log_beta = special.betaln(2.0 - 2.0 * h, h - 0.5)
    return math.sqrt(h * (2.0 * h - 1.0) * math.exp(-log_beta))


# ---------------------------------------------------------------------------
# kernel K_H
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _composite_gauss(n_panels: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def kernel_K(t, s, h: float | HurstParameter, n_panels: int = 4, order: int = 12):
    """Volterra kernel K_H(t, s); zero for ``t <= s``.

    With ``w = (u - s)^{H-1/2}`` the integral becomes
    ``(1/(H-1/2)) * int_0^{(t-s)^{H-1/2}} (s + w^{1/(H-1/2)})^{H-1/2} dw``
    whose integrand is smooth, so composite Gauss-Legendre converges fast.
    """
    h = _h(h)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("kernel_K is undefined at s <= 0")
    t, s = np.broadcast_arrays(t, s)
    alpha = h - 0.5
    out = np.zeros(t.shape)
    mask = t > s
    if np.any(mask):
        tm, sm = t[mask], s[mask]
        upper = (tm - sm) ** alpha
        nodes, weights = _composite_gauss(n_panels, order)
        w = upper[:, None] * nodes[None, :]
        integrand = (sm[:, None] + w ** (1.0 / alpha)) ** alpha
        integral = upper * (integrand @ weights) / alpha
        out[mask] = normalizing_constant(h) * sm ** (-alpha) * integral
    return float(out) if out.ndim == 0 else out


def kernel_K_dr(r, s, h: float | HurstParameter):
    """dK_H/dr (r, s) = c_H s^{1/2-H} (r-s)^{H-3/2} r^{H-1/2} for r > s, else 0."""
    h = _h(h)
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    r, s = np.broadcast_arrays(r, s)
    out = np.zeros(r.shape)
    mask = r > s
    out[mask] = (
        normalizing_constant(h)
        * s[mask] ** (0.5 - h)
        * (r[mask] - s[mask]) ** (h - 1.5)
        * r[mask] ** (h - 0.5)
    )
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=32)
def _jacobi_rule(order: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    # weight (1 + x)^beta on [-1, 1]
    x, w = special.roots_jacobi(order, 0.0, beta)
    return x, w


@lru_cache(maxsize=32)
def _graded_panels(levels: int, ratio: float) -> np.ndarray:
    # panel edges on [0, 1], geometrically graded toward 0
    return np.concatenate([[0.0], ratio ** np.arange(levels, -1, -1, dtype=float)])


def _weighted_segment_integral(s: np.ndarray, b: np.ndarray, h: float, order: int) -> np.ndarray:
    """int_s^b (r - s)^{H-3/2} r^{H-1/2} dr for b > s, elementwise.

    The algebraic endpoint weight is absorbed by a Gauss-Jacobi rule on the
    first panel; the remaining panels are graded toward ``s`` and use plain
    Gauss-Legendre since the integrand is smooth away from ``r = s``.
    """
    beta = h - 1.5
    gam = h - 0.5
    length = b - s
    edges = _graded_panels(10, 0.3)
    xj, wj = _jacobi_rule(order, beta)
    xg, wg = np.polynomial.legendre.leggauss(order)

    first = edges[1] * length
    r = s[..., None] + 0.5 * first[..., None] * (xj + 1.0)
    total = (0.5 * first) ** (beta + 1.0) * ((r**gam) @ wj)

    for lo, hi in zip(edges[1:-1], edges[2:]):
        a_ = s + lo * length
        half = 0.5 * (hi - lo) * length
        r = a_[..., None] + half[..., None] * (xg + 1.0)
        total = total + half * (((r - s[..., None]) ** beta * r**gam) @ wg)
    return total


def kernel_K_star_apply(
    phi: ScalarFunctionOnGrid,
    h: float | HurstParameter,
    points: np.ndarray | None = None,
    order: int = 10,
) -> np.ndarray:
    """(K_H^* phi)(s) = int_s^T phi(r) dK/dr(r, s) dr at the given points.

    ``points`` must lie in ``(0, T]``; the default is the cell midpoints.
    The derivative ``dK/dr`` is used in closed form; the piecewise-constant
    ``phi`` turns the integral into a telescoping sum of weighted segment
    integrals starting at ``s``.
    """
    h = _h(h)
    grid = phi.grid
    s = grid.midpoints if points is None else np.asarray(points, dtype=float)
    if np.any(s <= 0) or np.any(s > grid.t_max * (1 + 1e-12)):
        raise ValueError("K* evaluation points must lie in (0, T]")
    c = phi.cell_values
    # jump of phi at grid point t_k, k = 1..n (phi := 0 beyond T)
    jumps = c - np.append(c[1:], 0.0)
    t_k = grid.points[1:]
    out = np.zeros(s.shape)
    for idx, sv in np.ndenumerate(s):
        sel = (t_k > sv) & (jumps != 0.0)
        if not np.any(sel):
            continue
        seg = _weighted_segment_integral(np.full(sel.sum(), sv), t_k[sel], h, order)
        out[idx] = seg @ jumps[sel]
    return normalizing_constant(h) * s ** (0.5 - h) * out


def kernel_K_star_norm_sq(
    phi: ScalarFunctionOnGrid, h: float | HurstParameter, order: int = 6
) -> float:
    """L^2([0, T]) norm squared of K_H^* phi.

    Cell-wise Gauss quadrature; on the first cell the s^{1-2H} singularity is
    carried by a Gauss-Jacobi weight.
    """
    h = _h(h)
    grid = phi.grid
    dt = grid.dt
    xg, wg = np.polynomial.legendre.leggauss(order)
    lefts = grid.points[1:-1]
    s_rest = (lefts[:, None] + 0.5 * dt * (xg + 1.0)).ravel()
    vals = kernel_K_star_apply(phi, h, s_rest).reshape(len(lefts), order)
    total = 0.5 * dt * np.sum((vals**2) @ wg)

    beta = 1.0 - 2.0 * h
    xj, wj = _jacobi_rule(order, beta)
    s0 = 0.5 * dt * (xj + 1.0)
    v0 = kernel_K_star_apply(phi, h, s0)
    total += (0.5 * dt) ** (beta + 1.0) * np.sum(v0**2 * s0 ** (-beta) * wj)
    return float(total)


# ---------------------------------------------------------------------------
# reproducing-kernel inner product
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _cell_covariance_cached(n_steps: int, dt: float, h: float) -> np.ndarray:
    k = np.arange(n_steps, dtype=float)
    two_h = 2.0 * h
    gamma = 0.5 * dt**two_h * ((k + 1) ** two_h + np.abs(k - 1) ** two_h - 2 * k**two_h)
    idx = np.abs(np.subtract.outer(np.arange(n_steps), np.arange(n_steps)))
    mat = gamma[idx]
    mat.setflags(write=False)
    return mat


def cell_covariance(grid: TimeGrid, h: float | HurstParameter) -> np.ndarray:
    """Matrix of ``H(2H-1) int_{cell i} int_{cell j} |t-s|^{2H-2} ds dt``.

    The weight is integrated exactly (its second antiderivative is
    ``|x|^{2H} / (2H(2H-1))``), which yields the covariance of the fBm
    increments over the cells.
    """
    return _cell_covariance_cached(grid.n_steps, grid.dt, _h(h))


def inner_product_H(
    psi: ScalarFunctionOnGrid, phi: ScalarFunctionOnGrid, h: float | HurstParameter
) -> float:
    if psi.grid != phi.grid:
        raise ValueError("inner_product_H requires functions on the same grid")
    mat = cell_covariance(phi.grid, h)
    a = psi.cell_values
    b = phi.cell_values
    # symmetrize the bilinear form so that <a, b> == <b, a> bit for bit
    return float(0.5 * (a @ (mat @ b) + b @ (mat @ a)))


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _cholesky_factor(n_steps: int, t_max: float, h: float) -> np.ndarray:
    times = np.arange(1, n_steps + 1) * (t_max / n_steps)
    cov = covariance_matrix(times, h)
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"Cholesky factorization of the fBm covariance failed "
            f"(n={n_steps}, H={h}); duplicated or degenerate grid points?"
        ) from exc
    factor.setflags(write=False)
    return factor


def sample_fbm_paths(grid: TimeGrid, h: float | HurstParameter, seeds) -> np.ndarray:
    """Exact fBm paths, one row per seed, each drawn from its own generator."""
    h = _h(h)
    factor = _cholesky_factor(grid.n_steps, grid.t_max, h)
    seeds = list(seeds)
    z = np.empty((len(seeds), grid.n_steps))
    for i, seed in enumerate(seeds):
        z[i] = np.random.default_rng(seed).standard_normal(grid.n_steps)
    out = np.zeros((len(seeds), grid.n_steps + 1))
    out[:, 1:] = z @ factor.T
    return out


def sample_fbm_cholesky(grid: TimeGrid, h: float | HurstParameter, seed: int) -> FbmSample:
    return FbmSample(grid, sample_fbm_paths(grid, h, [seed])[0], int(seed))


@lru_cache(maxsize=8)
def _wiener_matrix(n_steps: int, t_max: float, h: float) -> np.ndarray:
    dt = t_max / n_steps
    t = np.arange(1, n_steps + 1) * dt
    s = (np.arange(n_steps) + 0.5) * dt
    mat = kernel_K(t[:, None], s[None, :], h)
    mat.setflags(write=False)
    return mat


def wiener_kernel_matrix(grid: TimeGrid, h: float | HurstParameter) -> np.ndarray:
    """``K_H(t_i, s_j*)`` for i = 1..n and cell midpoints s_j*."""
    return _wiener_matrix(grid.n_steps, grid.t_max, _h(h))


def sample_fbm_wiener(
    grid: TimeGrid,
    h: float | HurstParameter,
    seed: int,
    brownian_increments: np.ndarray | None = None,
) -> FbmSample:
    """fBm path from the midpoint quadrature of ``int_0^t K_H(t, s) dB(s)``.

    ``brownian_increments`` overrides the generator (used to check linearity).
    """
    mat = wiener_kernel_matrix(grid, h)
    if brownian_increments is None:
        rng = np.random.default_rng(seed)
        brownian_increments = rng.standard_normal(grid.n_steps) * math.sqrt(grid.dt)
    values = np.zeros(grid.n_steps + 1)
    values[1:] = mat @ np.asarray(brownian_increments, dtype=float)
    return FbmSample(grid, values, int(seed))


def wiener_quadrature_bias(grid: TimeGrid, h: float | HurstParameter) -> np.ndarray:
    """Exact variance of the quadrature sampler minus t_i^{2H}, i = 1..n."""
    h = _h(h)
    mat = wiener_kernel_matrix(grid, h)
    return (mat**2).sum(axis=1) * grid.dt - grid.points[1:] ** (2 * h)


def registry_test_functions(grid: TimeGrid) -> dict[str, ScalarFunctionOnGrid]:
    """Fixed set of bounded test functions used by the isometry checks."""
    T = grid.t_max
    return {
        "indicator_half": ScalarFunctionOnGrid.indicator(grid, -1.0, 0.5 * T),
        "indicator_full": ScalarFunctionOnGrid.indicator(grid, -1.0, T),
        "ramp": ScalarFunctionOnGrid.from_callable(grid, lambda t: t / T),
        "sine": ScalarFunctionOnGrid.from_callable(grid, lambda t: np.sin(2 * np.pi * t / T)),
        "decay": ScalarFunctionOnGrid.from_callable(grid, lambda t: np.exp(-3.0 * t / T)),
    }
