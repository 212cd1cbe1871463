"""Truncated ``L^2([0, pi])`` with Dirichlet sine basis and Nemytskii operators.

Fields are coefficient arrays whose last axis runs over the modes
``e_n(y) = sqrt(2/pi) sin(n y)``, n = 1..N.  Because the basis is orthonormal,
the ``L^2`` norm of a field is the Euclidean norm of its coefficients.

Physical values live on the interior collocation points
``y_j = j pi / (P + 1)``, j = 1..P.  The transforms are the type-I discrete
sine transform written as dense matrices, which is exact on the truncated
span and faster than an FFT at these sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field as dc_field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import ConfigError

__all__ = [
    "SpaceGrid",
    "CoefficientFunction",
    "synthesize",
    "analyze",
    "transform_matrices",
    "nemytskii_apply",
    "apply_multiplier",
    "registry_lookup",
    "field_norm",
]

M_MAX = 4


@dataclass(frozen=True)
class SpaceGrid:
    n_points: int = 127

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("n_points must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.arange(1, self.n_points + 1) * math.pi / (self.n_points + 1)

    @property
    def weight(self) -> float:
        """Quadrature weight of each collocation point."""
        return math.pi / (self.n_points + 1)


@lru_cache(maxsize=16)
def _matrices(n_modes: int, n_points: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.arange(1, n_points + 1) * math.pi / (n_points + 1)
    n = np.arange(1, n_modes + 1)
    synth = math.sqrt(2.0 / math.pi) * np.sin(np.outer(n, y))  # (N, P)
    anal = synth.T * (math.pi / (n_points + 1))  # (P, N)
    synth.setflags(write=False)
    anal.setflags(write=False)
    return synth, anal


def transform_matrices(n_modes: int, grid: SpaceGrid) -> tuple[np.ndarray, np.ndarray]:
    """``(S, A)`` with ``values = coeffs @ S`` and ``coeffs = values @ A``."""
    if grid.n_points < n_modes:
        raise ValueError(
            f"n_points={grid.n_points} < n_modes={n_modes} would alias the sine modes"
        )
    return _matrices(n_modes, grid.n_points)


def synthesize(field: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    synth, _ = transform_matrices(field.shape[-1], grid)
    return field @ synth


def analyze(values: np.ndarray, grid: SpaceGrid, n_modes: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != grid.n_points:
        raise ValueError(f"expected {grid.n_points} point values, got {values.shape[-1]}")
    _, anal = transform_matrices(n_modes, grid)
    return values @ anal


def field_norm(field: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(field) ** 2, axis=-1))


@dataclass(frozen=True)
class CoefficientFunction:
    """Scalar function ``R -> R`` with analytic derivatives up to ``M_MAX``.

    ``bounds[k]`` bounds ``|d^k fn|`` on the whole real line.
    """

    name: str
    params: tuple[float, ...]
    derivatives: tuple[Callable[[np.ndarray], np.ndarray], ...] = dc_field(compare=False, repr=False)
    bounds: tuple[float, ...] = dc_field(compare=False)

    @property
    def m_max(self) -> int:
        return len(self.derivatives) - 1

    @property
    def zero_at_zero(self) -> bool:
        return bool(self.derivatives[0](np.zeros(1))[0] == 0.0)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero" or (
            self.name in ("constant",) and self.params[0] == 0.0
        )

    @property
    def is_constant(self) -> bool:
        return self.name in ("zero", "constant")

    def __call__(self, x, order: int = 0) -> np.ndarray:
        if order > self.m_max:
            raise ValueError(f"derivative order {order} exceeds m_max={self.m_max} of {self.name}")
        return self.derivatives[order](np.asarray(x, dtype=float))


# sup |d^k tanh| for k = 0..4
_TANH_BOUNDS = (1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0)), 2.0, 4.0859)


def _tanh_derivs(a: float, s: float, c: float):
    def d(k):
        def fn(x):
            t = np.tanh(x / s)
            sech2 = 1.0 - t * t
            if k == 0:
                return c + a * t
            poly = {1: 1.0, 2: -2.0 * t, 3: 6.0 * t * t - 2.0, 4: 16.0 * t - 24.0 * t**3}[k]
            return a / s**k * sech2 * poly

        return fn

    return tuple(d(k) for k in range(M_MAX + 1))


def _sine_derivs(a: float, w: float):
    def d(k):
        def fn(x):
            # d^k sin = sin(x + k pi/2)
            return a * w**k * np.sin(w * x + 0.5 * k * math.pi)

        return fn

    return tuple(d(k) for k in range(M_MAX + 1))


def _constant_derivs(c: float):
    return (lambda x: np.full_like(x, c),) + tuple(
        (lambda x: np.zeros_like(x)) for _ in range(M_MAX)
    )


def registry_lookup(
    name: str, params=(), require_zero_at_zero: bool = False
) -> CoefficientFunction:
    """Build a registry coefficient function.

    - ``zero``
    - ``constant(c)``
    - ``scaled_tanh(a, s[, c])``: ``c + a tanh(x / s)``; ``c`` defaults to 0
    - ``bounded_sine(a, w)``: ``a sin(w x)``
    """
    params = tuple(float(p) for p in params)

    def arity(lo, hi=None):
        hi = lo if hi is None else hi
        if not lo <= len(params) <= hi:
            raise ConfigError(f"coefficient {name!r} takes {lo}..{hi} parameters, got {len(params)}")

    if name == "zero":
        arity(0)
        fn = CoefficientFunction(name, params, _constant_derivs(0.0), (0.0,) * (M_MAX + 1))
    elif name == "constant":
        arity(1)
        c = params[0]
        fn = CoefficientFunction(name, params, _constant_derivs(c), (abs(c),) + (0.0,) * M_MAX)
    elif name == "scaled_tanh":
        arity(2, 3)
        a, s = params[:2]
        c = params[2] if len(params) == 3 else 0.0
        if s <= 0:
            raise ConfigError("scaled_tanh scale s must be positive")
        bounds = (abs(c) + abs(a),) + tuple(abs(a) / s**k * _TANH_BOUNDS[k] for k in range(1, M_MAX + 1))
        fn = CoefficientFunction(name, (a, s, c), _tanh_derivs(a, s, c), bounds)
    elif name == "bounded_sine":
        arity(2)
        a, w = params
        bounds = tuple(abs(a) * abs(w) ** k for k in range(M_MAX + 1))
        fn = CoefficientFunction(name, params, _sine_derivs(a, w), bounds)
    else:
        raise ConfigError(
            f"unknown coefficient function {name!r}; "
            "choose from zero, constant, scaled_tanh, bounded_sine"
        )
    if require_zero_at_zero and not fn.zero_at_zero:
        raise ConfigError(f"coefficient {name}{params} must vanish at 0")
    return fn


def nemytskii_apply(
    fn: CoefficientFunction, derivative_order: int, field: np.ndarray, grid: SpaceGrid
) -> np.ndarray:
    """Pointwise composition on the collocation grid.

    Order 0 returns the coefficients of ``fn(x(y))`` truncated to the field's
    modes.  Order ``k >= 1`` returns the physical multiplier ``fn^{(k)}(x(y))``,
    to be combined with direction fields through :func:`apply_multiplier`.
    """
    field = np.asarray(field, dtype=float)
    if derivative_order > fn.m_max:
        raise ValueError(f"derivative order {derivative_order} exceeds m_max={fn.m_max}")
    values = fn(synthesize(field, grid), derivative_order)
    if derivative_order == 0:
        return analyze(values, grid, field.shape[-1])
    return values


def apply_multiplier(multiplier: np.ndarray, direction: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Coefficients of ``multiplier(y) * direction(y)``."""
    direction = np.asarray(direction, dtype=float)
    return analyze(multiplier * synthesize(direction, grid), grid, direction.shape[-1])
