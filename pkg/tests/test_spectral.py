from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neutral_fbm.errors import ConfigError
from neutral_fbm.spectral import (
    SpaceGrid,
    analyze,
    apply_multiplier,
    field_norm,
    nemytskii_apply,
    registry_lookup,
    synthesize,
    transform_matrices,
)

GRID = SpaceGrid(63)
fields = arrays(np.float64, 16, elements=st.floats(-5, 5))

REGISTRY = [
    ("zero", ()),
    ("constant", (0.7,)),
    ("scaled_tanh", (1.5, 0.8)),
    ("scaled_tanh", (0.6, 0.7, 0.4)),
    ("bounded_sine", (0.9, 2.5)),
]


class TestTransforms:
    def test_single_mode(self):
        e1 = np.zeros(8)
        e1[0] = 1.0
        assert np.allclose(synthesize(e1, GRID), math.sqrt(2 / math.pi) * np.sin(GRID.points), atol=1e-15)

    def test_zero(self):
        assert np.all(synthesize(np.zeros(8), GRID) == 0)
        assert np.all(analyze(np.zeros(63), GRID, 8) == 0)

    def test_pure_sine_analysis(self):
        c = analyze(np.sin(2 * GRID.points), GRID, 16)
        assert abs(c[1]) > 1
        assert np.max(np.abs(np.delete(c, 1))) < 1e-12

    def test_aliasing_rejected(self):
        with pytest.raises(ValueError):
            transform_matrices(64, GRID)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            analyze(np.zeros(10), GRID, 4)

    @given(x=fields)
    def test_round_trip(self, x):
        assert np.allclose(analyze(synthesize(x, GRID), GRID, 16), x, atol=1e-12)

    @given(x=fields)
    def test_parseval(self, x):
        vals = synthesize(x, GRID)
        quad = math.sqrt(GRID.weight * np.sum(vals**2))
        assert quad == pytest.approx(float(field_norm(x)), abs=1e-10)

    @given(a=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
    def test_linear(self, a, seed):
        rng = np.random.default_rng(seed)
        v, w = rng.standard_normal((2, 63))
        lhs = analyze(a * v + w, GRID, 16)
        assert np.allclose(lhs, a * analyze(v, GRID, 16) + analyze(w, GRID, 16), atol=1e-12)


class TestRegistry:
    def test_tanh_at_zero(self):
        fn = registry_lookup("scaled_tanh", (1.0, 1.0))
        assert fn(0.0) == 0.0
        assert fn(0.0, 1) == 1.0
        assert fn.zero_at_zero

    @pytest.mark.parametrize("name,params", REGISTRY)
    def test_declared_bounds(self, name, params):
        fn = registry_lookup(name, params)
        x = np.linspace(-10, 10, 200001)
        for k in range(fn.m_max + 1):
            assert np.max(np.abs(fn(x, k))) <= fn.bounds[k] * (1 + 1e-9) + 1e-15

    @pytest.mark.parametrize("name,params", REGISTRY)
    def test_analytic_derivatives(self, name, params):
        fn = registry_lookup(name, params)
        x = np.linspace(-3, 3, 41)
        eps = 1e-5
        for k in range(fn.m_max):
            fd = (fn(x + eps, k) - fn(x - eps, k)) / (2 * eps)
            assert np.allclose(fn(x, k + 1), fd, atol=1e-6 * max(1.0, fn.bounds[k + 1]))

    def test_constant_zero_at_zero_flag(self):
        with pytest.raises(ConfigError):
            registry_lookup("constant", (0.3,), require_zero_at_zero=True)
        assert registry_lookup("constant", (0.0,), require_zero_at_zero=True).zero_at_zero

    @pytest.mark.parametrize(
        "name,params", [("cubic", ()), ("constant", ()), ("scaled_tanh", (1.0,)), ("scaled_tanh", (1.0, 0.0))]
    )
    def test_bad_lookup(self, name, params):
        with pytest.raises(ConfigError):
            registry_lookup(name, params)

    def test_order_too_high(self):
        fn = registry_lookup("scaled_tanh", (1.0, 1.0))
        with pytest.raises(ValueError):
            fn(0.0, 5)


class TestNemytskii:
    def test_zero_function(self):
        x = np.arange(1.0, 9.0)
        assert np.all(nemytskii_apply(registry_lookup("zero"), 0, x, GRID) == 0)

    def test_zero_field(self):
        fn = registry_lookup("bounded_sine", (1.0, 2.0))
        assert np.all(nemytskii_apply(fn, 0, np.zeros(8), GRID) == 0)

    def test_order_check(self):
        with pytest.raises(ValueError):
            nemytskii_apply(registry_lookup("zero"), 5, np.zeros(4), GRID)

    @pytest.mark.parametrize("name,params", REGISTRY[2:])
    def test_frechet_derivative(self, name, params):
        fn = registry_lookup(name, params)
        rng = np.random.default_rng(4)
        x, h = rng.standard_normal((2, 12))
        base = nemytskii_apply(fn, 0, x, GRID)
        lin = apply_multiplier(nemytskii_apply(fn, 1, x, GRID), h, GRID)
        ratios = []
        for eps in (1e-2, 1e-3):
            rem = nemytskii_apply(fn, 0, x + eps * h, GRID) - base - eps * lin
            ratios.append(np.linalg.norm(rem) / eps**2)
        assert ratios[1] == pytest.approx(ratios[0], rel=0.1)

    @pytest.mark.parametrize("name,params", REGISTRY)
    def test_bounded_image(self, name, params):
        fn = registry_lookup(name, params)
        rng = np.random.default_rng(9)
        for _ in range(100):
            x = rng.standard_normal(16) * rng.uniform(0.1, 10)
            assert np.linalg.norm(nemytskii_apply(fn, 0, x, GRID)) <= fn.bounds[0] * math.sqrt(math.pi) + 1e-12

    def test_dirichlet_edges_shrink(self):
        fn = registry_lookup("scaled_tanh", (1.0, 1.0))
        x = np.array([1.0, 0.5, -0.2])
        edge = []
        for p in (31, 63, 127):
            g = SpaceGrid(p)
            vals = synthesize(nemytskii_apply(fn, 0, x, g), g)
            edge.append(abs(vals[0]) + abs(vals[-1]))
        assert edge[0] > edge[1] > edge[2]
