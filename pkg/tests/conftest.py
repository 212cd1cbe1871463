from __future__ import annotations

import pytest
from hypothesis import settings

from neutral_fbm.model import InitialFunction, ModelSpec
from neutral_fbm.resolvent import MemoryKernel
from neutral_fbm.spectral import registry_lookup

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def nonlinear_model(**changes) -> ModelSpec:
    """Small three-block nonlinear model used across the solver tests."""
    base = dict(
        hurst=0.7,
        horizon=0.75,
        delay=0.25,
        dt=1 / 32,
        phi=InitialFunction((1.0, 0.5, -0.3), "cosine", (2.0,)),
        g=registry_lookup("scaled_tanh", (0.3, 1.0)),
        f=registry_lookup("scaled_tanh", (-0.5, 1.0)),
        sigma=registry_lookup("scaled_tanh", (0.6, 0.7, 0.4)),
        kernel=MemoryKernel("exp_decay", (0.5, 1.0)),
        n_modes=4,
        n_points=15,
        derivative_depth=2,
    )
    base.update(changes)
    return ModelSpec(**base)


def linear_model(**changes) -> ModelSpec:
    base = dict(
        hurst=0.7,
        horizon=0.5,
        delay=0.25,
        dt=1 / 32,
        phi=InitialFunction((1.0, -0.5, 0.25)),
        sigma=registry_lookup("constant", (0.8,)),
        n_modes=4,
        n_points=15,
    )
    base.update(changes)
    return ModelSpec(**base)


@pytest.fixture
def small_model() -> ModelSpec:
    return nonlinear_model()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
