"""Path-level and Monte Carlo audits of the solver.

Each audit returns a plain dict with a boolean ``passed`` so that the
command line can report the failing one by name.
"""

from __future__ import annotations

import math

import numpy as np

from .density import last_interval_cell_derivative
from .fbm import FbmSample, TimeGrid, sample_fbm_cholesky
from .mc import MomentsReport, derive_seed
from .model import ModelSpec
from .resolvent import ResolventTable
from .solver import PathState, new_state, propagate_malliavin, resolvent_for, solve_block, solve_path

__all__ = [
    "block_consistency",
    "last_interval_identity",
    "skorohod_zero_mean",
    "moment_bound",
    "boundedness_audit",
    "doubling_stability",
    "self_convergence",
]


def block_consistency(model: ModelSpec, seed: int, table: ResolventTable | None = None) -> dict:
    """Stored values on earlier blocks are bit-identical after each new block."""
    state = new_state(model, seed=seed, table=table)
    p = model.steps_per_delay
    snaps = []
    for k in range(model.blocks):
        solve_block(k, state)
        propagate_malliavin(k, state, 1)
        if model.derivative_depth >= 2 and k + 1 < model.blocks:
            propagate_malliavin(k, state, 2)
        snaps.append(state.solution.values[: (k + 1) * p + p + 1].copy())
    final = state.solution.values
    same = all(np.array_equal(s, final[: s.shape[0]]) for s in snaps)
    return {"passed": bool(same), "blocks": model.blocks}


def last_interval_identity(state: PathState, samples: int = 50, rng_seed: int = 0) -> dict:
    """Stored ``D_l x(t_a)`` against the closed form for random cells of the last interval."""
    model = state.model
    n, p = model.n_steps, model.steps_per_delay
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    scale = 0.0
    for _ in range(samples):
        a = int(rng.integers(1, n + 1))
        lo = max(a - p, 0)
        cell = int(rng.integers(lo, a))
        ref = last_interval_cell_derivative(state, cell, a)
        stored = state.malliavin.d1[a, cell]
        worst = max(worst, float(np.max(np.abs(stored - ref))))
        scale = max(scale, float(np.max(np.abs(ref))))
    tol = 1e-12 * max(1.0, scale)
    return {"passed": worst <= tol, "max_abs_error": worst, "tolerance": tol}


def skorohod_zero_mean(report: MomentsReport, n_se: float = 3.0) -> dict:
    """Every block's Skorohod term has Monte Carlo mean within ``n_se`` standard errors of 0."""
    se = np.where(report.skorohod_se > 0, report.skorohod_se, np.inf)
    z = np.abs(report.skorohod_mean) / se
    # identically zero modes (se = 0) must have mean exactly 0
    zero_bad = (report.skorohod_se == 0) & (report.skorohod_mean != 0)
    return {
        "passed": bool(np.all(z <= n_se) and not np.any(zero_bad)),
        "max_z": float(np.max(np.where(np.isfinite(z), z, 0.0))),
        "n_se": n_se,
    }


def moment_bound(model: ModelSpec, table: ResolventTable | None = None) -> float:
    """Crude bound on ``sup_t E||x(t)||^2`` over ``[0, T]``.

    ``||a + b + c + d||^2 <= 4 (...)`` with the resolvent sup ``N_R``, the
    coefficient sups and the variance of the Wiener integral of the constant
    majorant ``N_R sqrt(pi) sup|sigma|``:

        4 [N_R^2 ||c0||^2 + pi B_g^2 + (T N_R)^2 pi B_f^2 + N_R^2 pi B_sigma^2 T^{2H}]
    """
    table = resolvent_for(model) if table is None else table
    n_r = float(np.max(np.abs(table.entries)))
    phi0 = model.phi(np.array(0.0), model.n_modes)
    phir = model.phi(np.array(-model.delay), model.n_modes)
    from .spectral import nemytskii_apply

    c0 = phi0 + nemytskii_apply(model.g, 0, phir, model.space_grid)
    T, h = model.horizon, model.hurst
    b_g, b_f, b_s = model.g.bounds[0], model.f.bounds[0], model.sigma.bounds[0]
    return 4.0 * (
        n_r**2 * float(c0 @ c0)
        + math.pi * b_g**2
        + (T * n_r) ** 2 * math.pi * b_f**2
        + n_r**2 * math.pi * b_s**2 * T ** (2 * h)
    )


def boundedness_audit(report: MomentsReport, model: ModelSpec, table=None, headroom: float = 1.5) -> dict:
    bound = moment_bound(model, table)
    sup = report.sup_mean_sq_norm
    return {"passed": bool(headroom * sup <= bound), "sup_mean_sq_norm": sup, "bound": bound}


def doubling_stability(half: MomentsReport, full: MomentsReport, n_se: float = 3.0) -> dict:
    """Sups after ``n`` and ``2n`` paths agree within ``n_se`` standard errors.

    The standard error of each sup is that of the entry attaining it.
    """
    out = {"passed": True}
    for name, mean_attr, se_attr in (
        ("mean_sq_norm", "mean_sq_norm", "se"),
        ("d1_mean_sq", "d1_mean_sq", "d1_se"),
        ("d2_mean_sq", "d2_mean_sq", "d2_se"),
    ):
        a, b = getattr(half, mean_attr), getattr(full, mean_attr)
        if a.size == 0:
            continue
        ia, ib = np.unravel_index(np.argmax(a), a.shape), np.unravel_index(np.argmax(b), b.shape)
        sa, sb = float(getattr(half, se_attr)[ia]), float(getattr(full, se_attr)[ib])
        # the 2n sample contains the n sample, so the difference has SE <= sa
        diff = abs(float(a[ia]) - float(b[ib]))
        ok = math.isfinite(diff) and diff <= n_se * max(sa, sb)
        out[name] = {"half": float(a[ia]), "full": float(b[ib]), "se": max(sa, sb), "passed": ok}
        out["passed"] = out["passed"] and ok
    return out


def self_convergence(
    model: ModelSpec,
    levels: tuple[int, ...] = (64, 128, 256, 512),
    n_paths: int = 16,
    seed: int = 0,
) -> dict:
    """``||x_dt(T) - x_{dt/2}(T)||_{L^2(Omega)}`` over successive refinements.

    ``levels`` are steps per unit time.  Every level sees the same fBm path,
    drawn on the finest grid and subsampled, which is exact on the coarse nodes.
    """
    levels = tuple(sorted(levels))
    fine = levels[-1]
    grid = TimeGrid(model.horizon, int(round(model.horizon * fine)))
    tables = {}
    models = {}
    for lv in levels:
        m = model.replace(dt=1.0 / lv, blocks=model.blocks)
        models[lv] = m
        tables[lv] = resolvent_for(m)
    sq = np.zeros(len(levels) - 1)
    for i in range(n_paths):
        path = sample_fbm_cholesky(grid, model.hurst, derive_seed(seed, i))
        ends = []
        for lv in levels:
            step = fine // lv
            m = models[lv]
            coarse = FbmSample(m.time_grid, path.values[::step].copy(), path.seed_label)
            st = solve_path(m, fbm=coarse, table=tables[lv], final_derivatives=False)
            ends.append(st.solution.at(m.n_steps))
        for k in range(len(levels) - 1):
            d = ends[k] - ends[k + 1]
            sq[k] += float(d @ d)
    errs = np.sqrt(sq / n_paths)
    monotone = bool(np.all(np.diff(errs) < 0))
    return {
        "passed": monotone,
        "levels": list(levels),
        "errors": [float(e) for e in errs],
        "ratios": [float(errs[k] / errs[k + 1]) for k in range(len(errs) - 1)],
    }
