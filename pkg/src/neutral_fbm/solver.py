"""Method-of-steps solver with the Malliavin derivative carried along.

Time ``a`` (grid index, ``t_a = a dt``) runs over ``[-p, n]`` with
``p = r / dt``.  The solution satisfies, for ``a >= 1``,

    x_a = r(t_a) c0 - g(x_{a-p}) + sum_{q<a} r(t_a - t_q) right_q
                                 + sum_{1<=q<=a} r(t_a - t_q) left_q

where ``c0 = phi(0) + g(phi(-r))`` and every node ``q`` contributes a right
half (paired with cell ``q``) and a left half (paired with cell ``q-1``):

    right_q = dt/2 f_q + dB_q/2 sigma_q - 1/2 sigma'_q * Ya_q
    left_q  = dt/2 f_q + dB_{q-1}/2 sigma_q - 1/2 sigma'_q * Yb_q

with coefficients evaluated at ``x_{q-p}`` and ``Ya_q = sum_l M[q, l] D_l x_{q-p}``,
``Yb_q = sum_l M[q-1, l] D_l x_{q-p}``.  ``M`` is the exact covariance of the
fBm increments, so the stochastic part is a discrete Skorohod integral with
mean zero.  Differentiating the scheme with respect to each increment gives
the first-order recursion; its trace terms need the contracted second
derivatives ``DYa``/``DYb``, which vanish for nodes whose delayed argument
lies in the first block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConsistencyError, HorizonError
from .fbm import FbmSample, cell_covariance, sample_fbm_cholesky
from .model import ModelSpec
from .resolvent import ResolventTable, build_resolvent_table
from .spectral import _matrices, transform_matrices

__all__ = [
    "PathState",
    "PathSolution",
    "MalliavinGrid",
    "TruncationWarning",
    "new_state",
    "solve_block",
    "propagate_malliavin",
    "solve_path",
    "resolvent_for",
    "second_derivative",
]


class TruncationWarning(UserWarning):
    """A derivative order beyond the hierarchy depth was requested."""


def resolvent_for(model: ModelSpec) -> ResolventTable:
    return build_resolvent_table(model.kernel, model.time_grid, model.n_modes)


@dataclass
class MalliavinGrid:
    """First derivatives ``d1[a, l] = D_l x_a`` plus contracted second derivatives.

    ``dya[q, l] = D_l (sum_j M[q, j] D_j x_{q-p})`` and ``dyb`` likewise with
    row ``q - 1``.  ``bias_flags`` names every place where a term that needs
    data beyond the hierarchy depth was dropped.
    """

    d1: np.ndarray = field(repr=False)
    dya: np.ndarray | None = field(default=None, repr=False)
    dyb: np.ndarray | None = field(default=None, repr=False)
    depth: int = 1
    bias_flags: list[str] = field(default_factory=list)

    def entry(self, t_index: int, cell: int) -> np.ndarray:
        return self.d1[t_index, cell]


@dataclass
class PathSolution:
    """Coefficient trajectory on ``[-r, T]``; ``values[a + p]`` is ``x(t_a)``."""

    model: ModelSpec
    values: np.ndarray = field(repr=False)
    block_of: np.ndarray = field(repr=False)
    seed: int

    @property
    def steps_per_delay(self) -> int:
        return self.model.steps_per_delay

    @property
    def times(self) -> np.ndarray:
        p = self.steps_per_delay
        return (np.arange(self.values.shape[0]) - p) * self.model.dt

    def at(self, t_index: int) -> np.ndarray:
        return self.values[t_index + self.steps_per_delay]

    @property
    def trajectory(self) -> np.ndarray:
        """Values on ``[0, T]``."""
        return self.values[self.steps_per_delay :]


@dataclass
class PathState:
    """Everything one path accumulates while the blocks are built."""

    model: ModelSpec
    table: ResolventTable
    fbm: FbmSample
    solution: PathSolution
    malliavin: MalliavinGrid
    nodes: dict = field(repr=False)
    blocks_done: int = 0
    d1_blocks_done: int = 0
    d2_blocks_done: int = 1
    skorohod_pathwise: np.ndarray | None = field(default=None, repr=False)
    skorohod_correction: np.ndarray | None = field(default=None, repr=False)

    @property
    def table_t(self) -> np.ndarray:
        if getattr(self, "_table_t", None) is None:
            self._table_t = np.ascontiguousarray(self.table.entries.T)
        return self._table_t

    @property
    def skorohod_terms(self) -> np.ndarray:
        """Per block ``b``: Skorohod integral over ``[(b-1) r, t_b]`` of
        ``R(t_b - s) sigma(x(s - r))`` with ``t_b`` the block end."""
        return self.skorohod_pathwise - self.skorohod_correction


def _block_range(model: ModelSpec, b: int) -> tuple[int, int]:
    """Time indices ``lo < a <= hi`` of block ``b`` (1-based)."""
    p, n = model.steps_per_delay, model.n_steps
    return (b - 1) * p, min(b * p, n)


def new_state(model: ModelSpec, fbm: FbmSample | None = None, seed: int | None = None,
              table: ResolventTable | None = None) -> PathState:
    seed = model.seed if seed is None else seed
    grid = model.time_grid
    if fbm is None:
        fbm = sample_fbm_cholesky(grid, model.hurst, seed)
    if fbm.grid != grid:
        raise ValueError("fBm sample grid differs from the model grid")
    table = resolvent_for(model) if table is None else table
    n, p, N = model.n_steps, model.steps_per_delay, model.n_modes
    P = model.n_points
    values = np.zeros((n + p + 1, N))
    hist_t = (np.arange(-p, 1)) * model.dt
    values[: p + 1] = model.phi(hist_t, N)
    block_of = np.zeros(n + p + 1, dtype=int)
    depth = model.derivative_depth
    d1 = np.zeros((n + 1, n, N))
    dya = np.zeros((n + 1, n, N)) if depth >= 2 else None
    dyb = np.zeros((n + 1, n, N)) if depth >= 2 else None
    nodes = {
        "zphys": np.zeros((n + 1, P)),
        "sig": np.zeros((4, n + 1, P)),
        "f": np.zeros((3, n + 1, P)),
        "g": np.zeros((3, n + 1, P)),
        "sigc": np.zeros((n + 1, N)),
        "fc": np.zeros((n + 1, N)),
        "gc": np.zeros((n + 1, N)),
        "ya": np.zeros((n + 1, N)),
        "yb": np.zeros((n + 1, N)),
        # stochastic halves split into pathwise and trace parts
        "rp": np.zeros((n + 1, N)),
        "rc": np.zeros((n + 1, N)),
        "lp": np.zeros((n + 1, N)),
        "lc": np.zeros((n + 1, N)),
        "right": np.zeros((n + 1, N)),
        "left": np.zeros((n + 1, N)),
        # H_q stored as (q, mode, cell) for the per-mode Toeplitz products
        "h_t": np.zeros((n + 1, N, n)),
        "end": np.zeros((n + 1, n, N)),
    }
    solution = PathSolution(model, values, block_of, int(seed))
    mall = MalliavinGrid(d1, dya, dyb, depth)
    m = model.blocks
    return PathState(
        model, table, fbm, solution, mall, nodes,
        skorohod_pathwise=np.zeros((m, N)), skorohod_correction=np.zeros((m, N)),
    )


def _node_range(model: ModelSpec, b: int) -> range:
    lo, hi = _block_range(model, b)
    return range(0 if b == 1 else lo + 1, hi + 1)


def _prepare_nodes(state: PathState, b: int) -> None:
    """Coefficient data for the nodes of block ``b`` (delayed argument in block b-1)."""
    model = state.model
    nd = state.nodes
    S, A = transform_matrices(model.n_modes, model.space_grid)
    p, n, dt = model.steps_per_delay, model.n_steps, model.dt
    qs = np.array(_node_range(model, b))
    z = state.solution.values[qs]  # x_{q-p} lives at index q
    zphys = z @ S
    nd["zphys"][qs] = zphys
    for k in range(4):
        nd["sig"][k, qs] = model.sigma(zphys, k)
    for k in range(3):
        nd["f"][k, qs] = model.f(zphys, k)
        nd["g"][k, qs] = model.g(zphys, k)
    nd["sigc"][qs] = nd["sig"][0, qs] @ A
    nd["fc"][qs] = nd["f"][0, qs] @ A
    nd["gc"][qs] = nd["g"][0, qs] @ A
    mat = cell_covariance(model.time_grid, model.hurst)
    d1 = state.malliavin.d1
    zi = qs - p
    live = zi >= 1
    if np.any(live):
        ql, zl = qs[live], zi[live]
        dz = d1[zl]
        ia = ql <= n - 1
        if np.any(ia):
            nd["ya"][ql[ia]] = np.einsum("ql,qln->qn", mat[ql[ia]], dz[ia])
        nd["yb"][ql] = np.einsum("ql,qln->qn", mat[ql - 1], dz)
    xi = state.fbm.increments
    sig1 = nd["sig"][1, qs]
    has_right = qs <= n - 1
    has_left = qs >= 1
    xr = np.where(has_right, xi[np.minimum(qs, n - 1)], 0.0)
    xl = np.where(has_left, xi[np.maximum(qs - 1, 0)], 0.0)
    sigc = nd["sigc"][qs]
    nd["rp"][qs] = 0.5 * xr[:, None] * sigc
    nd["lp"][qs] = 0.5 * xl[:, None] * sigc
    nd["rc"][qs] = 0.5 * ((sig1 * (nd["ya"][qs] @ S)) @ A)
    nd["lc"][qs] = 0.5 * ((sig1 * (nd["yb"][qs] @ S)) @ A)
    half_f = 0.5 * dt * nd["fc"][qs]
    nd["right"][qs] = np.where(has_right[:, None], half_f + nd["rp"][qs] - nd["rc"][qs], 0.0)
    nd["left"][qs] = np.where(has_left[:, None], half_f + nd["lp"][qs] - nd["lc"][qs], 0.0)


def solve_block(n_done: int, state: PathState) -> PathState:
    """Extend the solution from ``[-r, n_done r]`` to ``[-r, (n_done + 1) r]``.

    Values already stored are never touched.
    """
    model = state.model
    if n_done >= model.blocks:
        raise HorizonError(f"block {n_done + 1} lies beyond m={model.blocks}")
    if state.blocks_done != n_done:
        raise ConsistencyError(
            f"state holds {state.blocks_done} solved blocks, cannot build block {n_done + 1}"
        )
    b = n_done + 1
    if b >= 2 and state.d1_blocks_done < b - 1:
        raise ConsistencyError(f"first derivatives on block {b - 1} are missing")
    _prepare_nodes(state, b)
    nd = state.nodes
    p = model.steps_per_delay
    r = state.table.entries
    x = state.solution.values
    c0 = model.phi(np.array(0.0), model.n_modes) + nd["gc"][0]
    lo, hi = _block_range(model, b)
    right, left = nd["right"], nd["left"]
    for a in range(lo + 1, hi + 1):
        acc = r[a] * c0 - nd["gc"][a]
        acc = acc + np.einsum("qn,qn->n", r[a:0:-1], right[:a])
        acc = acc + np.einsum("qn,qn->n", r[a - 1 :: -1], left[1 : a + 1])
        if not np.all(np.isfinite(acc)):
            from .errors import NumericalError

            raise NumericalError(f"non-finite solution at t={a * model.dt:g}")
        x[a + p] = acc
        state.solution.block_of[a + p] = b
    # Skorohod term of this block's window, evaluated at the block end
    w = r[hi - np.arange(lo, hi + 1)]
    seg = slice(lo, hi + 1)
    rmask = np.arange(lo, hi + 1) < hi
    lmask = np.arange(lo, hi + 1) > lo
    state.skorohod_pathwise[b - 1] = (
        (w * nd["rp"][seg])[rmask].sum(0) + (w * nd["lp"][seg])[lmask].sum(0)
    )
    state.skorohod_correction[b - 1] = (
        (w * nd["rc"][seg])[rmask].sum(0) + (w * nd["lc"][seg])[lmask].sum(0)
    )
    state.blocks_done = b
    return state


def _rmul(x: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """``x @ mat`` over the last axis as a single 2-D product."""
    x = np.ascontiguousarray(x)
    return (x.reshape(-1, x.shape[-1]) @ mat).reshape(x.shape[:-1] + (mat.shape[1],))


@lru_cache(maxsize=8)
def _product_tensor(n_modes: int, n_points: int) -> np.ndarray:
    """``K[y] = outer(S[:, y], A[y, :])`` flattened to (P, N*N).

    For a physical multiplier ``c`` the coefficient map
    ``v -> ((v @ S) * c) @ A`` is the N x N matrix ``(c @ K).reshape(N, N)``.
    """
    S, A = _matrices(n_modes, n_points)
    ker = np.einsum("iy,yj->yij", S, A).reshape(n_points, n_modes * n_modes)
    ker.setflags(write=False)
    return ker


def _multiplier_matrices(mult: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Stack of N x N coefficient matrices for physical multipliers (..., P)."""
    N = model.n_modes
    ker = _product_tensor(N, model.n_points)
    lead = mult.shape[:-1]
    return (mult.reshape(-1, mult.shape[-1]) @ ker).reshape(lead + (N, N))


def _toeplitz_block(rt: np.ndarray, a0: int, a1: int, q0: int, q1: int) -> np.ndarray:
    """``T[n, i, j] = rt[n, a - q]`` for ``a = a0 + i``, ``q = q0 + j`` when ``a > q``, else 0."""
    n_modes = rt.shape[0]
    rows, cols = a1 - a0, q1 - q0
    lag_min = a0 - (q1 - 1)
    lags = np.arange(lag_min, a1 - 1 - q0 + 1)
    v = np.where(lags > 0, rt[:, np.clip(lags, 0, None)], 0.0)
    v = np.ascontiguousarray(v)
    step = v.strides[1]
    # entry (i, j) sits at lag offset (cols - 1) + i - j
    view = np.lib.stride_tricks.as_strided(
        v[:, cols - 1 :], shape=(n_modes, rows, cols), strides=(v.strides[0], step, -step)
    )
    return np.ascontiguousarray(view)


def _first_order(state: PathState, b: int) -> None:
    model = state.model
    nd = state.nodes
    p, n, dt = model.steps_per_delay, model.n_steps, model.dt
    r = state.table.entries
    mall = state.malliavin
    d1 = mall.d1
    xi = state.fbm.increments
    lo, hi = _block_range(model, b)
    qs = np.array([q for q in _node_range(model, b) if q - p >= 1])
    if qs.size:
        # node terms: H_q for interior use, End_q for the node as end point
        kmax = int((qs - p).max())
        S, _ = transform_matrices(model.n_modes, model.space_grid)
        sig1, sig2 = nd["sig"][1, qs], nd["sig"][2, qs]
        f1, g1 = nd["f"][1, qs], nd["g"][1, qs]
        ya_p, yb_p = nd["ya"][qs] @ S, nd["yb"][qs] @ S
        xr = xi[np.minimum(qs, n - 1)] * (qs <= n - 1)
        xl = xi[qs - 1]
        ra = 0.5 * dt * f1 + 0.5 * xr[:, None] * sig1 - 0.5 * sig2 * ya_p
        la = 0.5 * dt * f1 + 0.5 * xl[:, None] * sig1 - 0.5 * sig2 * yb_p
        ra = ra * (qs <= n - 1)[:, None]
        mats = _multiplier_matrices(np.stack([ra + la, la - g1]), model)
        dz = d1[qs[0] - p : qs[-1] - p + 1, :kmax]
        dz_t = dz.transpose(0, 2, 1)
        h = np.matmul(mats[0].transpose(0, 2, 1), dz_t)  # (Q, N, K)
        end = np.matmul(dz, mats[1])
        if mall.dya is not None and b >= 3:
            half_sig1 = _multiplier_matrices(0.5 * sig1, model)
            dyb = mall.dyb[qs, :kmax]
            h -= np.matmul(half_sig1.transpose(0, 2, 1), (mall.dya[qs, :kmax] + dyb).transpose(0, 2, 1))
            end -= np.matmul(dyb, half_sig1)
        nodes = slice(qs[0], qs[-1] + 1)
        nd["h_t"][nodes, :, :kmax] = h
        nd["end"][nodes, :kmax] = end
    if b >= 3 and mall.dya is None:
        mall.bias_flags.append(
            f"block {b}: first derivative omits second-order trace terms (depth 1)"
        )
    # D_l x_a = direct part + sum_{q<a} r(a - q) H_q + End_a
    blk = slice(lo + 1, hi + 1)
    sigc = nd["sigc"]
    for a in range(lo + 1, hi + 1):
        d1[a, :a] = 0.5 * (r[a:0:-1] * sigc[:a] + r[a - 1 :: -1] * sigc[1 : a + 1])
    kmax = max(hi - p, 0)
    if b >= 2 and kmax:
        toep = _toeplitz_block(state.table_t, lo + 1, hi + 1, p + 1, hi + 1)
        conv = np.matmul(toep, nd["h_t"][p + 1 : hi + 1, :, :kmax].transpose(1, 0, 2)).transpose(1, 2, 0)
        d1[blk, :kmax] += conv + nd["end"][blk, :kmax]
    state.d1_blocks_done = b


class _SecondOrder:
    """Directional second derivatives ``D_k D_m x_tau`` for ``tau`` in one block.

    For each direction ``m`` (a weight vector over cells) this differentiates
    ``D_m x_tau`` once more.  Terms that need second derivatives of earlier
    delayed arguments vanish when those arguments lie in the first block;
    beyond that they are dropped (``exact`` is then False).
    """

    def __init__(self, state: PathState, b: int, tau_max: int, fast: bool = False):
        model = state.model
        mall, nd = state.malliavin, state.nodes
        self.state, self.b = state, b
        self.exact = b <= 2
        S, _ = transform_matrices(model.n_modes, model.space_grid)
        p, dt, N = model.steps_per_delay, model.dt, model.n_modes
        self.S, self.p, self.N = S, p, N
        xi = state.fbm.increments
        zmax = tau_max - p
        # D_k x_z and node DY laid out (k, z, n) so a z-range flattens to one matrix
        self.d1_kz = np.ascontiguousarray(mall.d1[1 : zmax + 1, :zmax].transpose(1, 0, 2))
        self.dy_live = b >= 3 and mall.dya is not None
        if self.dy_live:
            nodes_z = slice(p + 1, p + zmax + 1)
            dya, dyb = mall.dya[nodes_z, :zmax], mall.dyb[nodes_z, :zmax]
            self.dys_kz = np.ascontiguousarray((dya + dyb).transpose(1, 0, 2))
            self.dyb_kz = np.ascontiguousarray(dyb.transpose(1, 0, 2))
        self.sig1, self.sig2 = nd["sig"][1], nd["sig"][2]
        sig3, f2, g2 = nd["sig"][3], nd["f"][2], nd["g"][2]
        ya_p, yb_p = nd["ya"] @ S, nd["yb"] @ S
        xr = np.append(xi, 0.0)
        xl = np.insert(xi, 0, 0.0)
        self.c_int = dt * f2 + 0.5 * (xr + xl)[:, None] * self.sig2 - 0.5 * sig3 * (ya_p + yb_p)
        self.c_end = 0.5 * dt * f2 + 0.5 * xl[:, None] * self.sig2 - 0.5 * sig3 * yb_p - g2
        self.sig1_mats = _multiplier_matrices(self.sig1[p + 1 : tau_max + 1], model)
        self.ker = _product_tensor(N, model.n_points)
        self.u_aug = None
        if fast:
            # u_aug[q, j] maps dmz_j to the matrix of S[j] * c_int_q; last row carries sigma'
            basis = S[None, :, :] * self.c_int[p + 1 : tau_max + 1, None, :]
            u_aug = np.empty((zmax, N + 1, N * N))
            u_aug[:, :N] = _rmul(basis, self.ker)
            u_aug[:, N] = self.sig1_mats.reshape(zmax, N * N)
            self.u_aug = u_aug

    def directional(self, tau: int, mdir: np.ndarray) -> np.ndarray:
        """``D_k D_m x_tau`` for every direction row of ``mdir``; shape (d, tau, N)."""
        state, p, N, S = self.state, self.p, self.N, self.S
        model, mall = state.model, state.malliavin
        r = state.table.entries
        d1 = mall.d1
        d = mdir.shape[0]
        if mdir.shape[1] <= tau:
            # the end node at the horizon has no right cell
            mdir = np.pad(mdir, ((0, 0), (0, tau + 1 - mdir.shape[1])))
        L = tau - p
        qs = np.arange(p + 1, tau + 1)
        Q = qs.size
        dmz = np.matmul(mdir[:, :L], d1[1 : L + 1, :L])  # (Q, d, N)
        m_avg = 0.5 * (mdir[:, qs] + mdir[:, qs - 1]).T  # (Q, d)
        end_mult = (dmz[-1] @ S) * self.c_end[tau] + 0.5 * mdir[:, tau - 1, None] * self.sig1[tau]
        if self.u_aug is not None:
            coef = np.empty((Q, d, N * N))
            if Q > 1:
                lhs = np.concatenate([dmz[:-1], m_avg[:-1, :, None]], axis=2)
                coef[:-1] = np.matmul(lhs, self.u_aug[: Q - 1])
            coef[-1] = end_mult @ self.ker
            coef = coef.reshape(Q, d, N, N)
        else:
            mult = (dmz @ S) * self.c_int[qs, None, :] + m_avg[:, :, None] * self.sig1[qs, None, :]
            mult[-1] = end_mult
            coef = _multiplier_matrices(mult, model)
        if self.dy_live:
            dmya = np.matmul(mdir[:, :L], mall.dya[qs, :L])
            dmyb = np.matmul(mdir[:, :L], mall.dyb[qs, :L])
            dmy = np.concatenate([(dmya + dmyb)[:-1], dmyb[-1:]], axis=0)
            coef -= 0.5 * _multiplier_matrices((dmy @ S) * self.sig2[qs, None, :], model)
        wts = r[tau - qs]  # (Q, N)
        coef *= wts[:, None, None, :]
        stacked = coef.transpose(0, 2, 1, 3).reshape(Q * N, d * N)
        out = np.zeros((d, tau, N))
        prod = self.d1_kz[:L, :Q].reshape(L, Q * N) @ stacked
        out[:, :L] = prod.reshape(L, d, N).transpose(1, 0, 2)
        if self.dy_live:
            bcoef = _multiplier_matrices(-0.5 * self.sig2[qs, None, :] * (dmz @ S), model)
            bcoef *= wts[:, None, None, :]
            if Q > 1:
                bst = bcoef[:-1].transpose(0, 2, 1, 3).reshape((Q - 1) * N, d * N)
                part = self.dys_kz[:L, : Q - 1].reshape(L, (Q - 1) * N) @ bst
                out[:, :L] += part.reshape(L, d, N).transpose(1, 0, 2)
            out[:, :L] += np.matmul(self.dyb_kz[:L, Q - 1], bcoef[-1])
        # the noise factor of each node contributes sigma'(z) D_m z at k = q, q - 1
        direct = np.matmul(dmz[:, :, None, :], self.sig1_mats[:Q, None])[:, :, 0].transpose(1, 0, 2)
        out[:, qs[:-1]] += 0.5 * wts[:-1] * direct[:, :-1]
        out[:, qs - 1] += 0.5 * wts * direct
        return out


def _second_order(state: PathState, b: int) -> None:
    """Contracted second derivatives for the nodes whose delayed argument is in block ``b``."""
    model = state.model
    mall = state.malliavin
    p, n = model.steps_per_delay, model.n_steps
    mat = cell_covariance(model.time_grid, model.hurst)
    lo, hi = _block_range(model, b)
    taus = [tau for tau in range(lo + 1, hi + 1) if tau + p <= n]
    if not taus or b < 2:
        return
    if b >= 3:
        mall.bias_flags.append(
            f"block {b}: second derivatives omit terms needing third-order data"
        )
    ctx = _SecondOrder(state, b, max(taus), fast=True)
    for tau in taus:
        q = tau + p
        rows = [mat[q - 1]]
        targets = [mall.dyb]
        if q <= n - 1:
            rows.insert(0, mat[q])
            targets.insert(0, mall.dya)
        out = ctx.directional(tau, np.array(rows))
        for i, target in enumerate(targets):
            target[q, :tau] = out[i]
    state.d2_blocks_done = b


def second_derivative(state: PathState, tau: int, cells) -> tuple[np.ndarray, bool]:
    """``D_k D_l x_tau`` for every cell ``k`` and the given cells ``l``.

    Returns the array (len(cells), tau, N) and whether it is exact (False
    when terms needing third-order data were dropped).
    """
    model = state.model
    p = model.steps_per_delay
    cells = np.atleast_1d(np.asarray(cells, dtype=int))
    if not 0 <= tau <= model.n_steps:
        raise IndexError(f"time index {tau} outside 0..{model.n_steps}")
    b = max(1, -(-tau // p))
    if state.d1_blocks_done < b:
        raise ConsistencyError(f"first derivatives on block {b} are missing")
    if tau <= p:
        return np.zeros((cells.size, max(tau, 0), model.n_modes)), True
    if b >= 3 and state.malliavin.dya is not None and state.d2_blocks_done < b - 1:
        raise ConsistencyError(f"second-order data on block {b - 1} are missing")
    mdir = np.zeros((cells.size, model.n_steps))
    mdir[np.arange(cells.size), cells] = 1.0
    ctx = _SecondOrder(state, b, tau)
    return ctx.directional(tau, mdir), ctx.exact


def propagate_malliavin(n_done: int, state: PathState, order: int) -> PathState:
    """Derivative data of the given order on block ``n_done + 1``.

    Order 1 fills ``D_l x_a``; order 2 fills the contracted second
    derivatives consumed by the next block's trace terms.
    """
    model = state.model
    b = n_done + 1
    if b > model.blocks:
        raise HorizonError(f"block {b} lies beyond m={model.blocks}")
    if order > model.derivative_depth:
        msg = (
            f"order {order} exceeds derivative depth {model.derivative_depth}; "
            "dependent trace terms are dropped"
        )
        warnings.warn(msg, TruncationWarning, stacklevel=2)
        state.malliavin.bias_flags.append(f"block {b}: {msg}")
        return state
    if state.blocks_done < b:
        raise ConsistencyError(f"solution on block {b} is missing")
    if order == 1:
        if b >= 3 and state.malliavin.dya is not None and state.d2_blocks_done < b - 1:
            raise ConsistencyError(f"second-order data on block {b - 1} are missing")
        _first_order(state, b)
    elif order == 2:
        if state.d1_blocks_done < b:
            raise ConsistencyError(f"first derivatives on block {b} are missing")
        _second_order(state, b)
    else:
        raise ValueError(f"unsupported derivative order {order}")
    return state


def solve_path(
    model: ModelSpec,
    seed: int | None = None,
    fbm: FbmSample | None = None,
    table: ResolventTable | None = None,
    through_block: int | None = None,
    final_derivatives: bool = True,
) -> PathState:
    """Method-of-steps construction for one noise path.

    ``through_block`` stops after that block (default: all of ``[0, T]``).
    With ``final_derivatives=False`` the derivatives of the last block, which
    no later block consumes, are skipped.
    """
    last = model.blocks if through_block is None else through_block
    if not 1 <= last <= model.blocks:
        raise HorizonError(f"through_block={last} outside 1..{model.blocks}")
    state = new_state(model, fbm=fbm, seed=seed, table=table)
    for k in range(last):
        solve_block(k, state)
        if final_derivatives or k + 1 < last:
            propagate_malliavin(k, state, 1)
        if model.derivative_depth >= 2 and k + 1 < model.blocks:
            if final_derivatives or k + 2 < last:
                propagate_malliavin(k, state, 2)
    return state
