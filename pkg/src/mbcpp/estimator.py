"""Two-stage TDoA + carrier-phase position estimator.

Stage 1 fits the delay measurements alone in closed form.  Stage 2 linearizes
the joint delay/phase model around the current state, solves a weighted least
squares problem with the differenced ambiguities treated as reals, fixes them
with integer least squares, re-solves for the state and repeats.  An optional
multi-start search runs stage 2 from several perturbed starting points and
keeps the one with the lowest weighted residual.

Internally the clock bias is carried in meters (``b = c B_ue``) so that every
column of the design matrix has comparable scale; results are reported in
seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import ils
from .bounds import RankError, spd_inverse
from .model import IdentifiabilityError, Layout, MeasurementSet, build_layout
from .scenario import SPEED_OF_LIGHT, ConfigError, ScenarioConfig
from .seeding import as_rng

SEARCH_GAUSSIAN = "gaussian"
SEARCH_GRID = "deterministic_grid"
POLISH_THRESHOLD = 3.0
FALLBACK_BOX_M = 1000.0


@dataclass(frozen=True)
class EstimatorConfig:
    n_iter: int = 2
    n_search: int = 1
    search_scale: float = 1.0
    search_sampling: str = SEARCH_GAUSSIAN
    seed: int = 0
    step_tol_m: Optional[float] = None
    # widen the ILS covariance by the range curvature error of the stage-1 point
    curvature_margin: bool = True

    def __post_init__(self):
        if self.n_iter < 1 or self.n_search < 1:
            raise ConfigError("n_iter and n_search must be at least 1")
        if not (self.search_scale > 0 and np.isfinite(self.search_scale)):
            raise ConfigError("search_scale must be positive and finite")
        if self.search_sampling not in (SEARCH_GAUSSIAN, SEARCH_GRID):
            raise ConfigError(f"unknown search sampling {self.search_sampling!r}")


@dataclass(frozen=True)
class Stage1Result:
    x: np.ndarray
    clock_m: float
    residual_rms: float
    method: str
    delay_cov: Optional[np.ndarray] = None


@dataclass(frozen=True)
class EstimateResult:
    x_hat: np.ndarray
    clock_bias_hat: float
    phase_offset_hat: np.ndarray
    z_d_hat: np.ndarray
    ml_cost: float
    stage1_x: np.ndarray
    z_d_float: np.ndarray
    S_hat: np.ndarray
    x_history: np.ndarray
    cost_history: np.ndarray
    candidate_costs: np.ndarray = field(repr=False)
    best_candidate: int = 0
    stage1_method: str = "closed_form"

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.x_hat, [self.clock_bias_hat], self.phase_offset_hat])


# ---------------------------------------------------------------------------
# Stage 1


def _per_bs_ranges(meas: MeasurementSet, num_bs: int):
    """GLS combination of each BS's delay measurements into one pseudorange.

    Band measurements of one BS share the geometry and the clock terms, so the
    combined ranges and their covariance are a sufficient statistic for the
    delay-only problem.
    """
    L = meas.y_tau.size
    St = meas.covariance[:L, :L]
    active = np.unique(meas.pair_bs)
    C = (meas.pair_bs[:, None] == active[None, :]).astype(float)
    cf = cho_factor(St, lower=True)
    W = C.T @ cho_solve(cf, C)
    Q = np.linalg.inv(W)
    r = Q @ (C.T @ cho_solve(cf, meas.y_tau))
    return active, r, 0.5 * (Q + Q.T)


def _delay_cost(x, b, pos, r, Qinv):
    e = r - np.linalg.norm(pos - x, axis=1) - b
    return float(e @ Qinv @ e)


def _gauss_newton_delay(x, b, pos, r, Qinv, iters=10):
    for _ in range(iters):
        diff = x - pos
        d = np.linalg.norm(diff, axis=1)
        if np.any(d == 0):
            break
        A = np.hstack([diff / d[:, None], np.ones((d.size, 1))])
        e = r - d - b
        N = A.T @ Qinv @ A
        try:
            step = np.linalg.solve(N, A.T @ Qinv @ e)
        except np.linalg.LinAlgError:
            break
        x = x + step[:-1]
        b = b + step[-1]
        if np.linalg.norm(step[:-1]) < 1e-10:
            break
    return x, b


def _chan_tdoa(pos, r, Q):
    """Two-step closed-form TDoA solution with the first BS as reference."""
    nd = pos.shape[1]
    x0 = pos[0]
    d = r[1:] - r[0]
    T = np.hstack([-np.ones((d.size, 1)), np.eye(d.size)])
    Qd = T @ Q @ T.T
    G = np.hstack([2.0 * (pos[1:] - x0), 2.0 * d[:, None]])
    h = np.sum(pos[1:] ** 2, axis=1) - np.sum(x0**2) - d**2
    # shift the origin to the reference BS to keep the normal equations well scaled
    h = h - 2.0 * (pos[1:] - x0) @ x0
    Bm = np.eye(d.size)
    theta = None
    for _ in range(2):
        Psi = 4.0 * Bm @ Qd @ Bm
        Pinv = np.linalg.inv(Psi)
        N = G.T @ Pinv @ G
        theta = np.linalg.solve(N, G.T @ Pinv @ h)
        ri = np.linalg.norm(pos[1:] - (x0 + theta[:nd]), axis=1)
        Bm = np.diag(np.maximum(ri, 1e-3))
    cov = np.linalg.inv(G.T @ np.linalg.inv(4.0 * Bm @ Qd @ Bm) @ G)
    # fuse the constraint R0 = |x - x0| by Gauss-Newton on the step-1 estimate
    u = theta[:nd].copy()
    Cinv = np.linalg.inv(cov)
    for _ in range(5):
        nu = np.linalg.norm(u)
        if nu == 0:
            break
        g = np.concatenate([u, [nu]])
        Jg = np.vstack([np.eye(nd), u / nu])
        e = theta - g
        step = np.linalg.solve(Jg.T @ Cinv @ Jg, Jg.T @ Cinv @ e)
        u = u + step
        if np.linalg.norm(step) < 1e-12:
            break
    return x0 + u


def _grid_search(pos, r, Qinv, center, half_width=FALLBACK_BOX_M / 2, n=101):
    """Coarse-to-fine grid search of the delay cost with the clock profiled out."""
    nd = pos.shape[1]
    ones = np.ones(len(r))
    denom = ones @ Qinv @ ones
    best = np.asarray(center, dtype=float)
    hw = half_width
    for _ in range(4):
        axes = [best[i] + np.linspace(-hw, hw, n if nd <= 2 else 31) for i in range(nd)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, nd)
        d = np.linalg.norm(grid[:, None, :] - pos[None], axis=2)
        e = r[None] - d
        b = (e @ Qinv @ ones) / denom
        e = e - b[:, None]
        cost = np.einsum("ij,jk,ik->i", e, Qinv, e)
        best = grid[int(np.argmin(cost))]
        hw = 4.0 * hw / (axes[0].size - 1)
    return best


def stage1_tdoa(meas: MeasurementSet, cfg: ScenarioConfig) -> Stage1Result:
    """Delay-only initial position from TDoAs against the first measurement's BS."""
    active, r, Q = _per_bs_ranges(meas, cfg.num_bs)
    nd = cfg.num_dims
    if active.size < nd + 1:
        raise IdentifiabilityError(f"stage 1 needs {nd + 1} BSs with delay measurements, got {active.size}")
    # reference BS: the one carrying the first measurement (first band, first BS)
    ref = int(np.flatnonzero(active == meas.pair_bs[0])[0])
    order = np.r_[ref, np.delete(np.arange(active.size), ref)]
    pos = cfg.bs_positions[active[order]]
    r = r[order]
    Q = Q[np.ix_(order, order)]
    Qinv = np.linalg.inv(Q)
    method = "closed_form"
    x = None
    try:
        x = _chan_tdoa(pos, r, Q)
        if not np.all(np.isfinite(x)):
            x = None
    except np.linalg.LinAlgError:
        x = None
    if x is None:
        method = "grid"
        x = _grid_search(pos, r, Qinv, pos.mean(axis=0))
    ones = np.ones(r.size)
    b = float(ones @ Qinv @ (r - np.linalg.norm(pos - x, axis=1)) / (ones @ Qinv @ ones))
    dof = max(r.size - nd - 1, 1)
    rms = np.sqrt(_delay_cost(x, b, pos, r, Qinv) / dof)
    if rms > POLISH_THRESHOLD:
        xp, bp = _gauss_newton_delay(x, b, pos, r, Qinv)
        if np.all(np.isfinite(xp)) and _delay_cost(xp, bp, pos, r, Qinv) < _delay_cost(x, b, pos, r, Qinv):
            x, b = xp, bp
            method += "+gauss_newton"
        rms = np.sqrt(_delay_cost(x, b, pos, r, Qinv) / dof)
    return Stage1Result(x=np.asarray(x, dtype=float), clock_m=b, residual_rms=float(rms), method=method)


# ---------------------------------------------------------------------------
# Stage 2


class LinearizedModel:
    """Measurement-specific quantities shared by every stage-2 iteration and candidate."""

    def __init__(self, meas: MeasurementSet, layout: Layout):
        if not (np.array_equal(meas.pair_bs, layout.pair_bs) and np.array_equal(meas.pair_band, layout.pair_band)):
            raise ConfigError("measurement ordering does not match the scenario's assignment")
        self.layout = layout
        self.y = meas.y
        self.L = layout.num_pairs
        self.nd = layout.num_dims
        self.p = layout.num_state
        self.nz = layout.num_ambiguities
        chol = np.linalg.cholesky(meas.covariance)
        self.W = solve_triangular(chol, np.eye(2 * self.L), lower=True)
        self.wl = layout.pair_wavelength
        self.BE = layout.BE
        # 2L x num_bs indicator of the delay and phase rows belonging to each BS
        rows = np.zeros((self.L, layout.bs_positions.shape[0]))
        rows[np.arange(self.L), layout.pair_bs] = 1.0
        self.bs_rows = np.vstack([rows, rows])

    def mean(self, S):
        """Noise-free observations for a stack of internal states ``[x, b (m), phi]``."""
        nd, L = self.nd, self.L
        dist, _ = self.layout.geometry(S[:, :nd])
        common = dist + S[:, nd:nd + 1]
        phase = S[:, nd + 1:][:, self.layout.phase_column] * self.wl
        return np.concatenate([common, common + phase], axis=1)

    def jacobian(self, X):
        nd, L = self.nd, self.L
        _, unit = self.layout.geometry(X)
        N = X.shape[0]
        A = np.zeros((N, 2 * L, self.p))
        A[:, :L, :nd] = unit
        A[:, L:, :nd] = unit
        A[:, :, nd] = 1.0
        A[:, L + np.arange(L), nd + 1 + self.layout.phase_column] = self.wl
        return A

    def residual(self, S, Z):
        return self.y[None] - self.mean(S) - Z @ self.BE.T

    def ml_cost(self, S, Z):
        e = self.residual(S, Z) @ self.W.T
        return np.einsum("ij,ij->i", e, e)

    def describe_column(self, j) -> str:
        nd = self.nd
        if j < nd:
            return f"position coordinate {j}"
        if j == nd:
            return "clock bias"
        if j < self.p:
            band = self.layout.phase_bands[j - nd - 1]
            return "common phase offset" if band is None else f"phase offset of band {band}"
        pair = np.flatnonzero(self.layout.E[:, j - self.p])[0]
        return f"ambiguity of BS {self.layout.pair_bs[pair]} on band {self.layout.pair_band[pair]}"


def _whitened_qr(Hw, model: LinearizedModel):
    Q, R = np.linalg.qr(Hw)
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    scale = np.linalg.norm(Hw, axis=1)
    bad = diag < 1e-10 * np.maximum(scale, 1e-300)
    if np.any(bad):
        cols = sorted({int(j) for j in np.nonzero(bad)[1]})
        names = ", ".join(model.describe_column(j) for j in cols)
        raise IdentifiabilityError(f"stacked design matrix is rank deficient in: {names}")
    return Q, R


def curvature_range_variance(layout: Layout, X, P):
    """Per-BS variance of the second-order range error when linearizing at ``X``.

    A position error ``e ~ N(0, P)`` perturbs each range by about
    ``|(I - u u^T) e|^2 / (2 d)`` beyond the linear term.  The error is common
    to every band of a BS, so it leaves cross-band ambiguity combinations
    untouched and only loosens the geometry-constrained ones.  Returns an
    ``(N, num_bs)`` array for ``N`` linearization points.
    """
    X = np.atleast_2d(X)
    diff = X[:, None, :] - layout.bs_positions[None]
    d = np.linalg.norm(diff, axis=-1)
    u = diff / d[..., None]
    nd = X.shape[1]
    Pi = np.eye(nd) - u[..., :, None] * u[..., None, :]
    PiP = Pi @ P
    tr = np.trace(PiP, axis1=-2, axis2=-1)
    tr2 = np.einsum("nmij,nmji->nm", PiP, PiP)
    return (tr**2 + 2 * tr2) / (4 * d**2)


def _stage2_batch(model: LinearizedModel, S0, n_iter, known_z_d=None, step_tol=None, start_cov=None):
    """Run stage-2 iterations for a stack of internal starting states.

    ``start_cov`` is the position error covariance of the first starting point
    (the stage-1 estimate); when given, its first ILS step accounts for the range
    curvature error.  Perturbed starts keep the plain float covariance so the
    search still explores fixes the widened covariance would round away.
    """
    S = np.array(S0, dtype=float)
    N = S.shape[0]
    p, nz = model.p, model.nz
    yW = model.y @ model.W.T
    BEw = model.W @ model.BE
    x_hist = np.empty((n_iter, N, model.nd))
    c_hist = np.empty((n_iter, N))
    active = np.ones(N, dtype=bool)
    Z = np.zeros((N, nz))
    zf = np.zeros((N, nz))
    Sh = np.zeros((N, nz, nz))
    for it in range(n_iter):
        A = model.jacobian(S[:, : model.nd])
        Aw = model.W[None] @ A
        ytw = yW[None] - model.mean(S) @ model.W.T
        if nz and known_z_d is None:
            Hw = np.concatenate([Aw, np.broadcast_to(BEw, (N,) + BEw.shape)], axis=2)
            Q, R = _whitened_qr(Hw, model)
            coef = np.linalg.solve(R, np.einsum("nij,ni->nj", Q, ytw)[..., None])[..., 0]
            Rinv = np.linalg.inv(R)
            C = Rinv @ np.swapaxes(Rinv, 1, 2)
            zf = coef[:, p:]
            Sh = 0.5 * (C[:, p:, p:] + np.swapaxes(C[:, p:, p:], 1, 2))
            S_ils = Sh
            if it == 0 and start_cov is not None:
                v = curvature_range_variance(model.layout, S[:1, : model.nd], start_cov)[0]
                # float-solution gain applied to one unit of range error per BS (delay and phase rows)
                gain = (Rinv[0] @ Q[0].T)[p:] @ (model.W @ model.bs_rows)
                extra = (gain * v) @ gain.T
                S_ils = Sh.copy()
                S_ils[0] += 0.5 * (extra + extra.T)
            Zn, _, ok = ils.solve_many(zf, S_ils)
            if not ok.all():
                raise np.linalg.LinAlgError("ambiguity covariance lost positive definiteness")
            Z = Zn.astype(float)
        elif nz:
            Z = np.broadcast_to(np.asarray(known_z_d, dtype=float), (N, nz)).copy()
        yy = ytw - Z @ BEw.T
        Q, R = _whitened_qr(Aw, model)
        ds = np.linalg.solve(R, np.einsum("nij,ni->nj", Q, yy)[..., None])[..., 0]
        ds[~active] = 0.0
        S = S + ds
        x_hist[it] = S[:, : model.nd]
        c_hist[it] = model.ml_cost(S, Z)
        if step_tol is not None:
            active &= np.linalg.norm(ds[:, : model.nd], axis=1) > step_tol
            if not active.any():
                x_hist[it + 1:] = S[None, :, : model.nd]
                c_hist[it + 1:] = c_hist[it]
                break
    return S, Z, zf, Sh, x_hist, c_hist


def _to_internal(s, nd):
    s = np.array(s, dtype=float)
    s[..., nd] *= SPEED_OF_LIGHT
    return s


def _result(model, S, Z, zf, Sh, xh, ch, costs, best, stage1_x, method):
    nd = model.nd
    s = S[best]
    return EstimateResult(
        x_hat=s[:nd].copy(),
        clock_bias_hat=float(s[nd] / SPEED_OF_LIGHT),
        phase_offset_hat=s[nd + 1:].copy(),
        z_d_hat=Z[best].astype(np.int64),
        ml_cost=float(costs[best]),
        stage1_x=np.asarray(stage1_x, dtype=float),
        z_d_float=zf[best].copy(),
        S_hat=Sh[best].copy(),
        x_history=xh[:, best].copy(),
        cost_history=ch[:, best].copy(),
        candidate_costs=costs,
        best_candidate=int(best),
        stage1_method=method,
    )


def stage2_refine(meas: MeasurementSet, layout: Layout, s0, cfg: EstimatorConfig = EstimatorConfig(),
                  known_z_d=None, stage1_x=None) -> EstimateResult:
    """Iterated linearize / float WLS / ILS / fixed WLS starting from ``s0`` (clock in seconds)."""
    model = LinearizedModel(meas, layout)
    S0 = _to_internal(np.atleast_2d(s0), model.nd)
    S, Z, zf, Sh, xh, ch = _stage2_batch(model, S0, cfg.n_iter, known_z_d, cfg.step_tol_m)
    costs = model.ml_cost(S, Z)
    x1 = S0[0, : model.nd] if stage1_x is None else stage1_x
    return _result(model, S, Z, zf, Sh, xh, ch, costs, 0, x1, "given")


def delay_position_covariance(meas: MeasurementSet, layout: Layout, x):
    """Delay-only position covariance evaluated at ``x`` (for the search region)."""
    L = layout.num_pairs
    nd = layout.num_dims
    _, unit = layout.geometry(x)
    A = np.hstack([unit, np.ones((L, 1))])
    J = A.T @ cho_solve(cho_factor(meas.covariance[:L, :L], lower=True), A)
    return spd_inverse(J, "delay-only FIM")[:nd, :nd]


def _grid_offsets(n, nd):
    """``n`` deterministic offsets in the unit ball, nearest to the origin first."""
    per_axis = int(np.ceil((4 * n) ** (1.0 / nd))) | 1
    axis = np.linspace(-1.0, 1.0, per_axis)
    pts = np.stack(np.meshgrid(*([axis] * nd), indexing="ij"), axis=-1).reshape(-1, nd)
    r = np.linalg.norm(pts, axis=1)
    pts = pts[np.lexsort((pts[:, 0], r))]
    return 2.0 * pts[:n]


def search_candidates(meas, layout, stage1: Stage1Result, cfg: EstimatorConfig):
    """Starting positions: the stage-1 point plus ``n_search - 1`` perturbed copies."""
    nd = layout.num_dims
    x0 = stage1.x
    n = cfg.n_search - 1
    if n == 0:
        return x0[None]
    try:
        cov = cfg.search_scale * delay_position_covariance(meas, layout, x0)
        C = np.linalg.cholesky(cov)
    except (RankError, np.linalg.LinAlgError):
        C = cfg.search_scale * max(stage1.residual_rms, 1.0) * np.eye(nd)
    if cfg.search_sampling == SEARCH_GAUSSIAN:
        off = as_rng(cfg.seed).standard_normal((n, nd))
    else:
        off = _grid_offsets(n + 1, nd)[1:]
    return np.vstack([x0[None], x0[None] + off @ C.T])


def search_refine(meas: MeasurementSet, layout: Layout, stage1: Stage1Result,
                  cfg: EstimatorConfig = EstimatorConfig(), known_z_d=None) -> EstimateResult:
    """Run stage 2 from every candidate and keep the lowest weighted residual."""
    model = LinearizedModel(meas, layout)
    X = search_candidates(meas, layout, stage1, cfg)
    S0 = np.zeros((X.shape[0], model.p))
    S0[:, : model.nd] = X
    start_cov = None
    if cfg.curvature_margin:
        try:
            start_cov = delay_position_covariance(meas, layout, stage1.x)
        except (RankError, np.linalg.LinAlgError):
            start_cov = None
    S, Z, zf, Sh, xh, ch = _stage2_batch(model, S0, cfg.n_iter, known_z_d, cfg.step_tol_m, start_cov)
    costs = model.ml_cost(S, Z)
    best = int(np.argmin(np.where(np.isfinite(costs), costs, np.inf)))
    return _result(model, S, Z, zf, Sh, xh, ch, costs, best, stage1.x, stage1.method)


def estimate(meas: MeasurementSet, scenario: ScenarioConfig, cfg: EstimatorConfig = EstimatorConfig(),
             known_z_d=None) -> EstimateResult:
    """Full pipeline; the phase-offset model follows ``scenario.phase_offset_mode``.

    ``known_z_d`` substitutes given differenced integers for the ILS step.
    """
    layout = build_layout(scenario)
    s1 = stage1_tdoa(meas, scenario)
    return search_refine(meas, layout, s1, cfg, known_z_d)


__all__ = [
    "EstimateResult",
    "EstimatorConfig",
    "LinearizedModel",
    "Stage1Result",
    "curvature_range_variance",
    "delay_position_covariance",
    "estimate",
    "search_candidates",
    "search_refine",
    "stage1_tdoa",
    "stage2_refine",
]
