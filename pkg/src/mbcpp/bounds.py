"""Position error bounds: delay-only, relaxed-ambiguity, known-integer and mixed-integer.

Every Fisher information matrix here is over the state ``[x (m), B_ue (s),
phase offsets (cycles)]`` and is inverted with symmetric diagonal
equilibration, because the clock column carries a factor ``c`` that would
otherwise wreck the conditioning.  The closed-form expressions assume a
diagonal measurement covariance; with clock imperfections the covariance is
dense and the generic ``A^T Sigma^-1 A`` / Schur-complement routes are used.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from . import ils
from .model import ModelMatrices, build_matrices
from .scenario import SPEED_OF_LIGHT, ConfigError, ScenarioConfig
from .seeding import as_rng, trial_rng

DEFAULT_N_MC = 1000
PINV_RTOL = 1e-10


class RankError(np.linalg.LinAlgError):
    """A Fisher information matrix is singular; carries its condition estimate."""

    def __init__(self, message, condition=np.inf):
        super().__init__(f"{message} (condition number {condition:.3g})")
        self.condition = condition


def spd_inverse(J, what="FIM"):
    """Inverse of a symmetric positive definite matrix after diagonal equilibration."""
    J = 0.5 * (J + J.T)
    d = np.sqrt(np.abs(np.diag(J)))
    if np.any(d == 0) or not np.all(np.isfinite(J)):
        raise RankError(f"{what} has an empty row", np.inf)
    Js = J / d[:, None] / d[None, :]
    w = np.linalg.eigvalsh(Js)
    cond = w[-1] / w[0] if w[0] > 0 else np.inf
    if not cond < 1e13:
        raise RankError(f"{what} is singular", cond)
    c = cho_factor(Js, lower=True)
    inv = cho_solve(c, np.eye(J.shape[0]))
    inv = inv / d[:, None] / d[None, :]
    return 0.5 * (inv + inv.T)


def peb(cov, num_dims) -> float:
    return float(np.sqrt(np.trace(cov[:num_dims, :num_dims])))


def _is_diagonal(S) -> bool:
    return not np.any(S - np.diag(np.diag(S)))


@dataclass(frozen=True)
class FimResult:
    fim: np.ndarray
    covariance: np.ndarray
    peb: float


# ---------------------------------------------------------------------------
# Delay-only


def delay_fim_explicit(U_tilde, sigma_tau_diag):
    """Delay-only information over ``[x, B_ue]`` for independent delay noise."""
    j = 1.0 / np.asarray(sigma_tau_diag, dtype=float) ** 2
    nd = U_tilde.shape[0]
    J = np.empty((nd + 1, nd + 1))
    J[:nd, :nd] = (U_tilde * j) @ U_tilde.T
    J[:nd, nd] = SPEED_OF_LIGHT * U_tilde @ j
    J[nd, :nd] = J[:nd, nd]
    J[nd, nd] = SPEED_OF_LIGHT**2 * j.sum()
    return J


def delay_fim_generic(mats: ModelMatrices):
    L = mats.layout.num_pairs
    nd = mats.num_dims
    A = mats.A_f[:L, : nd + 1]
    St = mats.Sigma_ch[:L, :L]
    return A.T @ cho_solve(cho_factor(St, lower=True), A)


def delay_only_fim(cfg: ScenarioConfig, x=None, include_clock=True, mats=None) -> FimResult:
    mats = build_matrices(cfg, x, include_clock) if mats is None else mats
    L = mats.layout.num_pairs
    St = mats.Sigma_ch[:L, :L]
    if _is_diagonal(St):
        J = delay_fim_explicit(mats.U_tilde, np.sqrt(np.diag(St)))
    else:
        J = delay_fim_generic(mats)
    cov = spd_inverse(J, "delay-only FIM")
    return FimResult(J, cov, peb(cov, mats.num_dims))


# ---------------------------------------------------------------------------
# Relaxed ambiguities


def relaxed_fim(mats: ModelMatrices):
    """Information over ``[x, B_ue, z_rlx]`` with the ambiguities treated as reals."""
    nd = mats.num_dims
    H = np.hstack([mats.A_f[:, : nd + 1], mats.B])
    return H.T @ cho_solve(cho_factor(mats.Sigma_ch, lower=True), H)


def relaxed_covariance_closed_form(mats: ModelMatrices, delay_cov=None):
    """``Lam^-1 S_theta Lam^-1 + Lam^-1 G J_delay^-1 G^T Lam^-1`` with ``G = [U^T, c 1]``.

    Valid for diagonal measurement covariance only.
    """
    L = mats.layout.num_pairs
    if not _is_diagonal(mats.Sigma_ch):
        raise ConfigError("closed-form relaxed bound requires a diagonal covariance")
    if delay_cov is None:
        Jd = delay_fim_explicit(mats.U_tilde, np.sqrt(np.diag(mats.Sigma_ch)[:L]))
        delay_cov = spd_inverse(Jd, "delay-only FIM")
    inv_lam = 1.0 / np.diag(mats.Lambda)
    G = np.hstack([mats.U_tilde.T, np.full((L, 1), SPEED_OF_LIGHT)])
    S_theta = np.diag(mats.Sigma_ch)[L:]
    out = np.diag(inv_lam**2 * S_theta) + (inv_lam[:, None] * (G @ delay_cov @ G.T)) * inv_lam[None, :]
    return 0.5 * (out + out.T)


def relaxed_covariance_schur(mats: ModelMatrices):
    """Ambiguity block of the inverse relaxed FIM, for any measurement covariance.

    Works in the reparametrization ``w = Lambda z + G s`` of the phase-row mean
    (``G`` is the delay Jacobian), where the information matrix is far better
    conditioned, and maps the resulting covariance back to ``z``.
    """
    L = mats.layout.num_pairs
    p = mats.num_dims + 1
    G = mats.A_f[:L, :p]
    H = np.zeros((2 * L, p + L))
    H[:L, :p] = G
    H[L:, p:] = np.eye(L)
    J = H.T @ cho_solve(cho_factor(mats.Sigma_ch, lower=True), H)
    C = spd_inverse(J, "relaxed FIM")
    M = np.hstack([-G, np.eye(L)]) / np.diag(mats.Lambda)[:, None]
    out = M @ C @ M.T
    return 0.5 * (out + out.T)


def relaxed_bound(cfg: ScenarioConfig, x=None, include_clock=True, mats=None):
    mats = build_matrices(cfg, x, include_clock) if mats is None else mats
    if _is_diagonal(mats.Sigma_ch):
        return relaxed_covariance_closed_form(mats)
    return relaxed_covariance_schur(mats)


# ---------------------------------------------------------------------------
# Known integers


def phase_spread_matrix(mats: ModelMatrices):
    """``num_phase x L`` matrix with the pair wavelength in its phase-offset row."""
    lay = mats.layout
    T = np.zeros((lay.num_phase, lay.num_pairs))
    T[lay.phase_column, np.arange(lay.num_pairs)] = np.diag(mats.Lambda)
    return T


def known_fim_explicit(mats: ModelMatrices):
    """Block form of the known-integer information for diagonal covariance."""
    L = mats.layout.num_pairs
    if not _is_diagonal(mats.Sigma_ch):
        raise ConfigError("explicit known-integer FIM requires a diagonal covariance")
    var = np.diag(mats.Sigma_ch)
    jt, jp = 1.0 / var[:L], 1.0 / var[L:]
    j = jt + jp
    U = mats.U_tilde
    T = phase_spread_matrix(mats)
    c = SPEED_OF_LIGHT
    nd = mats.num_dims
    n = nd + 1 + T.shape[0]
    J = np.empty((n, n))
    J[:nd, :nd] = (U * j) @ U.T
    J[:nd, nd] = c * U @ j
    J[:nd, nd + 1:] = (U * jp) @ T.T
    J[nd, nd] = c**2 * j.sum()
    J[nd, nd + 1:] = c * T @ jp
    J[nd + 1:, nd + 1:] = (T * jp) @ T.T
    iu = np.triu_indices(n, 1)
    J[iu[::-1]] = J[iu]
    return J


def known_fim_generic(mats: ModelMatrices):
    A = mats.A_f
    return A.T @ cho_solve(cho_factor(mats.Sigma_ch, lower=True), A)


def known_integer_fim(cfg: ScenarioConfig, x=None, include_clock=True, mats=None) -> FimResult:
    mats = build_matrices(cfg, x, include_clock) if mats is None else mats
    J = known_fim_explicit(mats) if _is_diagonal(mats.Sigma_ch) else known_fim_generic(mats)
    cov = spd_inverse(J, "known-integer FIM")
    return FimResult(J, cov, peb(cov, mats.num_dims))


# ---------------------------------------------------------------------------
# Mixed-integer bound


def inverse_sqrt(S):
    """Symmetric inverse square root; exact reciprocal for diagonal input."""
    if _is_diagonal(S):
        return np.diag(1.0 / np.sqrt(np.diag(S)))
    w, V = eigh(S)
    if w[0] <= 0:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return (V / np.sqrt(w)) @ V.T


def equilibrated_pinv(A, rtol=PINV_RTOL):
    """Pseudoinverse via SVD of the column-equilibrated matrix."""
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    U, s, Vt = np.linalg.svd(As, full_matrices=False)
    keep = s > rtol * s[0]
    P = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return P / scale[:, None]


def integer_bias_map(mats: ModelMatrices):
    """Matrix ``G`` with state bias ``b = -G delta_z`` for an integer error ``delta_z``."""
    W = inverse_sqrt(mats.Sigma_ch)
    return equilibrated_pinv(W @ mats.A_f) @ W @ (mats.B @ mats.E)


@dataclass(frozen=True)
class BoundReport:
    peb_delay: float
    peb_known: float
    peb_mi: float
    sigma_rlx: np.ndarray
    S: np.ndarray
    n_mc: int
    integer_error_rate: float
    sigma_known: np.ndarray
    sigma_mi: np.ndarray
    delta_z: np.ndarray = field(repr=False)
    scenario_id: str = ""

    @property
    def mean_abs_integer_error(self) -> float:
        return float(np.abs(self.delta_z).sum(axis=1).mean()) if self.delta_z.size else 0.0

    def as_row(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "peb_delay_m": self.peb_delay,
            "peb_known_m": self.peb_known,
            "peb_mi_m": self.peb_mi,
            "int_err_rate": self.integer_error_rate,
        }


def draw_integer_errors(S, n_mc, rng):
    """Integer errors ``delta_z = ILS(r)`` for ``r ~ N(0, S)``."""
    n = S.shape[0]
    if n == 0:
        return np.zeros((n_mc, 0), dtype=np.int64)
    C = np.linalg.cholesky(0.5 * (S + S.T))
    R = rng.standard_normal((n_mc, n)) @ C.T
    dz, _ = ils.solve_batch(R, S)
    return dz


def micrb(cfg: ScenarioConfig, x=None, n_mc: int = DEFAULT_N_MC, seed=0,
          include_clock=True, mats=None) -> BoundReport:
    """Monte-Carlo mixed-integer bound with the sensitivity of the bias neglected."""
    if n_mc < 1:
        raise ConfigError("n_mc must be at least 1")
    mats = build_matrices(cfg, x, include_clock) if mats is None else mats
    nd = mats.num_dims
    delay = delay_only_fim(cfg, mats=mats)
    known = known_integer_fim(cfg, mats=mats)
    if _is_diagonal(mats.Sigma_ch):
        s_rlx = relaxed_covariance_closed_form(mats, delay.covariance)
    else:
        s_rlx = relaxed_covariance_schur(mats)
    S = mats.D @ s_rlx @ mats.D.T
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        w = np.linalg.eigvalsh(S)
        raise np.linalg.LinAlgError(
            f"differenced ambiguity covariance is not positive definite (eigenvalues {w[0]:.3g}..{w[-1]:.3g})"
        ) from exc
    dz = draw_integer_errors(S, n_mc, as_rng(seed))
    wrong = np.any(dz != 0, axis=1)
    bias_cov = np.zeros_like(known.covariance)
    if wrong.any():
        b = dz[wrong] @ integer_bias_map(mats).T
        bias_cov = b.T @ b / n_mc
    sigma_mi = bias_cov + known.covariance
    return BoundReport(
        peb_delay=delay.peb,
        peb_known=known.peb,
        peb_mi=peb(sigma_mi, nd),
        sigma_rlx=s_rlx,
        S=S,
        n_mc=n_mc,
        integer_error_rate=float(wrong.mean()),
        sigma_known=known.covariance,
        sigma_mi=sigma_mi,
        delta_z=dz,
        scenario_id=cfg.scenario_id,
    )


# ---------------------------------------------------------------------------
# Single-band fusion baseline


def single_band_view(cfg: ScenarioConfig, k: int) -> ScenarioConfig:
    """Scenario restricted to band ``k`` with every link keeping its original power."""
    power = cfg.pair_tx_power()[:, k]
    if not np.allclose(power[cfg.assignment[:, k]], power[cfg.assignment[:, k]].max()):
        raise ConfigError("band fusion needs equal per-BS powers within a band")
    band = dataclasses.replace(cfg.bands[k], tx_power_w=float(power.max()))
    phase = cfg.ue_phase_offsets_cycles
    if phase is not None and not cfg.band_independent:
        phase = phase[[k]]
    return cfg.replace(
        bands=(band,),
        assignment=cfg.assignment[:, [k]],
        bs_sum_power_w=None,
        ue_phase_offsets_cycles=phase,
        scenario_id=f"{cfg.scenario_id}-band{k}",
    )


def _position_clock_information(J, nd):
    """Schur complement that removes the phase-offset parameters from ``J``."""
    p = nd + 1
    if J.shape[0] == p:
        return J
    Jpp = J[p:, p:]
    return J[:p, :p] - J[:p, p:] @ np.linalg.solve(Jpp, J[p:, :p])


@dataclass(frozen=True)
class FusionReport:
    peb_known: float
    peb_mi: Optional[float]
    per_band: tuple


def fused_single_band_peb(cfg: ScenarioConfig, x=None, include_clock=True,
                          n_mc: Optional[int] = None, seed=0) -> FusionReport:
    """Fuse independent single-band bounds by adding their effective information.

    The known-integer fusion is a proper bound.  With ``n_mc`` given, the
    per-band mixed-integer covariances are fused the same way (inverse,
    eliminate the band's phase offset, sum, invert); that curve is a comparison
    heuristic rather than a bound.
    """
    if not cfg.assignment.all():
        raise ConfigError("band fusion requires a uniform assignment")
    nd = cfg.num_dims
    J_known = np.zeros((nd + 1, nd + 1))
    J_mi = np.zeros((nd + 1, nd + 1))
    per_band = []
    for k in range(cfg.num_bands):
        sub = single_band_view(cfg, k)
        mats = build_matrices(sub, x, include_clock)
        known = known_integer_fim(sub, mats=mats)
        J_known += _position_clock_information(known.fim, nd)
        if n_mc is not None:
            rep = micrb(sub, n_mc=n_mc, seed=trial_rng(seed, k), mats=mats)
            J_mi += _position_clock_information(spd_inverse(rep.sigma_mi, "band MICRB"), nd)
            per_band.append(rep)
        else:
            per_band.append(known)
    peb_known = peb(spd_inverse(J_known, "fused FIM"), nd)
    peb_mi = peb(spd_inverse(J_mi, "fused MICRB information"), nd) if n_mc is not None else None
    return FusionReport(peb_known=peb_known, peb_mi=peb_mi, per_band=tuple(per_band))


__all__ = [
    "BoundReport",
    "FimResult",
    "FusionReport",
    "RankError",
    "delay_fim_explicit",
    "delay_only_fim",
    "fused_single_band_peb",
    "integer_bias_map",
    "known_fim_explicit",
    "known_fim_generic",
    "known_integer_fim",
    "micrb",
    "relaxed_bound",
    "relaxed_covariance_closed_form",
    "relaxed_covariance_schur",
    "spd_inverse",
]
