"""High-precision reference computations used as test oracles."""

import mpmath as mp
import numpy as np

from mbcpp.model import build_layout
from mbcpp.scenario import SPEED_OF_LIGHT

mp.mp.dps = 40


def _mat(a):
    return mp.matrix(np.asarray(a, dtype=float).tolist())


def _np(m):
    return np.array([[float(m[i, j]) for j in range(m.cols)] for i in range(m.rows)])


def fim(A, Sigma):
    """``A^T Sigma^-1 A`` at 40 digits."""
    A, S = _mat(A), _mat(Sigma)
    return A.T * mp.inverse(S) * A


def inverse(J):
    return _np(mp.inverse(J))


def relaxed_schur(mats):
    """Ambiguity block of the inverse relaxed information, via the dense Schur complement."""
    nd = mats.num_dims
    H = np.hstack([mats.A_f[:, : nd + 1], mats.B])
    J = fim(H, mats.Sigma_ch)
    p = nd + 1
    n = J.rows
    Jss = J[0:p, 0:p]
    Jsz = J[0:p, p:n]
    Jzz = J[p:n, p:n]
    return _np(mp.inverse(Jzz - Jsz.T * mp.inverse(Jss) * Jsz))


def known_peb(mats):
    cov = mp.inverse(fim(mats.A_f, mats.Sigma_ch))
    return float(mp.sqrt(sum(cov[i, i] for i in range(mats.num_dims))))


def delay_fim_finite_difference(cfg, h=(1e-3, 1e-12)):
    """Delay-only information from a central-difference Jacobian of the delay means."""
    lay = build_layout(cfg)
    nd = cfg.num_dims
    x0 = cfg.ue_position

    def delays(p):
        return np.linalg.norm(p[:nd] - lay.bs_positions[lay.pair_bs], axis=1) + SPEED_OF_LIGHT * p[nd]

    p0 = np.concatenate([x0, [cfg.ue_clock_bias_s]])
    F = np.empty((lay.num_pairs, nd + 1))
    for j in range(nd + 1):
        e = np.zeros(nd + 1)
        e[j] = h[0] if j < nd else h[1]
        F[:, j] = (delays(p0 + e) - delays(p0 - e)) / (2 * e[j])
    from mbcpp.model import measurement_covariance
    sig = measurement_covariance(cfg, lay, include_clock=False)[: lay.num_pairs, : lay.num_pairs]
    return F.T @ np.linalg.solve(sig, F)
