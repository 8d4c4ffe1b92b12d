"""Stacked delay/phase measurement model.

Measurements are ordered band-major: all BSs of band 0 (in BS order), then all
BSs of band 1, and so on; unassigned (BS, band) pairs are skipped.  Every
matrix and vector in the package uses this ordering, and ``L`` denotes the
number of assigned pairs.  The stacked observation is ``y = [y_tau; y_theta]``
(length ``2L``), both in meters.

State vectors follow ``s = [x_ue (m), B_ue (s), phi_d (cycles)]`` where
``phi_d`` holds one combined phase offset per band in band-dependent mode and a
single one in band-independent mode.  The combined offset absorbs the integer
ambiguity of the band's reference pair (lowest-index assigned BS), leaving the
differenced integers ``z_d = D z`` as the only discrete unknowns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scenario import (
    SPEED_OF_LIGHT,
    ConfigError,
    GeometryError,
    ScenarioConfig,
    compute_link_budget,
)
from .seeding import as_rng


class IdentifiabilityError(ValueError):
    """The assignment pattern leaves some parameters unidentifiable."""


def measurement_pairs(assignment: np.ndarray):
    """Return ``(bs_index, band_index)`` arrays of assigned pairs in band-major order."""
    band_idx, bs_idx = np.nonzero(np.asarray(assignment, dtype=bool).T)
    return bs_idx, band_idx


@dataclass(frozen=True)
class Layout:
    """Index bookkeeping and constant structure matrices for one assignment."""

    bs_positions: np.ndarray
    pair_bs: np.ndarray
    pair_band: np.ndarray
    pair_wavelength: np.ndarray
    phase_column: np.ndarray
    phase_bands: tuple
    reference_pairs: np.ndarray
    band_independent: bool
    D: np.ndarray
    E: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.pair_bs.size

    @property
    def num_dims(self) -> int:
        return self.bs_positions.shape[1]

    @property
    def num_phase(self) -> int:
        return len(self.phase_bands)

    @property
    def num_state(self) -> int:
        return self.num_dims + 1 + self.num_phase

    @property
    def num_ambiguities(self) -> int:
        return self.D.shape[0]

    @property
    def Lambda(self) -> np.ndarray:
        return np.diag(self.pair_wavelength)

    @property
    def B(self) -> np.ndarray:
        L = self.num_pairs
        return np.vstack([np.zeros((L, L)), self.Lambda])

    @property
    def BE(self) -> np.ndarray:
        return self.B @ self.E

    def geometry(self, x):
        """Distances to the BSs of every pair and unit vectors pointing BS -> UE."""
        diff = np.asarray(x, dtype=float)[..., None, :] - self.bs_positions[self.pair_bs]
        dist = np.linalg.norm(diff, axis=-1)
        if np.any(dist <= 0):
            raise GeometryError("linearization point coincides with a BS")
        return dist, diff / dist[..., None]

    def u_tilde(self, x) -> np.ndarray:
        return self.geometry(x)[1].T

    def mean(self, s) -> np.ndarray:
        """Noise-free observation ``f(s)`` with zero ambiguities beyond the reference."""
        s = np.asarray(s, dtype=float)
        nd = self.num_dims
        dist, _ = self.geometry(s[:nd])
        common = dist + SPEED_OF_LIGHT * s[nd]
        phase = s[nd + 1 + self.phase_column] * self.pair_wavelength
        return np.concatenate([common, common + phase])

    def jacobian(self, x) -> np.ndarray:
        """Jacobian of :meth:`mean` with respect to the state (clock column in seconds)."""
        _, unit = self.geometry(x)
        L, nd = self.num_pairs, self.num_dims
        A = np.zeros((2 * L, self.num_state))
        A[:L, :nd] = unit
        A[L:, :nd] = unit
        A[:, nd] = SPEED_OF_LIGHT
        A[L + np.arange(L), nd + 1 + self.phase_column] = self.pair_wavelength
        return A

    def reduce_integers(self, z) -> np.ndarray:
        return self.D @ np.asarray(z)


def _differencing(groups, L):
    """Differencer/inserter pair for pair groups that share one phase offset.

    Within each group the first pair is the reference; ``D`` subtracts it from
    the others and ``E`` re-inserts a zero at the reference position.
    """
    rows = sum(len(g) - 1 for g in groups)
    D = np.zeros((rows, L))
    r = 0
    refs = []
    for g in groups:
        refs.append(g[0])
        for j in g[1:]:
            D[r, g[0]] = -1.0
            D[r, j] = 1.0
            r += 1
    E = np.zeros((L, rows))
    for i in range(rows):
        E[np.flatnonzero(D[i] > 0)[0], i] = 1.0
    return D, E, np.array(refs, dtype=int)


def build_layout(cfg: ScenarioConfig) -> Layout:
    bs_idx, band_idx = measurement_pairs(cfg.assignment)
    L = bs_idx.size
    wl = cfg.wavelengths[band_idx]
    if cfg.band_independent:
        groups = [np.arange(L)]
        phase_bands = (None,)
        phase_column = np.zeros(L, dtype=int)
    else:
        used = np.unique(band_idx)
        groups = [np.flatnonzero(band_idx == k) for k in used]
        short = [int(k) for k, g in zip(used, groups) if len(g) < 2]
        if short:
            raise IdentifiabilityError(
                f"bands {short} have fewer than two assigned BSs; use band_independent phase offsets"
            )
        phase_bands = tuple(int(k) for k in used)
        phase_column = np.searchsorted(used, band_idx)
    D, E, refs = _differencing(groups, L)
    return Layout(
        bs_positions=cfg.bs_positions,
        pair_bs=bs_idx,
        pair_band=band_idx,
        pair_wavelength=wl,
        phase_column=phase_column,
        phase_bands=phase_bands,
        reference_pairs=refs,
        band_independent=cfg.band_independent,
        D=D,
        E=E,
    )


def base_covariance(cfg: ScenarioConfig, layout: Optional[Layout] = None) -> np.ndarray:
    """``blkdiag(Sigma_tau, Sigma_theta)`` from the link budget, in pair order."""
    layout = build_layout(cfg) if layout is None else layout
    lb = compute_link_budget(cfg)
    st = lb.sigma_tau_m[layout.pair_bs, layout.pair_band]
    sp = lb.sigma_theta_m[layout.pair_bs, layout.pair_band]
    return np.diag(np.concatenate([st**2, sp**2]))


def clock_covariance(cfg: ScenarioConfig, pair_bs=None) -> np.ndarray:
    """``Sigma_im`` over assigned pairs: ``c^2 delta_m^2`` wherever both pairs share BS ``m``."""
    if pair_bs is None:
        pair_bs = measurement_pairs(cfg.assignment)[0]
    delta = np.asarray(cfg.bs_clock_std_s, dtype=float)
    if np.any(delta < 0):
        raise ConfigError("BS clock standard deviations must be nonnegative")
    same = pair_bs[:, None] == pair_bs[None, :]
    return np.where(same, SPEED_OF_LIGHT**2 * delta[pair_bs][:, None] ** 2, 0.0)


def clock_augmented_covariance(cfg: ScenarioConfig, base: np.ndarray) -> np.ndarray:
    """``Sigma_ch + 1_{2x2} (x) Sigma_im``: BS clock errors hit delay and phase alike."""
    im = clock_covariance(cfg)
    if base.shape != (2 * im.shape[0],) * 2:
        raise ConfigError("base covariance does not match the assignment")
    return base + np.kron(np.ones((2, 2)), im)


def measurement_covariance(cfg: ScenarioConfig, layout=None, include_clock=True) -> np.ndarray:
    base = base_covariance(cfg, layout)
    if include_clock and np.any(cfg.bs_clock_std_s > 0):
        return clock_augmented_covariance(cfg, base)
    return base


@dataclass(frozen=True)
class ModelMatrices:
    """All structure matrices of the linearized model at one state.

    ``A_f`` is the Jacobian of the real-valued part, ``B`` maps integer cycles
    to meters, ``D``/``E`` difference and re-insert ambiguities, ``U_tilde``
    holds one BS->UE unit vector per pair and ``Sigma_ch`` is the (possibly
    clock-augmented) measurement covariance.
    """

    A_f: np.ndarray
    B: np.ndarray
    Lambda: np.ndarray
    D: np.ndarray
    E: np.ndarray
    U_tilde: np.ndarray
    Sigma_ch: np.ndarray
    layout: Layout = field(repr=False)

    @property
    def band_independent(self) -> bool:
        return self.layout.band_independent

    @property
    def num_dims(self) -> int:
        return self.layout.num_dims


def build_matrices(cfg: ScenarioConfig, linearization_point=None, include_clock=True) -> ModelMatrices:
    """Build the model matrices at ``linearization_point`` (defaults to the true UE position).

    The Jacobian is first formed for the full BS x band grid and then pruned to
    the assigned pairs and to the phase-offset columns that remain in use, which
    is how nonuniform assignments are handled.
    """
    layout = build_layout(cfg)
    nd = cfg.num_dims
    x = cfg.ue_position if linearization_point is None else np.asarray(linearization_point)[:nd]

    full = build_layout(cfg.replace(assignment=np.ones_like(cfg.assignment)))
    keep = np.flatnonzero(cfg.assignment.T.ravel())
    rows = np.concatenate([keep, full.num_pairs + keep])
    cols = list(range(nd + 1))
    if cfg.band_independent:
        cols.append(nd + 1)
    else:
        cols += [nd + 1 + k for k in layout.phase_bands]
    A_f = full.jacobian(x)[np.ix_(rows, cols)]
    Lam = full.Lambda[np.ix_(keep, keep)]
    L = layout.num_pairs
    B = np.vstack([np.zeros((L, L)), Lam])
    return ModelMatrices(
        A_f=A_f,
        B=B,
        Lambda=Lam,
        D=layout.D,
        E=layout.E,
        U_tilde=layout.u_tilde(x),
        Sigma_ch=measurement_covariance(cfg, layout, include_clock),
        layout=layout,
    )


# ---------------------------------------------------------------------------
# Measurement synthesis


@dataclass(frozen=True)
class GroundTruth:
    z: np.ndarray
    clock_bias_s: float
    phase_offsets_cycles: np.ndarray
    bs_clock_s: np.ndarray
    omega_tau: np.ndarray
    omega_theta: np.ndarray
    position: np.ndarray


@dataclass(frozen=True)
class MeasurementSet:
    """One realization of the stacked effective-distance observations.

    ``covariance`` is the matrix the estimator should weight with; it includes
    the BS clock term whenever the scenario has nonzero clock spread.
    """

    y_tau: np.ndarray
    y_theta: np.ndarray
    sigma_tau: np.ndarray
    sigma_theta: np.ndarray
    pair_bs: np.ndarray
    pair_band: np.ndarray
    covariance: np.ndarray
    truth: Optional[GroundTruth] = None

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.y_tau, self.y_theta])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "k", "y_tau", "y_theta", "sigma_tau", "sigma_theta", "z_true"])
            z = self.truth.z if self.truth is not None else [""] * self.y_tau.size
            for row in zip(self.pair_bs, self.pair_band, self.y_tau, self.y_theta,
                           self.sigma_tau, self.sigma_theta, z):
                m, k, yt, yp, st, sp, zz = row
                w.writerow([int(m), int(k), repr(float(yt)), repr(float(yp)),
                            repr(float(st)), repr(float(sp)), zz if zz == "" else int(zz)])

    @classmethod
    def from_csv(cls, path) -> "MeasurementSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda name, t=float: np.array([t(r[name]) for r in rows])  # noqa: E731
        st, sp = col("sigma_tau"), col("sigma_theta")
        return cls(
            y_tau=col("y_tau"),
            y_theta=col("y_theta"),
            sigma_tau=st,
            sigma_theta=sp,
            pair_bs=col("m", int),
            pair_band=col("k", int),
            covariance=np.diag(np.concatenate([st**2, sp**2])),
        )


def true_phase_offsets(cfg: ScenarioConfig, rng) -> np.ndarray:
    if cfg.ue_phase_offsets_cycles is not None:
        return np.array(cfg.ue_phase_offsets_cycles, dtype=float)
    n = 1 if cfg.band_independent else cfg.num_bands
    return rng.uniform(0.0, 1.0, n)


def carrier_phase_cycles(cfg: ScenarioConfig, bs_clock_s=None, phase_offsets=None) -> np.ndarray:
    """Noise-free carrier phase (cycles) of every assigned pair, before wrapping."""
    bs_idx, band_idx = measurement_pairs(cfg.assignment)
    wl = cfg.wavelengths[band_idx]
    d = cfg.distances()[bs_idx]
    clock = cfg.ue_clock_bias_s + (0.0 if bs_clock_s is None else np.asarray(bs_clock_s)[bs_idx])
    phi = np.zeros(cfg.num_bands) if phase_offsets is None else np.asarray(phase_offsets)
    phi_pair = phi[np.zeros_like(band_idx)] if cfg.band_independent else phi[band_idx]
    return d / wl + SPEED_OF_LIGHT * clock / wl + phi_pair


def synthesize_measurements(cfg: ScenarioConfig, seed=None, noise=True) -> MeasurementSet:
    """Draw one realization of the stacked observations.

    Delay and phase noise are independent Gaussians with the link-budget
    standard deviations.  One clock error per BS is drawn from N(0, delta_m^2)
    and added, in meters, to every delay and phase measurement of that BS.
    ``noise=False`` zeroes all random terms (phase offsets are still drawn if
    the scenario leaves them unspecified).
    """
    rng = as_rng(seed)
    layout = build_layout(cfg)
    bs_idx, band_idx = layout.pair_bs, layout.pair_band
    L = bs_idx.size
    lb = compute_link_budget(cfg)
    s_tau = lb.sigma_tau_m[bs_idx, band_idx]
    s_theta = lb.sigma_theta_m[bs_idx, band_idx]
    phi = true_phase_offsets(cfg, rng)
    if noise:
        w_tau = s_tau * rng.standard_normal(L)
        w_theta = s_theta * rng.standard_normal(L)
        bs_clock = cfg.bs_clock_std_s * rng.standard_normal(cfg.num_bs)
    else:
        w_tau = np.zeros(L)
        w_theta = np.zeros(L)
        bs_clock = np.zeros(cfg.num_bs)
    wl = layout.pair_wavelength
    d = cfg.distances()[bs_idx]
    y_tau = d + SPEED_OF_LIGHT * (cfg.ue_clock_bias_s + bs_clock[bs_idx]) + w_tau
    t = carrier_phase_cycles(cfg, bs_clock, phi) + w_theta / wl
    z = -np.floor(t)
    y_theta = wl * (t + z)
    truth = GroundTruth(
        z=z.astype(np.int64),
        clock_bias_s=cfg.ue_clock_bias_s,
        phase_offsets_cycles=phi,
        bs_clock_s=bs_clock,
        omega_tau=w_tau,
        omega_theta=w_theta,
        position=cfg.ue_position.copy(),
    )
    return MeasurementSet(
        y_tau=y_tau,
        y_theta=y_theta,
        sigma_tau=s_tau,
        sigma_theta=s_theta,
        pair_bs=bs_idx,
        pair_band=band_idx,
        covariance=measurement_covariance(cfg, layout),
        truth=truth,
    )


def true_state(cfg: ScenarioConfig, truth: GroundTruth, layout: Optional[Layout] = None) -> np.ndarray:
    """State ``[x, B_ue, phi_d]`` consistent with the realized ambiguities."""
    layout = build_layout(cfg) if layout is None else layout
    phi = truth.phase_offsets_cycles
    phid = []
    for col, ref in enumerate(layout.reference_pairs):
        base = phi[0] if layout.band_independent else phi[layout.pair_band[ref]]
        phid.append(base + truth.z[ref])
    return np.concatenate([truth.position, [truth.clock_bias_s], phid])


__all__ = [
    "GroundTruth",
    "IdentifiabilityError",
    "Layout",
    "MeasurementSet",
    "ModelMatrices",
    "base_covariance",
    "build_layout",
    "build_matrices",
    "clock_augmented_covariance",
    "clock_covariance",
    "measurement_covariance",
    "measurement_pairs",
    "synthesize_measurements",
    "true_state",
]
