"""Frequency-domain OFDM link simulation and per-link delay/phase extraction.

A link observes ``y[n] = sum_p sqrt(Es) alpha_p exp(-j 2 pi n df tau_p) + w[n]``
on centred subcarrier indices ``n``, with complex white noise of variance
``sigma_w^2`` per sample.  The carrier phase in cycles is encoded in the gain as
``alpha = rho exp(-j 2 pi theta)``.  Centring the indices decouples the delay
and phase estimates, so their errors reach the familiar delay and phase
variance formulas independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh, hankel
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .model import (
    GroundTruth,
    MeasurementSet,
    build_layout,
    carrier_phase_cycles,
    measurement_covariance,
    true_phase_offsets,
)
from .scenario import (
    DEFAULT_REFERENCE_WAVELENGTH_M,
    SPEED_OF_LIGHT,
    BandConfig,
    ConfigError,
    ScenarioConfig,
    compute_link_budget,
    delay_noise_std,
    phase_noise_std,
)
from .scenario import noise_psd_w_per_hz as default_noise_psd

from .seeding import as_rng, trial_rng

ZERO_PAD = 8
DETECTION_FACTOR = 6.0
NEWTON_STEPS = 3
SUBSPACE_GAP = 4.0


class DetectionError(RuntimeError):
    """The correlation peak does not clear the detection threshold."""


def subcarrier_indices(n: int) -> np.ndarray:
    return np.arange(n) - (n - 1) / 2.0


@dataclass(frozen=True)
class FreqDomainObservation:
    samples: np.ndarray
    band: BandConfig
    es: float
    noise_var: float

    @property
    def indices(self) -> np.ndarray:
        return subcarrier_indices(self.samples.size)

    @property
    def spacing(self) -> float:
        return self.band.subcarrier_spacing_hz


@dataclass(frozen=True)
class PathEstimate:
    delays: np.ndarray
    gains: np.ndarray
    fallback: bool = False

    @property
    def phase_cycles(self) -> np.ndarray:
        return np.mod(-np.angle(self.gains) / (2 * np.pi), 1.0)

    @property
    def los_index(self) -> int:
        return int(np.argmin(self.delays))

    @property
    def los_delay(self) -> float:
        return float(self.delays[self.los_index])

    @property
    def los_phase_cycles(self) -> float:
        return float(self.phase_cycles[self.los_index])


def steering(indices, spacing, delays):
    """Columns ``exp(-j 2 pi n df tau)`` for every delay."""
    return np.exp(-2j * np.pi * spacing * np.outer(indices, np.atleast_1d(delays)))


def synthesize_signal(band: BandConfig, paths: Sequence, noise_psd_w_per_hz: float,
                      seed=None, es: Optional[float] = None, noise=True) -> FreqDomainObservation:
    """Noisy frequency-domain samples of a sum of ``(delay_s, complex_gain)`` paths."""
    if len(paths) < 1:
        raise ConfigError("at least one path is required")
    es = band.energy_per_subcarrier if es is None else es
    n = subcarrier_indices(band.num_subcarriers)
    delays = np.array([p[0] for p in paths], dtype=float)
    gains = np.array([p[1] for p in paths], dtype=complex)
    y = np.sqrt(es) * steering(n, band.subcarrier_spacing_hz, delays) @ gains
    if noise:
        rng = as_rng(seed)
        w = rng.standard_normal((2, n.size)) * np.sqrt(noise_psd_w_per_hz / 2.0)
        y = y + w[0] + 1j * w[1]
    return FreqDomainObservation(samples=y, band=band, es=es, noise_var=noise_psd_w_per_hz)


def _correlate(obs, tau):
    """``g(tau) = sum y[n] exp(+j w_n tau)`` and its first two derivatives."""
    w = 2 * np.pi * obs.spacing * obs.indices
    e = obs.samples * np.exp(1j * w * tau)
    return e.sum(), (1j * w * e).sum(), (-(w**2) * e).sum()


def _matched_gain(obs, tau):
    return _correlate(obs, tau)[0] / (obs.samples.size * np.sqrt(obs.es))


def estimate_single_path(obs: FreqDomainObservation, detect=True) -> PathEstimate:
    """Periodogram peak, parabolic interpolation and Newton steps on ``|g(tau)|^2``."""
    N = obs.samples.size
    M = ZERO_PAD * N
    # ifft gives sum y[n] exp(+j 2 pi n k / M), i.e. the correlator on a delay grid of 1/(M df)
    spec = np.fft.ifft(obs.samples, M) * M
    k = np.arange(M)
    # undo the half-index shift of the centred indices
    spec = spec * np.exp(-1j * np.pi * k * (N - 1) / M)
    power = np.abs(spec) ** 2
    i = int(np.argmax(power))
    # magnitude test against the noise-only rms correlator output sqrt(N sigma^2)
    if detect and power[i] < DETECTION_FACTOR**2 * N * obs.noise_var:
        raise DetectionError("correlation peak below the detection threshold")
    a, b, c = power[(i - 1) % M], power[i], power[(i + 1) % M]
    den = a - 2 * b + c
    frac = 0.5 * (a - c) / den if den != 0 else 0.0
    step = 1.0 / (M * obs.spacing)
    period = 1.0 / obs.spacing
    tau = (i + frac) * step
    if tau >= period / 2:
        tau -= period
    for _ in range(NEWTON_STEPS):
        g, g1, g2 = _correlate(obs, tau)
        d1 = 2 * np.real(np.conj(g) * g1)
        d2 = 2 * np.real(np.abs(g1) ** 2 + np.conj(g) * g2)
        if d2 >= 0:
            break
        delta = -d1 / d2
        if abs(delta) > step:
            delta = np.sign(delta) * step
        tau += delta
        if abs(delta) < 1e-6 * step:
            break
    return PathEstimate(delays=np.array([tau]), gains=np.array([_matched_gain(obs, tau)]))


def _top_eigenpairs(R, k):
    """Largest ``k`` eigenpairs of a Hermitian matrix in descending order."""
    P = R.shape[0]
    try:
        # fixed start vector keeps the Lanczos iteration deterministic
        w, V = eigsh(R, k=k, which="LA", v0=np.ones(P, dtype=R.dtype))
    except ArpackNoConvergence:
        w, V = eigh(R, subset_by_index=[P - k, P - 1])
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def estimate_dual_path_esprit(obs: FreqDomainObservation, order: int = 2) -> PathEstimate:
    """Hankel ESPRIT for ``order`` paths, falling back to one path when the subspace collapses.

    One eigenvalue beyond the model order serves as the noise reference for the gap test.
    """
    y = obs.samples
    N = y.size
    if N < 8:
        raise ConfigError("ESPRIT needs at least 8 subcarriers")
    P = int(np.ceil(N / 2))
    Q = N - P + 1
    H = hankel(y[:P], y[P - 1:])
    R = H @ H.conj().T
    w, V = _top_eigenpairs(R, order + 1)
    noise_level = max(w[order], Q * obs.noise_var)
    if w[order - 1] < SUBSPACE_GAP * noise_level:
        est = estimate_single_path(obs)
        return PathEstimate(est.delays, est.gains, fallback=True)
    Us = V[:, :order]
    Phi = np.linalg.lstsq(Us[:-1], Us[1:], rcond=None)[0]
    roots = np.linalg.eigvals(Phi)
    period = 1.0 / obs.spacing
    tau = np.mod(-np.angle(roots) / (2 * np.pi * obs.spacing), period)
    tau = np.where(tau >= period / 2, tau - period, tau)
    tau = np.sort(tau)
    A = steering(obs.indices, obs.spacing, tau)
    gains = np.linalg.lstsq(A, y, rcond=None)[0] / np.sqrt(obs.es)
    return PathEstimate(delays=tau, gains=gains)


# ---------------------------------------------------------------------------
# Bridge to the measurement model


@dataclass(frozen=True)
class NlosSpec:
    """A second path ``excess_delay_s`` behind the LoS with relative power ``power_ratio_db``.

    ``phase_cycles=None`` draws the relative phase uniformly per link.
    """

    excess_delay_s: float
    power_ratio_db: float = -6.0
    phase_cycles: Optional[float] = None


@dataclass(frozen=True)
class SignalMeasurement:
    measurements: MeasurementSet
    estimates: list = field(repr=False)
    fallback_count: int = 0


def measure_links(cfg: ScenarioConfig, seed=None, nlos: Optional[NlosSpec] = None,
                  method: str = "single") -> SignalMeasurement:
    """Simulate every assigned link at signal level and extract effective distances.

    ``method`` is ``"single"`` (periodogram + Newton) or ``"esprit"`` (two-path
    subspace estimate, LoS = earliest path).  Noise standard deviations attached
    to the measurements come from the link budget, not from the estimates.
    """
    if method not in ("single", "esprit"):
        raise ConfigError(f"unknown link estimator {method!r}")
    rng = as_rng(seed)
    layout = build_layout(cfg)
    lb = compute_link_budget(cfg)
    phi = true_phase_offsets(cfg, rng)
    bs_clock = cfg.bs_clock_std_s * rng.standard_normal(cfg.num_bs)
    theta = carrier_phase_cycles(cfg, bs_clock, phi)
    d = cfg.distances()[layout.pair_bs]
    tau = (d + SPEED_OF_LIGHT * (cfg.ue_clock_bias_s + bs_clock[layout.pair_bs])) / SPEED_OF_LIGHT
    power = cfg.pair_tx_power()
    L = layout.num_pairs
    y_tau = np.empty(L)
    y_theta = np.empty(L)
    ests = []
    fallbacks = 0
    for i, (m, k) in enumerate(zip(layout.pair_bs, layout.pair_band)):
        band = cfg.bands[k]
        es = power[m, k] / (band.num_subcarriers * band.subcarrier_spacing_hz)
        alpha = lb.channel_gain[m, k] * np.exp(-2j * np.pi * theta[i])
        paths = [(tau[i], alpha)]
        if nlos is not None:
            psi = rng.uniform() if nlos.phase_cycles is None else nlos.phase_cycles
            amp = 10 ** (nlos.power_ratio_db / 20)
            paths.append((tau[i] + nlos.excess_delay_s, alpha * amp * np.exp(2j * np.pi * psi)))
        obs = synthesize_signal(band, paths, cfg.noise_psd_w_per_hz, seed=rng, es=es)
        est = estimate_single_path(obs) if method == "single" else estimate_dual_path_esprit(obs)
        fallbacks += int(est.fallback)
        ests.append(est)
        y_tau[i] = SPEED_OF_LIGHT * est.los_delay
        y_theta[i] = band.wavelength_m * est.los_phase_cycles
    wl = layout.pair_wavelength
    z = np.rint(y_theta / wl - theta).astype(np.int64)
    s_tau = lb.sigma_tau_m[layout.pair_bs, layout.pair_band]
    s_theta = lb.sigma_theta_m[layout.pair_bs, layout.pair_band]
    truth = GroundTruth(
        z=z,
        clock_bias_s=cfg.ue_clock_bias_s,
        phase_offsets_cycles=phi,
        bs_clock_s=bs_clock,
        omega_tau=y_tau - SPEED_OF_LIGHT * tau,
        omega_theta=y_theta - wl * (theta + z),
        position=cfg.ue_position.copy(),
    )
    meas = MeasurementSet(
        y_tau=y_tau,
        y_theta=y_theta,
        sigma_tau=s_tau,
        sigma_theta=s_theta,
        pair_bs=layout.pair_bs,
        pair_band=layout.pair_band,
        covariance=measurement_covariance(cfg, layout),
        truth=truth,
    )
    return SignalMeasurement(meas, ests, fallbacks)


@dataclass(frozen=True)
class LinkTrials:
    """Per-trial LoS errors of one link and the matching variance floors."""

    delay_err_s: np.ndarray
    phase_err_cycles: np.ndarray
    snr: float
    delay_std_s: float
    phase_std_cycles: float
    fallback_count: int = 0

    @property
    def delay_variance_ratio(self) -> float:
        return float(np.mean(self.delay_err_s**2) / self.delay_std_s**2)

    @property
    def phase_variance_ratio(self) -> float:
        return float(np.mean(self.phase_err_cycles**2) / self.phase_std_cycles**2)


def link_trials(band: BandConfig, distance_m: float, trials: int, seed: int = 0,
                noise_psd_w_per_hz: Optional[float] = None,
                nlos: Sequence[NlosSpec] = (), method: str = "single",
                reference_wavelength_m: float = DEFAULT_REFERENCE_WAVELENGTH_M) -> LinkTrials:
    """Repeat one link's synthesis and extraction with a fresh LoS phase per trial.

    Trial ``t`` draws from ``trial_rng(seed, t)``.  Phase errors are wrapped to
    [-0.5, 0.5) cycles.
    """
    if method not in ("single", "esprit"):
        raise ConfigError(f"unknown link estimator {method!r}")
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if not distance_m > 0:
        raise ConfigError("link distance must be positive")
    if noise_psd_w_per_hz is None:
        noise_psd_w_per_hz = float(default_noise_psd())
    rho = reference_wavelength_m / (4 * np.pi * distance_m)
    es = band.energy_per_subcarrier
    snr = band.num_subcarriers * es * rho**2 / noise_psd_w_per_hz
    tau = distance_m / SPEED_OF_LIGHT
    d_err = np.empty(trials)
    p_err = np.empty(trials)
    fallbacks = 0
    for t in range(trials):
        rng = trial_rng(seed, t)
        theta = rng.uniform()
        alpha = rho * np.exp(-2j * np.pi * theta)
        paths = [(tau, alpha)]
        for nl in nlos:
            psi = rng.uniform() if nl.phase_cycles is None else nl.phase_cycles
            paths.append((tau + nl.excess_delay_s, alpha * 10 ** (nl.power_ratio_db / 20) * np.exp(2j * np.pi * psi)))
        obs = synthesize_signal(band, paths, noise_psd_w_per_hz, seed=rng, es=es)
        est = estimate_single_path(obs) if method == "single" else estimate_dual_path_esprit(obs)
        fallbacks += int(est.fallback)
        d_err[t] = est.los_delay - tau
        p_err[t] = np.mod(est.los_phase_cycles - theta + 0.5, 1.0) - 0.5
    return LinkTrials(
        delay_err_s=d_err,
        phase_err_cycles=p_err,
        snr=float(snr),
        delay_std_s=float(delay_noise_std(snr, band.bandwidth_hz)) / SPEED_OF_LIGHT,
        phase_std_cycles=float(phase_noise_std(snr, band.wavelength_m)) / band.wavelength_m,
        fallback_count=fallbacks,
    )


__all__ = [
    "LinkTrials",
    "DetectionError",
    "FreqDomainObservation",
    "NlosSpec",
    "PathEstimate",
    "SignalMeasurement",
    "estimate_dual_path_esprit",
    "estimate_single_path",
    "link_trials",
    "measure_links",
    "steering",
    "subcarrier_indices",
    "synthesize_signal",
]
