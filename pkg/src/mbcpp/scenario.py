"""Deployment description and per-link noise budget.

A scenario fixes the UE and BS geometry, the band plan, which BS transmits on
which band, transmit powers and the receiver noise level.  Everything that is
random per realization (measurement noise, BS clock errors) lives in
:mod:`mbcpp.model`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

BAND_DEPENDENT = "band_dependent"
BAND_INDEPENDENT = "band_independent"
PHASE_OFFSET_MODES = (BAND_DEPENDENT, BAND_INDEPENDENT)

# Thermal noise and receiver noise figure used by the default deployment.
THERMAL_NOISE_DBM_HZ = -174.0
DEFAULT_NOISE_FIGURE_DB = 13.0
DEFAULT_SUBCARRIER_SPACING_HZ = 30e3
DEFAULT_NUM_SUBCARRIERS = 612
DEFAULT_TX_POWER_DBM = 0.0
DEFAULT_UE_CLOCK_BIAS_S = 100e-9
DEFAULT_REFERENCE_WAVELENGTH_M = 0.03
DEFAULT_BS_STD_M = 100.0


class ConfigError(ValueError):
    """Invalid or inconsistent scenario parameters."""


class GeometryError(ValueError):
    """Geometry that makes the measurement model undefined."""


def dbm_to_w(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def w_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def noise_psd_w_per_hz(noise_psd_dbm_hz=THERMAL_NOISE_DBM_HZ, noise_figure_db=DEFAULT_NOISE_FIGURE_DB):
    """Effective noise PSD in W/Hz with the receiver noise figure folded in."""
    return float(dbm_to_w(noise_psd_dbm_hz + noise_figure_db))


@dataclass(frozen=True)
class BandConfig:
    carrier_frequency_hz: float
    subcarrier_spacing_hz: float = DEFAULT_SUBCARRIER_SPACING_HZ
    num_subcarriers: int = DEFAULT_NUM_SUBCARRIERS
    tx_power_w: float = float(dbm_to_w(DEFAULT_TX_POWER_DBM))

    def __post_init__(self):
        if not (np.isfinite(self.carrier_frequency_hz) and self.carrier_frequency_hz > 0):
            raise ConfigError(f"carrier frequency must be positive, got {self.carrier_frequency_hz}")
        if not self.subcarrier_spacing_hz > 0:
            raise ConfigError("subcarrier spacing must be positive")
        if int(self.num_subcarriers) != self.num_subcarriers or self.num_subcarriers < 1:
            raise ConfigError("number of subcarriers must be a positive integer")
        if not self.tx_power_w > 0:
            raise ConfigError("transmit power must be positive")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def bandwidth_hz(self) -> float:
        return self.num_subcarriers * self.subcarrier_spacing_hz

    @property
    def energy_per_subcarrier(self) -> float:
        return self.tx_power_w / (self.num_subcarriers * self.subcarrier_spacing_hz)

    def with_bandwidth(self, bandwidth_hz: float) -> "BandConfig":
        """Same band with the subcarrier count chosen to approximate ``bandwidth_hz``."""
        n = max(1, int(round(bandwidth_hz / self.subcarrier_spacing_hz)))
        return dataclasses.replace(self, num_subcarriers=n)


def default_band(carrier_frequency_hz, **kwargs) -> BandConfig:
    return BandConfig(carrier_frequency_hz=float(carrier_frequency_hz), **kwargs)


@dataclass(frozen=True)
class ScenarioConfig:
    """Static description of one deployment.

    ``assignment[m, k]`` is true when BS ``m`` transmits on band ``k``.  When
    ``bs_sum_power_w`` is given it overrides the per-band powers: each BS splits
    that budget equally over the bands it is assigned to.
    ``ue_phase_offsets_cycles`` may be ``None``, in which case a fresh offset is
    drawn uniformly on [0, 1) for every measurement realization.
    """

    ue_position: np.ndarray
    bs_positions: np.ndarray
    bands: tuple
    assignment: Optional[np.ndarray] = None
    noise_psd_w_per_hz: float = noise_psd_w_per_hz()
    ue_clock_bias_s: float = DEFAULT_UE_CLOCK_BIAS_S
    ue_phase_offsets_cycles: Optional[np.ndarray] = None
    bs_clock_std_s: Optional[np.ndarray] = None
    reference_wavelength_m: float = DEFAULT_REFERENCE_WAVELENGTH_M
    phase_offset_mode: str = BAND_DEPENDENT
    bs_sum_power_w: Optional[float] = None
    scenario_id: str = "scenario"

    def __post_init__(self):
        ue = np.atleast_1d(np.asarray(self.ue_position, dtype=float))
        bs = np.atleast_2d(np.asarray(self.bs_positions, dtype=float))
        if bs.shape[1] != ue.size:
            raise ConfigError(f"BS positions have dimension {bs.shape[1]}, UE has {ue.size}")
        if ue.size not in (1, 2, 3):
            raise ConfigError("position dimension must be 1, 2 or 3")
        bands = tuple(self.bands)
        if not bands:
            raise ConfigError("at least one band is required")
        M, K = bs.shape[0], len(bands)
        if self.assignment is None:
            assignment = np.ones((M, K), dtype=bool)
        else:
            assignment = np.asarray(self.assignment, dtype=bool)
            if assignment.shape != (M, K):
                raise ConfigError(f"assignment must be {M}x{K}, got {assignment.shape}")
        if not assignment.any():
            raise ConfigError("assignment is empty")
        if self.phase_offset_mode not in PHASE_OFFSET_MODES:
            raise ConfigError(f"unknown phase offset mode {self.phase_offset_mode!r}")
        if not self.noise_psd_w_per_hz > 0:
            raise ConfigError("noise PSD must be positive")
        if not self.reference_wavelength_m > 0:
            raise ConfigError("reference wavelength must be positive")
        if self.bs_sum_power_w is not None and not self.bs_sum_power_w > 0:
            raise ConfigError("BS sum power must be positive")
        if self.bs_clock_std_s is None:
            clock = np.zeros(M)
        else:
            clock = np.broadcast_to(np.asarray(self.bs_clock_std_s, dtype=float), (M,)).copy()
        if np.any(clock < 0) or not np.all(np.isfinite(clock)):
            raise ConfigError("BS clock standard deviations must be finite and nonnegative")
        phase = self.ue_phase_offsets_cycles
        if phase is not None:
            phase = np.atleast_1d(np.asarray(phase, dtype=float))
            expected = 1 if self.phase_offset_mode == BAND_INDEPENDENT else K
            if phase.size == 1 and expected == K:
                phase = np.full(K, phase[0])
            if phase.size != expected:
                raise ConfigError(f"expected {expected} phase offsets, got {phase.size}")
        object.__setattr__(self, "ue_position", ue)
        object.__setattr__(self, "bs_positions", bs)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "bs_clock_std_s", clock)
        object.__setattr__(self, "ue_phase_offsets_cycles", phase)

    @property
    def num_dims(self) -> int:
        return self.ue_position.size

    @property
    def num_bs(self) -> int:
        return self.bs_positions.shape[0]

    @property
    def num_bands(self) -> int:
        return len(self.bands)

    @property
    def wavelengths(self) -> np.ndarray:
        return np.array([b.wavelength_m for b in self.bands])

    @property
    def band_independent(self) -> bool:
        return self.phase_offset_mode == BAND_INDEPENDENT

    def distances(self, position=None) -> np.ndarray:
        x = self.ue_position if position is None else np.asarray(position, dtype=float)
        return np.linalg.norm(self.bs_positions - x, axis=1)

    def pair_tx_power(self) -> np.ndarray:
        """Transmit power (W) of every (BS, band) combination, zero where unassigned."""
        if self.bs_sum_power_w is None:
            power = np.tile([b.tx_power_w for b in self.bands], (self.num_bs, 1))
        else:
            counts = self.assignment.sum(axis=1, keepdims=True)
            power = np.where(counts > 0, self.bs_sum_power_w / np.maximum(counts, 1), 0.0)
            power = np.broadcast_to(power, self.assignment.shape)
        return np.where(self.assignment, power, 0.0)

    def identifiability_issues(self) -> list:
        """Human-readable reasons why the position cannot be identified (empty if fine)."""
        issues = []
        active_bs = np.flatnonzero(self.assignment.any(axis=1))
        if active_bs.size < self.num_dims + 1:
            issues.append(
                f"only {active_bs.size} BSs carry measurements, need at least {self.num_dims + 1}"
            )
        if self.phase_offset_mode == BAND_DEPENDENT:
            counts = self.assignment.sum(axis=0)
            for k in np.flatnonzero(counts == 1):
                issues.append(
                    f"band {k} has a single BS; its ambiguity and phase offset cannot be separated"
                )
        return issues

    @property
    def is_identifiable(self) -> bool:
        return not self.identifiability_issues()

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "scenario_id": self.scenario_id,
            "ue_position": self.ue_position.tolist(),
            "bs_positions": self.bs_positions.tolist(),
            "bands": [dataclasses.asdict(b) for b in self.bands],
            "assignment": self.assignment.tolist(),
            "noise_psd_w_per_hz": self.noise_psd_w_per_hz,
            "ue_clock_bias_s": self.ue_clock_bias_s,
            "bs_clock_std_s": self.bs_clock_std_s.tolist(),
            "reference_wavelength_m": self.reference_wavelength_m,
            "phase_offset_mode": self.phase_offset_mode,
        }
        if self.ue_phase_offsets_cycles is not None:
            out["ue_phase_offsets_cycles"] = self.ue_phase_offsets_cycles.tolist()
        if self.bs_sum_power_w is not None:
            out["bs_sum_power_w"] = self.bs_sum_power_w
        return out


@dataclass(frozen=True)
class LinkBudget:
    """Per (BS, band) link quantities; arrays are M x K with NaN where unassigned."""

    channel_gain: np.ndarray
    snr: np.ndarray
    sigma_tau_m: np.ndarray
    sigma_theta_m: np.ndarray
    assignment: np.ndarray = field(repr=False)


def delay_noise_std(snr, bandwidth_hz):
    """Ranging noise std (m) of a delay estimate at SNR ``snr`` over ``bandwidth_hz``."""
    snr = np.asarray(snr, dtype=float)
    return np.sqrt(3.0 * SPEED_OF_LIGHT**2 / (2.0 * snr * np.pi**2 * np.asarray(bandwidth_hz) ** 2))


def phase_noise_std(snr, wavelength_m):
    """Carrier-phase noise std expressed as a distance (m)."""
    snr = np.asarray(snr, dtype=float)
    return np.sqrt(np.asarray(wavelength_m) ** 2 / (8.0 * snr * np.pi**2))


def compute_link_budget(cfg: ScenarioConfig) -> LinkBudget:
    d = cfg.distances()
    if np.any(d <= 0):
        raise GeometryError("a BS coincides with the UE position")
    rho = cfg.reference_wavelength_m / (4.0 * np.pi * d)
    power = cfg.pair_tx_power()
    dfs = np.array([b.subcarrier_spacing_hz for b in cfg.bands])
    nks = np.array([b.num_subcarriers for b in cfg.bands])
    es = power / (nks * dfs)
    snr = nks * es * rho[:, None] ** 2 / cfg.noise_psd_w_per_hz
    mask = cfg.assignment
    bw = nks * dfs
    with np.errstate(divide="ignore"):
        s_tau = np.where(mask, delay_noise_std(np.where(mask, snr, 1.0), bw), np.nan)
        s_theta = np.where(mask, phase_noise_std(np.where(mask, snr, 1.0), cfg.wavelengths), np.nan)
    rho_mk = np.where(mask, np.broadcast_to(rho[:, None], mask.shape), np.nan)
    return LinkBudget(
        channel_gain=rho_mk,
        snr=np.where(mask, snr, np.nan),
        sigma_tau_m=s_tau,
        sigma_theta_m=s_theta,
        assignment=mask,
    )


def sample_bs_positions(rng, num_bs, num_dims=2, std_m=DEFAULT_BS_STD_M, center=None):
    center = np.zeros(num_dims) if center is None else np.asarray(center, dtype=float)
    return center + std_m * rng.standard_normal((num_bs, num_dims))


def sample_default_scenario(
    seed: int,
    M: int = 6,
    carrier_frequencies_hz: Sequence[float] = (3.5e9,),
    num_dims: int = 2,
    **overrides,
) -> ScenarioConfig:
    """Default deployment: UE at the origin, ``M`` BSs drawn i.i.d. N(0, (100 m)^2 I).

    Band-dependent phase offsets are drawn uniformly on [0, 1) from the same
    generator so the whole scenario is a function of ``seed``.
    """
    rng = np.random.default_rng(seed)
    bs = sample_bs_positions(rng, M, num_dims)
    bands = tuple(default_band(f) for f in carrier_frequencies_hz)
    mode = overrides.get("phase_offset_mode", BAND_DEPENDENT)
    n_phase = 1 if mode == BAND_INDEPENDENT else len(bands)
    kwargs = dict(
        ue_position=np.zeros(num_dims),
        bs_positions=bs,
        bands=bands,
        ue_phase_offsets_cycles=rng.uniform(0.0, 1.0, n_phase),
        scenario_id=f"default-seed{seed}-M{M}",
    )
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


# ---------------------------------------------------------------------------
# JSON scenario files


def _band_from_dict(d: dict) -> BandConfig:
    d = dict(d)
    if "tx_power_dbm" in d:
        d["tx_power_w"] = float(dbm_to_w(d.pop("tx_power_dbm")))
    if "bandwidth_hz" in d:
        bw = d.pop("bandwidth_hz")
        df = d.get("subcarrier_spacing_hz", DEFAULT_SUBCARRIER_SPACING_HZ)
        d["num_subcarriers"] = max(1, int(round(bw / df)))
    if "carrier_frequency_ghz" in d:
        d["carrier_frequency_hz"] = float(d.pop("carrier_frequency_ghz")) * 1e9
    unknown = set(d) - {f.name for f in dataclasses.fields(BandConfig)}
    if unknown:
        raise ConfigError(f"unknown band fields: {sorted(unknown)}")
    try:
        return BandConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_SCENARIO_KEYS = {
    "scenario_id", "ue_position", "bs_positions", "bs_sampling", "bands", "band_defaults",
    "assignment", "noise_psd_w_per_hz", "noise_psd_dbm_hz", "noise_figure_db",
    "ue_clock_bias_s", "ue_phase_offsets_cycles", "bs_clock_std_s", "reference_wavelength_m",
    "phase_offset_mode", "bs_sum_power_w", "bs_sum_power_dbm", "comment", "description",
}


def scenario_from_dict(d: dict) -> ScenarioConfig:
    """Build a scenario from its JSON form (SI units, with dB convenience fields).

    ``bs_positions`` may be replaced by ``bs_sampling = {"seed", "count", "std_m"}``
    to draw the default Gaussian deployment.  ``band_defaults`` is merged into
    every entry of ``bands``.
    """
    unknown = set(d) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
    ue = np.asarray(d.get("ue_position", [0.0, 0.0]), dtype=float)
    if "bs_positions" in d:
        bs = np.asarray(d["bs_positions"], dtype=float)
    elif "bs_sampling" in d:
        s = d["bs_sampling"]
        rng = np.random.default_rng(int(s.get("seed", 0)))
        bs = sample_bs_positions(rng, int(s["count"]), ue.size, float(s.get("std_m", DEFAULT_BS_STD_M)), ue)
    else:
        raise ConfigError("scenario needs bs_positions or bs_sampling")
    defaults = d.get("band_defaults", {})
    if "bands" not in d:
        raise ConfigError("scenario needs a bands list")
    bands = tuple(_band_from_dict({**defaults, **b}) for b in d["bands"])

    if "noise_psd_w_per_hz" in d:
        psd = float(d["noise_psd_w_per_hz"])
    else:
        psd = noise_psd_w_per_hz(
            d.get("noise_psd_dbm_hz", THERMAL_NOISE_DBM_HZ),
            d.get("noise_figure_db", DEFAULT_NOISE_FIGURE_DB),
        )
    sum_power = d.get("bs_sum_power_w")
    if "bs_sum_power_dbm" in d:
        sum_power = float(dbm_to_w(d["bs_sum_power_dbm"]))
    phase = d.get("ue_phase_offsets_cycles")
    return ScenarioConfig(
        ue_position=ue,
        bs_positions=bs,
        bands=bands,
        assignment=None if d.get("assignment") is None else np.asarray(d["assignment"], dtype=bool),
        noise_psd_w_per_hz=psd,
        ue_clock_bias_s=float(d.get("ue_clock_bias_s", DEFAULT_UE_CLOCK_BIAS_S)),
        ue_phase_offsets_cycles=None if phase is None else np.asarray(phase, dtype=float),
        bs_clock_std_s=d.get("bs_clock_std_s"),
        reference_wavelength_m=float(d.get("reference_wavelength_m", DEFAULT_REFERENCE_WAVELENGTH_M)),
        phase_offset_mode=d.get("phase_offset_mode", BAND_DEPENDENT),
        bs_sum_power_w=None if sum_power is None else float(sum_power),
        scenario_id=str(d.get("scenario_id", "scenario")),
    )


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(data)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
