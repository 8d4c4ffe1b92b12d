"""Monte-Carlo sweep driver producing CSV tables of bounds and estimator RMSE.

A sweep point is a plain dictionary with four sections::

    {"scenario": {...scenario JSON...},
     "estimator": {"n_iter": 2, "n_search": 1, ...},
     "measurement": {"mode": "gaussian" | "signal", "method": "single" | "esprit",
                     "nlos": null | {"excess_delay_s": ..., "power_ratio_db": ...}},
     "bounds": {"n_mc": 1000}}

and a swept parameter is a dotted path into it, e.g.
``scenario.bands[1].carrier_frequency_hz`` or ``scenario.bands[*].bandwidth_hz``
(``*`` sets the field in every list entry).  A sweep holds one or more series,
each a set of path overrides applied to the base before the sweep value.

Seeding: trial ``t`` of a series draws from ``trial_rng(seed, 0, s, t)`` at
every sweep value, where ``s`` is derived from the series label.  Neighbouring
points therefore share noise realizations, so their differences are not swamped
by Monte-Carlo scatter, and running a subset of the series reproduces the same
numbers.  Bound draws use ``trial_rng(seed, 1, s)``.
"""

from __future__ import annotations

import copy
import dataclasses
import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bounds import fused_single_band_peb, micrb
from .estimator import EstimatorConfig, estimate
from .model import build_layout, synthesize_measurements
from .scenario import ConfigError, scenario_from_dict
from .seeding import trial_rng
from .signal import NlosSpec, measure_links

BOUND_METRICS = ("peb_delay", "peb_known", "peb_mi", "bound_int_err_rate")
FUSION_METRICS = ("peb_fused_known", "peb_fused_mi")
TRIAL_METRICS = ("rmse_stage1", "rmse_final", "rmse_known", "int_err_rate", "failure_rate")
ITER_METRIC = re.compile(r"rmse_iter(\d+)$")

STREAM_TRIAL, STREAM_BOUNDS, STREAM_SEARCH = 0, 1, 2


def rmse(estimates, truth) -> float:
    """Root mean squared position error over trials (rows of ``estimates``)."""
    e = np.atleast_2d(np.asarray(estimates, dtype=float)) - np.asarray(truth, dtype=float)
    if e.shape[0] == 0:
        raise ValueError("rmse needs at least one trial")
    return float(np.sqrt(np.mean(np.sum(e**2, axis=1))))


def rmse_with_stderr(sq_errors):
    """RMSE of squared errors (NaNs dropped) and its delta-method standard error."""
    sq = np.asarray(sq_errors, dtype=float)
    sq = sq[np.isfinite(sq)]
    if sq.size == 0:
        return np.nan, np.nan
    r = np.sqrt(sq.mean())
    if sq.size < 2 or r == 0:
        return float(r), 0.0
    se_ms = sq.std(ddof=1) / np.sqrt(sq.size)
    return float(r), float(se_ms / (2 * r))


def proportion_with_stderr(flags):
    f = np.asarray(flags, dtype=float)
    f = f[np.isfinite(f)]
    if f.size == 0:
        return np.nan, np.nan
    p = f.mean()
    return float(p), float(np.sqrt(p * (1 - p) / f.size))


# ---------------------------------------------------------------------------
# Parameter paths

_TOKEN = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:\[(\*|-?\d+)\])?$")


def set_path(d: dict, path: str, value) -> None:
    """Assign ``value`` at a dotted path, creating intermediate dicts as needed."""
    parts = path.split(".")
    targets = [d]
    for i, part in enumerate(parts):
        m = _TOKEN.match(part)
        if not m:
            raise ConfigError(f"bad parameter path segment {part!r} in {path!r}")
        key, idx = m.groups()
        last = i == len(parts) - 1
        nxt = []
        for t in targets:
            if not isinstance(t, dict):
                raise ConfigError(f"{path!r}: {key!r} is not inside a mapping")
            if idx is None:
                if last:
                    t[key] = copy.deepcopy(value)
                else:
                    if t.get(key) is None:
                        t[key] = {}
                    nxt.append(t[key])
                continue
            seq = t.get(key)
            if not isinstance(seq, list):
                raise ConfigError(f"{path!r}: {key!r} is not a list")
            items = range(len(seq)) if idx == "*" else [int(idx)]
            for j in items:
                if not -len(seq) <= j < len(seq):
                    raise ConfigError(f"{path!r}: index {j} out of range")
                if last:
                    seq[j] = copy.deepcopy(value)
                else:
                    nxt.append(seq[j])
        targets = nxt


def get_path(d: dict, path: str):
    cur = d
    for part in path.split("."):
        key, idx = _TOKEN.match(part).groups()
        cur = cur[key]
        if idx is not None:
            cur = cur[int(idx)]
    return cur


# ---------------------------------------------------------------------------
# Specification and results


@dataclass(frozen=True)
class Series:
    label: str
    overrides: dict = field(default_factory=dict)
    values: Optional[list] = None
    x: Optional[list] = None
    parameter: Optional[str] = None

    @property
    def stream(self) -> int:
        return int.from_bytes(hashlib.sha256(self.label.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class SweepSpec:
    name: str
    base: dict
    parameter: str
    values: list
    metrics: tuple
    trials: int = 200
    seed: int = 0
    series: tuple = (Series("default"),)
    x: Optional[list] = None
    figure: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.values:
            raise ConfigError("sweep value list is empty")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        known = set(BOUND_METRICS + FUSION_METRICS + TRIAL_METRICS)
        for m in self.metrics:
            if m not in known and not ITER_METRIC.match(m):
                raise ConfigError(f"unknown metric {m!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d)
        series = tuple(Series(**s) for s in d.pop("series", [{"label": "default"}]))
        d.pop("comment", None)
        try:
            return cls(series=series, metrics=tuple(d.pop("metrics")), **d)
        except TypeError as exc:
            raise ConfigError(f"bad sweep specification: {exc}") from exc

    def select(self, labels) -> "SweepSpec":
        """The same sweep restricted to the named series."""
        labels = list(labels)
        missing = set(labels) - {s.label for s in self.series}
        if missing:
            raise ConfigError(f"unknown series {sorted(missing)}")
        return dataclasses.replace(self, series=tuple(s for s in self.series if s.label in labels))

    def with_overrides(self, overrides: dict) -> "SweepSpec":
        """The same sweep with extra path overrides applied to the base point."""
        base = copy.deepcopy(self.base)
        for path, v in overrides.items():
            set_path(base, path, v)
        return dataclasses.replace(self, base=base)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "figure": self.figure, "description": self.description,
            "base": self.base, "parameter": self.parameter, "values": self.values, "x": self.x,
            "metrics": list(self.metrics), "trials": self.trials, "seed": self.seed,
            "series": [s.__dict__ for s in self.series],
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()


CSV_COLUMNS = ("series", "parameter", "x", "metric", "value", "stderr", "error")


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list

    def table(self, series: Optional[str] = None, metric: Optional[str] = None):
        """``(x, value, stderr)`` arrays for one series/metric."""
        sel = [r for r in self.rows
               if (series is None or r["series"] == series) and (metric is None or r["metric"] == metric)]
        return (np.array([r["x"] for r in sel], dtype=float),
                np.array([r["value"] for r in sel], dtype=float),
                np.array([r["stderr"] for r in sel], dtype=float))

    def value(self, series, metric, x):
        for r in self.rows:
            if r["series"] == series and r["metric"] == metric and np.isclose(r["x"], x):
                return r["value"]
        raise KeyError((series, metric, x))

    @property
    def provenance(self) -> dict:
        return {"name": self.spec.name, "figure": self.spec.figure, "config_sha256": self.spec.config_hash(),
                "seed": self.spec.seed, "trials": self.spec.trials, "version": f"mbcpp-{__version__}"}

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r["series"], r["parameter"], _fmt(r["x"]), r["metric"],
                            _fmt(r["value"]), _fmt(r["stderr"]), r.get("error", "")])
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(self.provenance, indent=2))


def _fmt(v) -> str:
    return f"{float(v):.16e}"


# ---------------------------------------------------------------------------
# Running


def _build_point(spec: SweepSpec, series: Series, value) -> dict:
    point = copy.deepcopy(spec.base)
    for k in ("scenario", "estimator", "measurement", "bounds"):
        point.setdefault(k, {})
    for path, v in series.overrides.items():
        set_path(point, path, v)
    set_path(point, series.parameter or spec.parameter, value)
    return point


def _measure(scenario, mcfg: dict, rng):
    mode = mcfg.get("mode", "gaussian")
    if mode == "gaussian":
        if mcfg.get("nlos"):
            raise ConfigError("multipath requires the signal measurement mode")
        return synthesize_measurements(scenario, seed=rng)
    if mode == "signal":
        nl = mcfg.get("nlos")
        nlos = None if not nl else NlosSpec(**nl)
        return measure_links(scenario, seed=rng, nlos=nlos, method=mcfg.get("method", "single")).measurements
    raise ConfigError(f"unknown measurement mode {mode!r}")


def _trial_metrics(spec, point, scenario, stream, trials, want_known, n_iter_hist):
    layout = build_layout(scenario)
    ecfg_base = dict(point["estimator"])
    x_true = scenario.ue_position
    out = {k: np.full(trials, np.nan) for k in ("s1", "fin", "known", "interr")}
    hist = np.full((trials, n_iter_hist), np.nan)
    for t in range(trials):
        rng = trial_rng(spec.seed, STREAM_TRIAL, stream, t)
        search_seed = int(trial_rng(spec.seed, STREAM_SEARCH, stream, t).integers(2**62))
        ecfg = EstimatorConfig(**{**ecfg_base, "seed": search_seed})
        try:
            meas = _measure(scenario, point["measurement"], rng)
            res = estimate(meas, scenario, ecfg)
        except (np.linalg.LinAlgError, ValueError, RuntimeError):
            continue
        out["s1"][t] = np.sum((res.stage1_x - x_true) ** 2)
        out["fin"][t] = np.sum((res.x_hat - x_true) ** 2)
        z_d = layout.D @ meas.truth.z
        out["interr"][t] = float(np.any(res.z_d_hat != np.rint(z_d)))
        n = min(n_iter_hist, res.x_history.shape[0])
        hist[t, :n] = np.sum((res.x_history[:n] - x_true) ** 2, axis=1)
        if want_known:
            try:
                kres = estimate(meas, scenario, ecfg, known_z_d=z_d)
                out["known"][t] = np.sum((kres.x_hat - x_true) ** 2)
            except (np.linalg.LinAlgError, ValueError):
                pass
    return out, hist


def run_point(spec: SweepSpec, stream: int, point: dict, trials: int) -> dict:
    """All requested metrics at one sweep point as ``{metric: (value, stderr)}``."""
    metrics = spec.metrics
    scenario = scenario_from_dict(point["scenario"])
    values = {}
    bcfg = point.get("bounds", {})
    n_mc = int(bcfg.get("n_mc", 1000))
    if any(m in BOUND_METRICS for m in metrics):
        rep = micrb(scenario, n_mc=n_mc, seed=trial_rng(spec.seed, STREAM_BOUNDS, stream))
        values.update(peb_delay=(rep.peb_delay, 0.0), peb_known=(rep.peb_known, 0.0),
                      peb_mi=(rep.peb_mi, np.nan),
                      bound_int_err_rate=proportion_with_stderr(np.any(rep.delta_z != 0, axis=1)))
    if any(m in FUSION_METRICS for m in metrics):
        fz = fused_single_band_peb(scenario, n_mc=n_mc if "peb_fused_mi" in metrics else None,
                                   seed=int(trial_rng(spec.seed, STREAM_BOUNDS, stream).integers(2**62)))
        values.update(peb_fused_known=(fz.peb_known, 0.0),
                      peb_fused_mi=(np.nan if fz.peb_mi is None else fz.peb_mi, np.nan))
    iters = [int(ITER_METRIC.match(m).group(1)) for m in metrics if ITER_METRIC.match(m)]
    if any(m in TRIAL_METRICS for m in metrics) or iters:
        n_hist = max(iters) if iters else 1
        out, hist = _trial_metrics(spec, point, scenario, stream, trials, "rmse_known" in metrics, n_hist)
        values["rmse_stage1"] = rmse_with_stderr(out["s1"])
        values["rmse_final"] = rmse_with_stderr(out["fin"])
        values["rmse_known"] = rmse_with_stderr(out["known"])
        values["int_err_rate"] = proportion_with_stderr(out["interr"])
        values["failure_rate"] = proportion_with_stderr(~np.isfinite(out["fin"]))
        for i in iters:
            values[f"rmse_iter{i}"] = rmse_with_stderr(hist[:, i - 1])
    return {m: values[m] for m in metrics}


def run_sweep(spec: SweepSpec, trials: Optional[int] = None, progress=None) -> SweepResult:
    """Evaluate every series at every value; failing points become NaN rows."""
    trials = spec.trials if trials is None else trials
    rows = []
    for series in spec.series:
        values = spec.values if series.values is None else series.values
        xs = series.x if series.x is not None else (spec.x if spec.x is not None and series.values is None else values)
        for value, x in zip(values, xs):
            error = ""
            try:
                point = _build_point(spec, series, value)
                res = run_point(spec, series.stream, point, trials)
            except (ConfigError, np.linalg.LinAlgError, ValueError) as exc:
                error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
                res = {m: (np.nan, np.nan) for m in spec.metrics}
            for m in spec.metrics:
                v, se = res[m]
                rows.append({"series": series.label, "parameter": series.parameter or spec.parameter, "x": float(x),
                             "metric": m, "value": float(v), "stderr": float(se), "error": error})
            if progress is not None:
                progress(series.label, x, res)
    return SweepResult(spec, rows)


# ---------------------------------------------------------------------------
# Presets


def list_presets() -> list:
    root = resources.files("mbcpp") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> SweepSpec:
    """Load a shipped preset by name (e.g. ``"fig5"``) or a sweep file by path."""
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        res = resources.files("mbcpp") / "presets" / f"{name}.json"
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
        text = res.read_text()
    try:
        return SweepSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


__all__ = [
    "Series",
    "SweepResult",
    "SweepSpec",
    "get_path",
    "list_presets",
    "load_preset",
    "rmse",
    "rmse_with_stderr",
    "run_point",
    "run_sweep",
    "set_path",
]
