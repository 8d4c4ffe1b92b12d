"""Command line entry point: ``cpp bounds|estimate|sweep|signal``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from .bounds import micrb
from .estimator import SEARCH_GAUSSIAN, SEARCH_GRID, EstimatorConfig, estimate
from .harness import SweepSpec, list_presets, load_preset, run_sweep
from .ils import IlsError
from .model import IdentifiabilityError, build_layout, synthesize_measurements
from .scenario import (
    ConfigError,
    GeometryError,
    default_band,
    load_scenario,
    sample_default_scenario,
)
from .seeding import trial_rng
from .signal import NlosSpec, link_trials

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _fmt(v) -> str:
    return f"{float(v):.16e}"


def _write_csv(path, header, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _scenario(args):
    path = args.scenario or args.config
    if path:
        cfg = load_scenario(path)
    else:
        # default deployment: 3.5 + 12 GHz, six BSs from geometry seed 1
        cfg = sample_default_scenario(1, 6, (3.5e9, 12e9))
    if getattr(args, "clock_std", None) is not None:
        cfg = cfg.replace(bs_clock_std_s=args.clock_std)
    return cfg


def cmd_bounds(args) -> int:
    cfg = _scenario(args)
    rep = micrb(cfg, n_mc=args.n_mc, seed=args.seed)
    row = rep.as_row()
    header = ["scenario_id", "peb_delay_m", "peb_known_m", "peb_mi_m", "int_err_rate"]
    _write_csv(args.out, header, [[row["scenario_id"]] + [_fmt(row[k]) for k in header[1:]]])
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _scenario(args)
    layout = build_layout(cfg)
    rows = []
    for t in range(args.trials):
        meas = synthesize_measurements(cfg, seed=trial_rng(args.seed, 0, t))
        ecfg = EstimatorConfig(n_iter=args.n_iter, n_search=args.n_search, search_scale=args.eps,
                               search_sampling=args.sampling, seed=int(trial_rng(args.seed, 2, t).integers(2**62)),
                               curvature_margin=not args.no_curvature_margin)
        res = estimate(meas, cfg, ecfg)
        z_true = np.rint(layout.D @ meas.truth.z)
        rows.append([t, _fmt(np.linalg.norm(res.x_hat - cfg.ue_position)),
                     _fmt(np.linalg.norm(res.stage1_x - cfg.ue_position)), _fmt(res.ml_cost),
                     int(np.array_equal(res.z_d_hat, z_true))])
    _write_csv(args.out, ["trial_id", "x_err_m", "stage1_err_m", "ml_cost", "int_correct"], rows)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.preset:
        spec = load_preset(args.preset)
    elif args.config:
        with open(args.config) as fh:
            try:
                spec = SweepSpec.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
    else:
        raise ConfigError(f"sweep needs --preset or --config; presets: {', '.join(list_presets())}")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.series:
        spec = spec.select(args.series.split(","))
    progress = None
    if args.verbose:
        progress = lambda s, x, res: print(f"{s} x={x:g} " + " ".join(f"{k}={v[0]:.4g}" for k, v in res.items()),
                                            file=sys.stderr, flush=True)
    result = run_sweep(spec, trials=args.trials, progress=progress)
    if args.out in (None, "-"):
        _write_csv(None, ["series", "parameter", "x", "metric", "value", "stderr", "error"],
                   [[r["series"], r["parameter"], _fmt(r["x"]), r["metric"], _fmt(r["value"]),
                     _fmt(r["stderr"]), r["error"]] for r in result.rows])
    else:
        result.to_csv(args.out)
    return EXIT_OK


def _parse_kv(text: str) -> dict:
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"{k}: not a number: {v!r}") from exc
    return out


LINK_KEYS = {"fc_ghz", "subcarriers", "spacing_khz", "power_dbm", "distance_m"}


def _parse_paths(text: str):
    """``"100:-6,300:-10"`` -> NLoS paths as (excess delay ns, power ratio dB[, phase cycles])."""
    paths = []
    for item in filter(None, (p.strip() for p in (text or "").split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"path {item!r} must be delay_ns:ratio_db[:phase_cycles]")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ConfigError(f"path {item!r}: {exc}") from exc
        paths.append(NlosSpec(vals[0] * 1e-9, vals[1], vals[2] if len(vals) == 3 else None))
    return paths


def cmd_signal(args) -> int:
    link = _parse_kv(args.link or "")
    unknown = set(link) - LINK_KEYS
    if unknown:
        raise ConfigError(f"unknown link keys {sorted(unknown)}; allowed: {sorted(LINK_KEYS)}")
    band = default_band(
        link.get("fc_ghz", 3.5) * 1e9,
        num_subcarriers=int(link.get("subcarriers", 612)),
        subcarrier_spacing_hz=link.get("spacing_khz", 30.0) * 1e3,
        tx_power_w=10 ** ((link.get("power_dbm", 0.0) - 30) / 10),
    )
    nlos = _parse_paths(args.paths)
    method = args.method or ("esprit" if nlos else "single")
    res = link_trials(band, link.get("distance_m", 100.0), args.trials, seed=args.seed, nlos=nlos, method=method)
    print(f"snr_db={10 * np.log10(res.snr):.2f} delay_var_ratio={res.delay_variance_ratio:.4f} "
          f"phase_var_ratio={res.phase_variance_ratio:.4f} fallbacks={res.fallback_count}", file=sys.stderr)
    _write_csv(args.out, ["delay_err", "phase_err"],
               [[_fmt(d), _fmt(p)] for d, p in zip(res.delay_err_s, res.phase_err_cycles)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpp", description="Multi-band carrier-phase positioning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trials_default=None, seed_default=0):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=seed_default, help="root random seed")
        sp.add_argument("--trials", type=int, default=trials_default, help="Monte-Carlo trials")
        sp.add_argument("--out", help="output CSV path (default: stdout)")

    b = sub.add_parser("bounds", help="delay-only, known-integer and mixed-integer PEBs for one scenario")
    common(b)
    b.add_argument("--scenario", help="scenario JSON file")
    b.add_argument("--n-mc", type=int, default=1000, help="integer-error draws for the mixed-integer bound")
    b.add_argument("--clock-std", type=float, help="per-BS clock error std (s)")
    b.set_defaults(func=cmd_bounds)

    e = sub.add_parser("estimate", help="run the two-stage estimator over Monte-Carlo trials")
    common(e, trials_default=100)
    e.add_argument("--scenario", help="scenario JSON file")
    e.add_argument("--n-iter", type=int, default=2)
    e.add_argument("--n-search", type=int, default=1)
    e.add_argument("--eps", type=float, default=1.0, help="search covariance multiplier")
    e.add_argument("--sampling", choices=[SEARCH_GAUSSIAN, SEARCH_GRID], default=SEARCH_GAUSSIAN)
    e.add_argument("--clock-std", type=float, help="per-BS clock error std (s)")
    e.add_argument("--no-curvature-margin", action="store_true",
                   help="use the plain float covariance in the first integer fix")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sweep", help="run a preset or sweep file and write the long-format CSV")
    common(s, seed_default=None)
    s.add_argument("--preset", help=f"one of: {', '.join(list_presets())}")
    s.add_argument("--series", help="comma-separated subset of series labels")
    s.add_argument("-v", "--verbose", action="store_true", help="print progress to stderr")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("signal", help="per-link delay/phase error trials at signal level")
    common(g, trials_default=2000)
    g.add_argument("--link", help="fc_ghz=3.5,subcarriers=612,spacing_khz=30,power_dbm=0,distance_m=100")
    g.add_argument("--paths", help="extra NLoS paths: delay_ns:ratio_db[:phase_cycles],...")
    g.add_argument("--method", choices=["single", "esprit"])
    g.set_defaults(func=cmd_signal)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.trials is not None and args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        return args.func(args)
    except (ConfigError, GeometryError, IdentifiabilityError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"cpp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, IlsError, FloatingPointError) as exc:
        print(f"cpp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
