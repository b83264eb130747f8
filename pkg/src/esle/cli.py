"""Command line entry point: ``esle run | verify-noise | kernels``.

Environment overrides: ESLE_SEED (seed, below --seed), ESLE_THREADS (worker
threads for ensemble runs).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_preset, parse_config
from .dynamics import lz_survival_probability, renormalized_tunneling
from .ensemble import Simulation, extrapolate_asymptote, thread_count
from .errors import ConfigError, ESLEError, InsufficientDataError
from .filters import build_filters
from .io import (write_covariance_report, write_filter_tables, write_json, write_kernel_tables,
                 write_series)
from .kernels import build_kernel_table
from .noise import generate, verify_covariances

MAX_COVARIANCE_POINTS = 5000


def _load(args) -> RunConfig:
    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = parse_config(args.config)
    else:
        raise ConfigError("a --config file or --preset name is required")
    changes = {}
    env_seed = os.environ.get("ESLE_SEED")
    if env_seed is not None:
        try:
            changes["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"ESLE_SEED must be an integer, got {env_seed!r}") from None
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.runs is not None:
        changes["runs"] = args.runs
    if args.output is not None:
        changes["output_dir"] = args.output
    return cfg.replace(**changes) if changes else cfg


def _flatline(series, name):
    first, sem_first = series.window_mean(name, 0.0, 0.1)
    last, sem_last = series.window_mean(name, 0.9, 1.0)
    combined = math.hypot(sem_first, sem_last)
    diff = last - first
    return {"first_10pct_mean": first, "last_10pct_mean": last, "difference": diff,
            "combined_sem": combined, "within_3_sem": bool(abs(diff) < 3 * combined)}


def _sweep_summary(cfg: RunConfig, series) -> dict:
    out = {"p_lz": lz_survival_probability(cfg.delta, cfg.kappa, cfg.hbar)
           if cfg.kappa > 0 else None}
    try:
        out["delta_r"] = renormalized_tunneling(cfg.delta, cfg.alpha, cfg.omega_c)
    except ESLEError as exc:
        out["delta_r"] = None
        out["delta_r_note"] = str(exc)
    half = series.t.size // 2
    try:
        fit = extrapolate_asymptote(series.t[half:], series.sz_mean[half:])
        out["sz_asymptote"] = {"value": fit.value, "stderr": fit.stderr, "model": fit.model,
                               "fallback": fit.fallback, "params": fit.params,
                               "window": [float(series.t[half]), float(series.t[-1])],
                               "note": "fit model A exp(-g s) cos(w s + phi) + C is an "
                                       "engineering choice"}
        out["p_survival_asymptote"] = 0.5 * (1.0 + fit.value)
    except InsufficientDataError as exc:
        out["sz_asymptote"] = None
        out["sz_asymptote_note"] = str(exc)
    return out


def _physicality(series) -> dict:
    def worst(value, band):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(band > 0, value / band, np.where(value > 0, np.inf, 0.0))
        return float(r.max())

    out = {}
    for name, value, band, strict in (
            ("hermiticity", series.herm_defect, series.herm_band, series.herm_band_strict),
            ("trace_drift", series.trace_drift, series.trace_band, series.trace_band_strict)):
        out[f"{name}_within_band"] = bool(np.all(value <= band))
        out[f"{name}_max_over_band"] = worst(value, band)
        out[f"{name}_max_over_strict_band"] = worst(value, strict)
    return out


def cmd_run(cfg: RunConfig, resume=None) -> Path:
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    threads = thread_count()
    start = time.perf_counter()
    sim = Simulation(cfg)
    ckpt = outdir / "checkpoint.npz" if cfg.checkpoint_every > 0 else None
    result = sim.run(threads=threads, checkpoint_path=ckpt, resume_from=resume)
    wall = time.perf_counter() - start
    series_path = outdir / "series.csv"
    manifest_path = outdir / "manifest.json"
    try:
        write_series(series_path, result.series, cfg.config_hash)
        manifest = {
            "version": __version__,
            "config_hash": cfg.config_hash,
            "config": cfg.echo(),
            "trajectories": {"accepted": result.stats.count, "diverged": result.stats.diverged,
                             "launched": result.stats.launched},
            "imaginary_phase": {"accepted": result.imaginary_count,
                                "diverged": result.imaginary_diverged},
            "wall_time_s": wall,
            "threads": threads,
            "normalization": cfg.normalization,
            "flatline": {"sz": _flatline(result.series, "sz"),
                         "sx": _flatline(result.series, "sx")},
            "physicality": _physicality(result.series),
            "warnings": result.warnings,
        }
        if result.matched_rho is not None:
            manifest["matched_rho"] = [[[v.real, v.imag] for v in row]
                                       for row in result.matched_rho]
        if cfg.kind == "linear":
            manifest["sweep"] = _sweep_summary(cfg, result.series)
        write_json(manifest_path, manifest)
    except BaseException:
        for p in (series_path, manifest_path):
            if p.exists():
                p.unlink()
        raise
    return outdir


def _snapshots(runs: int) -> list[int]:
    marks, r = [], 1000
    while r < runs:
        marks.append(r)
        r *= 10
    return marks + [runs]


def cmd_verify_noise(cfg: RunConfig) -> Path:
    if cfg.n_steps + 1 > MAX_COVARIANCE_POINTS:
        raise ConfigError(f"verify-noise stores full covariance matrices; n_steps must be "
                          f"below {MAX_COVARIANCE_POINTS}")
    outdir = Path(cfg.output_dir)
    kernels = build_kernel_table(cfg.bath, cfg.grids)
    filters = build_filters(kernels, strict=cfg.strict_factorization)
    start = time.perf_counter()
    report = verify_covariances(generate(filters, cfg.seed, cfg.runs), kernels,
                                snapshots=_snapshots(cfg.runs))
    wall = time.perf_counter() - start
    files = write_covariance_report(outdir, report, cfg.grids, cfg.config_hash, cfg.tau_slices)
    summary = {
        "version": __version__,
        "config_hash": cfg.config_hash,
        "config": cfg.echo(),
        "runs": report.runs,
        "rms": report.rms,
        "rms_re": report.rms_re,
        "max_zero_correlator": report.max_zero_by_name,
        "max_abs_mean": report.max_mean,
        "k_eta_eta_0": float(kernels.k_eta_eta[0]),
        "wall_time_s": wall,
        "files": [p.name for p in files],
    }
    hist = list(report.history)
    if not hist or hist[-1].runs != report.runs:
        hist.append(report)
    if len(hist) >= 2:
        runs = np.array([h.runs for h in hist], float)
        vals = np.array([h.rms_re["eta_eta"] for h in hist])
        summary["rms_re_etaeta_loglog_slope"] = float(np.polyfit(np.log(runs), np.log(vals), 1)[0])
    write_json(outdir / "noise_manifest.json", summary)
    return outdir


def cmd_kernels(cfg: RunConfig) -> Path:
    outdir = Path(cfg.output_dir)
    table = build_kernel_table(cfg.bath, cfg.grids)
    write_kernel_tables(outdir, table, cfg.config_hash)
    write_filter_tables(outdir, build_filters(table, strict=False), cfg.config_hash)
    return outdir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"esle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "sample an ensemble and write series.csv + manifest.json"),
                       ("verify-noise", "check generated noise covariances against the kernels"),
                       ("kernels", "dump kernel tables and filter diagnostics")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--preset", help="name of a bundled preset instead of --config")
        p.add_argument("--seed", type=int, help="override the seed (unsigned 64-bit)")
        p.add_argument("--runs", type=int, help="override the number of trajectories")
        p.add_argument("--output", help="output directory")
        if name == "run":
            p.add_argument("--resume", help="checkpoint file to continue from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            out = cmd_run(cfg, resume=args.resume)
        elif args.command == "verify-noise":
            out = cmd_verify_noise(cfg)
        else:
            out = cmd_kernels(cfg)
    except ConfigError as exc:
        print(f"esle: configuration error: {exc}", file=sys.stderr)
        return 2
    except ESLEError as exc:
        print(f"esle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
