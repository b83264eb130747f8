"""Plain-text output: headed CSV tables and JSON manifests, written atomically."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__

__all__ = ["header_line", "format_value", "write_csv", "read_csv", "write_json",
           "write_kernel_tables", "write_filter_tables", "write_covariance_report",
           "write_series"]


def header_line(config_hash: str) -> str:
    return f"# config_hash={config_hash} version={__version__}"


def format_value(v) -> str:
    """Locale-independent, round-trip formatting; None becomes an empty field."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], *, config_hash: str) -> Path:
    path = Path(path)
    lines = [header_line(config_hash), ",".join(columns)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    _atomic_text(path, "\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Return (header comment, column names, float array); empty fields are NaN."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        columns = fh.readline().rstrip("\n").split(",")
        data = [[float(x) if x else np.nan for x in line.rstrip("\n").split(",")]
                for line in fh if line.strip()]
    return header, columns, np.array(data, float).reshape(-1, len(columns))


def write_json(path, obj) -> Path:
    path = Path(path)
    _atomic_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


_KERNEL_COLUMNS = ("lag_or_t", "tau_if_applicable", "re", "im")


def write_kernel_tables(outdir, table, config_hash: str) -> list[Path]:
    """One CSV per kernel: (lag_or_t, tau_if_applicable, re, im)."""
    outdir = Path(outdir)
    g = table.grids
    lags = g.dt * np.arange(g.n_steps + 1)
    tau_lags = g.dtau * np.arange(-g.m_steps, g.m_steps + 1)
    tau = g.tau
    files = [
        write_csv(outdir / "kernel_eta_eta.csv", _KERNEL_COLUMNS,
                  ((t, None, v, 0.0) for t, v in zip(lags, table.k_eta_eta)),
                  config_hash=config_hash),
        write_csv(outdir / "kernel_eta_nu.csv", _KERNEL_COLUMNS,
                  ((t, None, v.real, v.imag) for t, v in zip(lags, table.k_eta_nu)),
                  config_hash=config_hash),
        write_csv(outdir / "kernel_mu_mu.csv", _KERNEL_COLUMNS,
                  ((None, s, v, 0.0) for s, v in zip(tau_lags, table.k_mu_mu)),
                  config_hash=config_hash),
        write_csv(outdir / "kernel_eta_mu.csv", _KERNEL_COLUMNS,
                  ((lags[i], tau[j], table.k_eta_mu[i, j].real, table.k_eta_mu[i, j].imag)
                   for i in range(lags.size) for j in range(tau.size)),
                  config_hash=config_hash),
    ]
    return files


def write_filter_tables(outdir, filters, config_hash: str) -> list[Path]:
    """Filter spectra in the kernel CSV schema (bin index in the first column)
    plus a JSON diagnostics file with the clamped-bin report."""
    outdir = Path(outdir)
    files = []
    for name, spec in (("g_eta_eta", filters.g_eta_eta_spectrum),
                       ("g_mu_mu", filters.g_mu_mu_spectrum),
                       ("g_eta_nu", filters.g_eta_nu_spectrum)):
        spec = np.asarray(spec, complex)
        files.append(write_csv(outdir / f"filter_{name}.csv", _KERNEL_COLUMNS,
                               ((k, None, v.real, v.imag) for k, v in enumerate(spec)),
                               config_hash=config_hash))
    diag = {"config_hash": config_hash, "version": __version__, **filters.diagnostics()}
    files.append(write_json(outdir / "filter_diagnostics.json", diag))
    return files


_COV_COLUMNS = ("t_or_tau_row", "t_or_tau_col_or_slice", "re_target", "im_target",
                "re_sample", "im_sample")


def write_covariance_report(outdir, report, grids, config_hash: str,
                            tau_slices: Sequence[float] = ()) -> list[Path]:
    outdir = Path(outdir)
    t = grids.elapsed
    tau = grids.tau
    axes = {"eta_eta": (t, t), "eta_nu": (t, t), "nu_nu": (t, t), "mu_mu": (tau, tau),
            "eta_mu": (t, tau), "nu_mu": (t, tau)}
    files = []
    for name, (rows, cols) in axes.items():
        tgt, smp = report.targets[name], report.samples[name]
        files.append(write_csv(
            outdir / f"cov_{name}.csv", _COV_COLUMNS,
            ((rows[i], cols[j], tgt[i, j].real, tgt[i, j].imag, smp[i, j].real, smp[i, j].imag)
             for i in range(rows.size) for j in range(cols.size)),
            config_hash=config_hash))
    if tau_slices:
        idx = [int(np.argmin(np.abs(tau - s))) for s in tau_slices]
        tgt, smp = report.targets["eta_mu"], report.samples["eta_mu"]
        files.append(write_csv(
            outdir / "cov_eta_mu_slices.csv", _COV_COLUMNS,
            ((t[i], tau[j], tgt[i, j].real, tgt[i, j].imag, smp[i, j].real, smp[i, j].imag)
             for j in idx for i in range(t.size)),
            config_hash=config_hash))
    rms_cols = ("runs", "rms_etaeta", "rms_etanu", "rms_mumu", "rms_etamu",
                "max_zero_correlator", "rms_re_etaeta")
    snaps = list(report.history)
    if not snaps or snaps[-1].runs != report.runs:
        snaps.append(report)
    files.append(write_csv(outdir / "rms_vs_runs.csv", rms_cols,
                           ([r.row()[c] for c in rms_cols] for r in snaps),
                           config_hash=config_hash))
    return files


SERIES_COLUMNS = ("t", "sz_mean", "sz_sem", "sx_mean", "sx_sem", "re_rho11", "im_rho11",
                  "re_rho12", "im_rho12", "re_rho21", "im_rho21", "re_rho22", "im_rho22",
                  "re_trace", "im_trace")


def write_series(path, series, config_hash: str) -> Path:
    rho = series.rho
    rows = (
        (series.t[k], series.sz_mean[k], series.sz_sem[k], series.sx_mean[k], series.sx_sem[k],
         rho[k, 0, 0].real, rho[k, 0, 0].imag, rho[k, 0, 1].real, rho[k, 0, 1].imag,
         rho[k, 1, 0].real, rho[k, 1, 0].imag, rho[k, 1, 1].real, rho[k, 1, 1].imag,
         series.trace_mean[k].real, series.trace_mean[k].imag)
        for k in range(series.t.size)
    )
    return write_csv(path, SERIES_COLUMNS, rows, config_hash=config_hash)
