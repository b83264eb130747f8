"""Ensemble averaging of stochastic trajectories.

Trajectory indices are processed in fixed chunks of ``chunk_size`` aligned to
multiples of the chunk size.  Each chunk is reduced to its own statistics and
chunks are merged strictly in index order, so results do not depend on the
number of worker threads.  Resuming from a checkpoint taken at a chunk
boundary is therefore bitwise transparent.

Per reported time the statistics keep plain sums of the matrices, sums of
squared magnitudes, and pooled means / second moments of 18 real channels
(see ``CHANNELS``) with the two cross moments needed for the ratio
estimators of <sigma_z> and <sigma_x>.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import curve_fit

from .config import RunConfig
from .dynamics import (EvolutionMode, evolve_imaginary_batch, evolve_real_batch,
                       initial_condition, record_indices)
from .errors import CheckpointError, EnsembleError, InsufficientDataError
from .filters import FilterSet, build_filters
from .kernels import KernelTable, build_kernel_table
from .noise import draw_white_batch, synthesize

__all__ = [
    "CHANNELS",
    "DIVERGENCE_LIMIT",
    "Moments",
    "EnsembleStats",
    "ObservableSeries",
    "EnsembleResult",
    "PairedResult",
    "AsymptoteFit",
    "Simulation",
    "run_ensemble",
    "run_paired_difference",
    "merge_stats",
    "channel_values",
    "save_checkpoint",
    "load_checkpoint",
    "extrapolate_asymptote",
    "thread_count",
]

CHANNELS = (
    "re11", "im11", "re12", "im12", "re21", "im21", "re22", "im22",
    "re_sz", "im_sz", "re_sx", "im_sx", "re_tr", "im_tr",
    "re_herm", "im_herm", "re_drift", "im_drift",
)
_CH = {name: k for k, name in enumerate(CHANNELS)}
_PAIRS = ((_CH["re_sz"], _CH["re_tr"]), (_CH["re_sx"], _CH["re_tr"]))
DIVERGENCE_LIMIT = 0.05
CHECKPOINT_VERSION = 1


def thread_count(default: int = 1) -> int:
    """Worker threads, from ESLE_THREADS if set."""
    raw = os.environ.get("ESLE_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise EnsembleError(f"ESLE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# --- streaming moments -----------------------------------------------------------

@dataclass
class Moments:
    """Pooled mean, centered second moments and selected cross moments of
    real channels, per time index.  ``cross[..., p]`` belongs to ``pairs[p]``."""

    n: int
    mean: np.ndarray
    m2: np.ndarray
    cross: np.ndarray
    pairs: tuple

    @classmethod
    def empty(cls, n_times: int, n_channels: int, pairs=()) -> "Moments":
        return cls(0, np.zeros((n_times, n_channels)), np.zeros((n_times, n_channels)),
                   np.zeros((n_times, len(pairs))), tuple(pairs))

    @classmethod
    def from_batch(cls, x: np.ndarray, pairs=()) -> "Moments":
        """x has shape (B, T, C)."""
        b = x.shape[0]
        if b == 0:
            return cls.empty(x.shape[1], x.shape[2], pairs)
        mean = x.sum(axis=0) / b
        dev = x - mean
        m2 = np.einsum("btc,btc->tc", dev, dev)
        cross = np.stack([np.einsum("bt,bt->t", dev[..., i], dev[..., j]) for i, j in pairs],
                         axis=-1) if pairs else np.zeros((x.shape[1], 0))
        return cls(b, mean, m2, cross, tuple(pairs))

    def add(self, x: np.ndarray) -> None:
        """Welford update with one sample of shape (T, C)."""
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        delta2 = x - self.mean
        self.m2 = self.m2 + delta * delta2
        for p, (i, j) in enumerate(self.pairs):
            self.cross[:, p] += delta[:, i] * delta2[:, j]

    def merge(self, other: "Moments") -> "Moments":
        if self.pairs != other.pairs or self.mean.shape != other.mean.shape:
            raise EnsembleError("cannot merge moments with different layouts")
        if other.n == 0:
            return self.copy()
        if self.n == 0:
            return other.copy()
        n = self.n + other.n
        mean = (self.n * self.mean + other.n * other.mean) / n
        d = other.mean - self.mean
        w = self.n * other.n / n
        m2 = self.m2 + other.m2 + d * d * w
        cross = self.cross + other.cross
        for p, (i, j) in enumerate(self.pairs):
            cross[:, p] = cross[:, p] + d[:, i] * d[:, j] * w
        return Moments(n, mean, m2, cross, self.pairs)

    def copy(self) -> "Moments":
        return Moments(self.n, self.mean.copy(), self.m2.copy(), self.cross.copy(), self.pairs)

    def var(self) -> np.ndarray:
        """Unbiased sample variance per channel."""
        if self.n < 2:
            return np.full_like(self.m2, np.nan)
        return self.m2 / (self.n - 1)

    def cov(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return self.var()[:, i]
        if self.n < 2:
            return np.full(self.mean.shape[0], np.nan)
        for p, pair in enumerate(self.pairs):
            if pair in ((i, j), (j, i)):
                return self.cross[:, p] / (self.n - 1)
        raise KeyError(f"cross moment ({i}, {j}) is not tracked")

    def sem(self) -> np.ndarray:
        return np.sqrt(self.var() / max(self.n, 1))

    def ratio(self, a: int, b: int):
        """Mean and delta-method SEM of mean(a)/mean(b) per time."""
        ma, mb = self.mean[:, a], self.mean[:, b]
        r = ma / mb
        var = (self.cov(a, a) - 2 * r * self.cov(a, b) + r * r * self.cov(b, b)) / mb**2
        return r, np.sqrt(np.maximum(var, 0.0) / max(self.n, 1))


def channel_values(traj: np.ndarray) -> np.ndarray:
    """Map trajectories of shape (B, T, 2, 2) to channel values (B, T, 18)."""
    r11, r12 = traj[..., 0, 0], traj[..., 0, 1]
    r21, r22 = traj[..., 1, 0], traj[..., 1, 1]
    tr = r11 + r22
    complex_channels = (r11, r12, r21, r22, r11 - r22, r12 + r21, tr,
                        r12 - np.conj(r21), tr - tr[:, :1])
    out = np.empty(traj.shape[:2] + (len(CHANNELS),))
    for k, c in enumerate(complex_channels):
        out[..., 2 * k] = c.real
        out[..., 2 * k + 1] = c.imag
    return out


@dataclass
class EnsembleStats:
    """Mergeable accumulators for one ensemble."""

    config_hash: str
    times: np.ndarray
    count: int = 0
    diverged: int = 0
    next_index: int = 0
    sum_rho: np.ndarray = None
    sum_sq: np.ndarray = None
    moments: Moments = None

    def __post_init__(self):
        t = self.times.size
        if self.sum_rho is None:
            self.sum_rho = np.zeros((t, 2, 2), complex)
        if self.sum_sq is None:
            self.sum_sq = np.zeros((t, 2, 2))
        if self.moments is None:
            self.moments = Moments.empty(t, len(CHANNELS), _PAIRS)

    @property
    def launched(self) -> int:
        return self.count + self.diverged

    @classmethod
    def from_batch(cls, config_hash: str, times: np.ndarray, traj: np.ndarray,
                   diverged: int = 0, next_index: int = 0) -> "EnsembleStats":
        """Statistics of accepted trajectories ``traj`` (B, T, 2, 2)."""
        return cls(config_hash, times, traj.shape[0], diverged, next_index,
                   traj.sum(axis=0), (np.abs(traj) ** 2).sum(axis=0),
                   Moments.from_batch(channel_values(traj), _PAIRS))

    def add_trajectory(self, traj: np.ndarray) -> None:
        """Sequential (Welford) accumulation of a single trajectory (T, 2, 2)."""
        self.count += 1
        self.sum_rho = self.sum_rho + traj
        self.sum_sq = self.sum_sq + np.abs(traj) ** 2
        self.moments.add(channel_values(traj[None])[0])

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        return merge_stats(self, other)

    def mean_rho(self) -> np.ndarray:
        if self.count == 0:
            raise InsufficientDataError("no accepted trajectories")
        return self.sum_rho / self.count

    def observables(self) -> "ObservableSeries":
        return ObservableSeries.from_stats(self)


def merge_stats(a: EnsembleStats, b: EnsembleStats) -> EnsembleStats:
    """Exact pooled combination; a.merge(empty) == a."""
    if a.config_hash != b.config_hash:
        raise EnsembleError(
            f"cannot merge statistics of different configs ({a.config_hash} vs {b.config_hash})")
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise EnsembleError("cannot merge statistics recorded on different time grids")
    return EnsembleStats(
        a.config_hash, a.times, a.count + b.count, a.diverged + b.diverged,
        max(a.next_index, b.next_index), a.sum_rho + b.sum_rho, a.sum_sq + b.sum_sq,
        a.moments.merge(b.moments))


# --- observables -------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableSeries:
    """Normalized observables per reported time.

    ``rho`` is hermitize(<rho>)/Tr<rho>.  The Hermiticity defect is
    max|A - A^dagger| over entries of the raw average A and ``herm_band`` is
    three times the largest entry SEM of A.  ``trace_drift`` is
    |Tr A(t) - Tr A(t_first)| with ``trace_band`` three times the SEM of Tr A(t).

    The ``*_band_strict`` variants use the SEMs of the defect and drift
    themselves (per-trajectory A - A^dagger and Tr(t) - Tr(t_first)); they are
    much tighter and are reported as diagnostics.
    """

    t: np.ndarray
    sz_mean: np.ndarray
    sz_sem: np.ndarray
    sx_mean: np.ndarray
    sx_sem: np.ndarray
    trace_mean: np.ndarray
    rho: np.ndarray
    herm_defect: np.ndarray
    herm_band: np.ndarray
    trace_drift: np.ndarray
    trace_band: np.ndarray
    herm_band_strict: np.ndarray
    trace_band_strict: np.ndarray
    count: int

    @classmethod
    def from_stats(cls, stats: EnsembleStats) -> "ObservableSeries":
        mom = stats.moments
        avg = stats.mean_rho()
        tr = avg[:, 0, 0] + avg[:, 1, 1]
        herm = 0.5 * (avg + np.conj(np.swapaxes(avg, 1, 2)))
        rho = herm / tr.real[:, None, None]
        sz, sz_sem = mom.ratio(_CH["re_sz"], _CH["re_tr"])
        sx, sx_sem = mom.ratio(_CH["re_sx"], _CH["re_tr"])
        sem = mom.sem()

        def cplx_sem(name):
            if name[0].isdigit():
                return np.hypot(sem[:, _CH["re" + name]], sem[:, _CH["im" + name]])
            return np.hypot(sem[:, _CH["re_" + name]], sem[:, _CH["im_" + name]])

        herm_off = np.abs(avg[:, 0, 1] - np.conj(avg[:, 1, 0]))
        defect = np.max(np.stack([2 * np.abs(avg[:, 0, 0].imag), 2 * np.abs(avg[:, 1, 1].imag),
                                  herm_off]), axis=0)
        entry_sem = np.max(np.stack([cplx_sem(e) for e in ("11", "12", "21", "22")]), axis=0)
        strict = 3 * np.max(np.stack([2 * sem[:, _CH["im11"]], 2 * sem[:, _CH["im22"]],
                                      cplx_sem("herm")]), axis=0)
        drift = np.abs(tr - tr[0])
        return cls(stats.times, sz, sz_sem, sx, sx_sem, tr, rho, defect, 3 * entry_sem, drift,
                   3 * cplx_sem("tr"), strict, 3 * cplx_sem("drift"), stats.count)

    def window_mean(self, name: str, lo: float, hi: float):
        """Mean of a series over the fraction [lo, hi) of reported points and a
        conservative SEM (the mean of pointwise SEMs)."""
        n = self.t.size
        a, b = int(np.floor(lo * n)), max(int(np.ceil(hi * n)), int(np.floor(lo * n)) + 1)
        vals = getattr(self, f"{name}_mean")[a:b]
        sems = getattr(self, f"{name}_sem")[a:b]
        return float(vals.mean()), float(sems.mean())


# --- asymptote fit -------------------------------------------------------------------

@dataclass(frozen=True)
class AsymptoteFit:
    """C and its standard error from A exp(-g s) cos(w s + phi) + C, s = t - t_w.

    ``fallback`` is True when the damped-cosine fit was unusable and C is the
    plain mean of the window."""

    value: float
    stderr: float
    fallback: bool
    model: str
    params: dict = field(default_factory=dict)


def _damped_cosine(s, a, g, w, phi, c):
    return a * np.exp(-g * s) * np.cos(w * s + phi) + c


def extrapolate_asymptote(t, y, window=None) -> AsymptoteFit:
    """Fit the damped cosine over ``window`` = (t_start, t_end) (default: all)."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, y = t[sel], y[sel]
    if t.size < 20:
        raise InsufficientDataError(f"asymptote fit needs >= 20 points, got {t.size}")
    if np.all(y == y[0]):
        return AsymptoteFit(float(y[0]), 0.0, False, "constant")

    s = t - t[0]
    span = s[-1]
    mean = float(y.mean())

    def fallback(reason):
        n = y.size
        return AsymptoteFit(mean, float(y.std(ddof=1) / np.sqrt(n)), True, "tail-mean",
                            {"reason": reason})

    dev = y - mean
    spec = np.abs(np.fft.rfft(dev))
    freqs = 2 * np.pi * np.fft.rfftfreq(y.size, d=span / (y.size - 1))
    w0 = float(freqs[1 + np.argmax(spec[1:])]) if spec.size > 1 else 1.0
    amp0 = float(np.abs(dev).max())
    best = None
    for phi0 in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
        for g0 in (0.0, 1.0 / span, 4.0 / span):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    p, cov = curve_fit(
                        _damped_cosine, s, y, p0=[amp0, g0, w0, phi0, mean],
                        bounds=([-np.inf, 0.0, 0.0, -np.inf, -np.inf], np.inf),
                        maxfev=20000)
            except (RuntimeError, ValueError):
                continue
            sse = float(np.sum((_damped_cosine(s, *p) - y) ** 2))
            if best is None or sse < best[0]:
                best = (sse, p, cov)
    if best is None:
        return fallback("fit did not converge")
    sse, p, cov = best
    err = np.sqrt(np.diag(cov)) if np.all(np.isfinite(cov)) else np.full(5, np.inf)
    a, g, w, phi, c = p
    params = {"A": float(a), "gamma": float(g), "omega": float(w), "phi": float(phi),
              "sse": sse}
    if not np.isfinite(err[4]) or not np.all(np.isfinite(err[:3])):
        return fallback("degenerate fit (parameters unidentifiable)")
    if w * span < np.pi:
        return fallback("less than half an oscillation inside the window")
    return AsymptoteFit(float(c), float(err[4]), False, "damped-cosine", params)


# --- checkpoints -------------------------------------------------------------------

def _atomic_write(path: Path, writer: Callable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(stats: EnsembleStats, path, *, extra: dict | None = None,
                    arrays: dict | None = None) -> None:
    """Write accumulators and progress to an ``.npz`` archive.

    Layout: arrays ``times``, ``sum_rho``, ``sum_sq``, ``mean``, ``m2``, ``cross``
    plus any ``arrays`` given, and a JSON string ``meta`` holding
    format_version, config_hash, count, diverged, next_index, pairs and
    ``extra``."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": stats.config_hash,
        "count": stats.count,
        "diverged": stats.diverged,
        "next_index": stats.next_index,
        "moments_n": stats.moments.n,
        "pairs": [list(p) for p in stats.moments.pairs],
        "extra": extra or {},
    }
    payload = {
        "times": stats.times, "sum_rho": stats.sum_rho, "sum_sq": stats.sum_sq,
        "mean": stats.moments.mean, "m2": stats.moments.m2, "cross": stats.moments.cross,
        "meta": np.array(json.dumps(meta)),
    }
    for k, v in (arrays or {}).items():
        payload[f"extra_{k}"] = v

    def write(tmp):
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)

    _atomic_write(Path(path), write)


def load_checkpoint(path, config_hash: str | None = None):
    """Return (stats, extra, arrays); refuses mismatched or damaged files."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(str(data.pop("meta")))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
    if config_hash is not None and meta["config_hash"] != config_hash:
        raise CheckpointError(
            f"{path}: checkpoint belongs to config {meta['config_hash']}, not {config_hash}")
    try:
        times = data["times"]
        t = times.size
        pairs = tuple(tuple(p) for p in meta["pairs"])
        mom = Moments(int(meta["moments_n"]), data["mean"], data["m2"], data["cross"], pairs)
        if (data["sum_rho"].shape != (t, 2, 2) or data["sum_sq"].shape != (t, 2, 2)
                or mom.mean.shape != (t, len(CHANNELS)) or mom.m2.shape != mom.mean.shape
                or mom.cross.shape != (t, len(pairs)) or mom.n != int(meta["count"])):
            raise CheckpointError(f"{path}: inconsistent array shapes or counts")
        stats = EnsembleStats(meta["config_hash"], times, int(meta["count"]),
                              int(meta["diverged"]), int(meta["next_index"]),
                              data["sum_rho"], data["sum_sq"], mom)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from exc
    arrays = {k[6:]: v for k, v in data.items() if k.startswith("extra_")}
    return stats, meta["extra"], arrays


# --- orchestration ---------------------------------------------------------------

@dataclass
class EnsembleResult:
    stats: EnsembleStats
    series: ObservableSeries
    matched_rho: np.ndarray | None = None
    imaginary_count: int = 0
    imaginary_diverged: int = 0
    warnings: list = field(default_factory=list)


class Simulation:
    """Kernels, filters and grids for one configuration, shared by all chunks."""

    def __init__(self, config: RunConfig, *, kernels: KernelTable | None = None,
                 filters: FilterSet | None = None):
        self.config = config
        self.spec = config.bath
        self.grids = config.grids
        self.protocol = config.protocol
        self.mode = config.mode
        # with alpha = 0 every noise is identically zero; skip the tables,
        # which can be very large on fine grids
        self.noiseless = self.spec.alpha == 0
        if self.noiseless:
            self.kernels = self.filters = self.partitioned_filters = None
        else:
            self.kernels = kernels if kernels is not None else build_kernel_table(
                self.spec, self.grids)
            self.filters = filters if filters is not None else build_filters(
                self.kernels, strict=config.strict_factorization)
            self.partitioned_filters = self.filters.without_cross_time()
        self.record = record_indices(self.grids.n_steps, config.report_stride)
        self.times = self.grids.t[self.record]
        self.config_hash = config.config_hash

    # chunk workers ---------------------------------------------------------------

    def _chunks(self, start: int, stop: int):
        size = self.config.chunk_size
        lo = start
        while lo < stop:
            hi = min((lo // size + 1) * size, stop)
            yield lo, hi
            lo = hi

    def _noise(self, lo: int, hi: int, filters):
        if self.noiseless:
            return None
        return synthesize(filters, draw_white_batch(self.config.seed, range(lo, hi), self.grids))

    def _imaginary_endpoints(self, lo: int, hi: int):
        noise = self._noise(lo, hi, self.filters)
        mu = np.zeros((hi - lo, self.grids.m_steps + 1), complex) if noise is None else noise.mu
        rho, div = evolve_imaginary_batch(mu, self.protocol, self.grids, self.spec.hbar)
        if self.config.normalization == "trajectory":
            rho = rho / (rho[:, 0, 0] + rho[:, 1, 1])[:, None, None]
        return rho, div, noise

    def _trajectories(self, lo: int, hi: int, mode: EvolutionMode, matched_rho=None):
        """Recorded real-time trajectories for indices lo..hi-1 and an accepted mask."""
        g, hbar = self.grids, self.spec.hbar
        stride = self.config.report_stride
        if mode is EvolutionMode.ESLE:
            rho0, div_i, noise = self._imaginary_endpoints(lo, hi)
            rho0 = np.where(np.isfinite(rho0), rho0, 0)
        else:
            noise = self._noise(lo, hi, self.partitioned_filters)
            rho0 = np.broadcast_to(initial_condition(mode, matched_rho, self.protocol, self.spec),
                                   (hi - lo, 2, 2))
            div_i = np.full(hi - lo, -1)
        eta, nu = (None, None) if noise is None else (noise.eta, noise.nu)
        traj, div_r = evolve_real_batch(rho0, eta, nu, self.protocol, g, hbar, stride)
        return traj, (div_i < 0) & (div_r < 0)

    def _chunk_stats(self, lo: int, hi: int, mode, matched_rho):
        traj, ok = self._trajectories(lo, hi, mode, matched_rho)
        return EnsembleStats.from_batch(self.config_hash, self.times, traj[ok],
                                        int((~ok).sum()), hi)

    def _imaginary_chunk(self, lo: int, hi: int):
        rho, div, _ = self._imaginary_endpoints(lo, hi)
        ok = div < 0
        return rho[ok].sum(axis=0), int(ok.sum()), int((~ok).sum())

    # drivers ---------------------------------------------------------------------

    def _map_chunks(self, fn, start, stop, threads):
        chunks = list(self._chunks(start, stop))
        if threads <= 1:
            for lo, hi in chunks:
                yield hi, fn(lo, hi)
            return
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (lo, hi), res in zip(chunks, pool.map(lambda c: fn(*c), chunks)):
                yield hi, res

    def matched_initial_state(self, runs: int, threads: int = 1):
        """Phase 1 of the matched mode: ensemble-average imaginary-time endpoint
        over the same trajectory indices as the real-time phase."""
        total = np.zeros((2, 2), complex)
        count = diverged = 0
        for _, (s, c, d) in self._map_chunks(self._imaginary_chunk, 0, runs, threads):
            total = total + s
            count += c
            diverged += d
        if count == 0:
            raise EnsembleError("every imaginary-time trajectory diverged")
        return initial_condition(EvolutionMode.SLE_MATCHED, total / count), count, diverged

    def run(self, runs: int | None = None, *, threads: int | None = None,
            checkpoint_path=None, resume_from=None,
            progress: Callable[[EnsembleStats], None] | None = None) -> EnsembleResult:
        cfg = self.config
        runs = cfg.runs if runs is None else int(runs)
        threads = thread_count() if threads is None else max(1, int(threads))
        matched_rho = None
        im_count = im_div = 0
        stats = EnsembleStats(self.config_hash, self.times)
        if resume_from is not None:
            stats, extra, arrays = load_checkpoint(resume_from, self.config_hash)
            if not np.array_equal(stats.times, self.times):
                raise CheckpointError("checkpoint was recorded on a different time grid")
            if self.mode is EvolutionMode.SLE_MATCHED:
                if "matched_rho" not in arrays:
                    raise CheckpointError("matched-mode checkpoint lacks the initial state")
                matched_rho = arrays["matched_rho"]
                im_count, im_div = extra.get("imaginary_count", 0), extra.get("imaginary_diverged", 0)
            if stats.next_index > runs:
                raise CheckpointError(
                    f"checkpoint already covers {stats.next_index} trajectories (> {runs})")
        if self.mode is EvolutionMode.SLE_MATCHED and matched_rho is None:
            matched_rho, im_count, im_div = self.matched_initial_state(runs, threads)

        def checkpoint(st):
            extra = {"imaginary_count": im_count, "imaginary_diverged": im_div}
            arrays = {"matched_rho": matched_rho} if matched_rho is not None else {}
            save_checkpoint(st, checkpoint_path, extra=extra, arrays=arrays)

        every = cfg.checkpoint_every
        last_ckpt = stats.next_index
        budget = DIVERGENCE_LIMIT * runs
        fn = lambda lo, hi: self._chunk_stats(lo, hi, self.mode, matched_rho)  # noqa: E731
        for hi, part in self._map_chunks(fn, stats.next_index, runs, threads):
            stats = stats.merge(part)
            if stats.diverged > budget and stats.diverged > 0:
                if checkpoint_path is not None:
                    checkpoint(stats)
                raise EnsembleError(
                    f"{stats.diverged} of {runs} trajectories diverged "
                    f"(limit {DIVERGENCE_LIMIT:.0%}); aborting")
            if progress is not None:
                progress(stats)
            if checkpoint_path is not None and every > 0 and hi - last_ckpt >= every:
                checkpoint(stats)
                last_ckpt = hi
        if checkpoint_path is not None:
            checkpoint(stats)
        if stats.count == 0:
            raise EnsembleError("every trajectory diverged")
        notes = []
        if stats.diverged:
            msg = f"{stats.diverged} of {stats.launched} trajectories diverged and were excluded"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        return EnsembleResult(stats, stats.observables(), matched_rho, im_count, im_div, notes)


def run_ensemble(config: RunConfig, **kwargs) -> EnsembleResult:
    """Sample, evolve and average ``config.runs`` trajectories."""
    return Simulation(config).run(**kwargs)


# --- paired ESLE / matched comparison ----------------------------------------------

_PAIR_CH = ("sz_esle", "sx_esle", "tr_esle", "sz_matched", "sx_matched", "tr_matched")


@dataclass(frozen=True)
class PairedResult:
    """ESLE and matched-SLE series driven by identical white noise, and the
    difference of their <sigma_x> and <sigma_z> with paired SEMs."""

    esle: ObservableSeries
    matched: ObservableSeries
    t: np.ndarray
    dsx: np.ndarray
    dsx_sem: np.ndarray
    dsz: np.ndarray
    dsz_sem: np.ndarray
    matched_rho: np.ndarray
    count: int
    diverged: int


def _paired_difference(mom: Moments, a_e, t_e, a_m, t_m):
    """Delta-method mean and SEM of mean(a_e)/mean(t_e) - mean(a_m)/mean(t_m)."""
    me, mm = mom.mean[:, t_e], mom.mean[:, t_m]
    re = mom.mean[:, a_e] / me
    rm = mom.mean[:, a_m] / mm
    # influence function: (a_e - re t_e)/me - (a_m - rm t_m)/mm
    coef = {a_e: 1 / me, t_e: -re / me, a_m: -1 / mm, t_m: rm / mm}
    var = np.zeros_like(re)
    for i, ci in coef.items():
        for j, cj in coef.items():
            var = var + ci * cj * mom.cov(i, j)
    return re - rm, np.sqrt(np.maximum(var, 0.0) / max(mom.n, 1))


def run_paired_difference(config: RunConfig, runs: int | None = None, *,
                          threads: int | None = None) -> PairedResult:
    """Run ESLE and SLE_MATCHED on the same trajectory indices (same whites)."""
    sim = Simulation(config.replace(mode=EvolutionMode.ESLE))
    runs = config.runs if runs is None else int(runs)
    threads = thread_count() if threads is None else max(1, int(threads))
    matched_rho, _, _ = sim.matched_initial_state(runs, threads)
    pairs = tuple((i, j) for i in range(6) for j in range(i + 1, 6))

    def chunk(lo, hi):
        te, ok_e = sim._trajectories(lo, hi, EvolutionMode.ESLE)
        tm, ok_m = sim._trajectories(lo, hi, EvolutionMode.SLE_MATCHED, matched_rho)
        ok = ok_e & ok_m
        te, tm = te[ok], tm[ok]
        ce, cm = channel_values(te), channel_values(tm)
        sel = [_CH["re_sz"], _CH["re_sx"], _CH["re_tr"]]
        joint = np.concatenate([ce[..., sel], cm[..., sel]], axis=-1)
        bad = int((~ok).sum())
        return (EnsembleStats.from_batch(sim.config_hash, sim.times, te, bad, hi),
                EnsembleStats.from_batch(sim.config_hash, sim.times, tm, bad, hi),
                Moments.from_batch(joint, pairs))

    se = EnsembleStats(sim.config_hash, sim.times)
    sm = EnsembleStats(sim.config_hash, sim.times)
    joint = Moments.empty(sim.times.size, 6, pairs)
    for _, (a, b, j) in sim._map_chunks(chunk, 0, runs, threads):
        se, sm, joint = se.merge(a), sm.merge(b), joint.merge(j)
        if se.diverged > DIVERGENCE_LIMIT * runs:
            raise EnsembleError(f"{se.diverged} of {runs} paired trajectories diverged")
    if se.count == 0:
        raise EnsembleError("every paired trajectory diverged")
    dsx, dsx_sem = _paired_difference(joint, 1, 2, 4, 5)
    dsz, dsz_sem = _paired_difference(joint, 0, 2, 3, 5)
    return PairedResult(se.observables(), sm.observables(), sim.times, dsx, dsx_sem, dsz,
                        dsz_sem, matched_rho, se.count, se.diverged)
