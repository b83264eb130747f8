"""Correlated noise synthesis from six white streams and covariance checks.

Streams per trajectory (stream ids 0..5): x1, x2, x3 in real time and
xb1, xb2, xb3 in imaginary time.  Each one comes from its own Philox
substream keyed by (seed, trajectory index) with the stream id in the
counter, so any trajectory can be regenerated in isolation.

The noises are assembled as

    eta = G_ee * x1 + G_en * (x2 + i x3) + dtau G_em (xb2 + i xb3)
    nu  = x3 + i x2
    mu  = G_mm * xb1 + (xb3 + i xb2)

Sharing x2, x3 between eta and nu (and xb2, xb3 between eta and mu) is what
produces the cross-correlations; every other pair is independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .filters import FilterSet
from .kernels import KernelTable, TimeGrids

__all__ = [
    "STREAMS",
    "WhiteDraw",
    "NoiseRealization",
    "substream",
    "draw_whites",
    "draw_white_batch",
    "synthesize",
    "generate",
    "CovarianceAccumulator",
    "CovarianceReport",
    "verify_covariances",
]

STREAMS = ("x1", "x2", "x3", "xb1", "xb2", "xb3")
_SEED_MASK = (1 << 64) - 1


def substream(seed: int, index: int, stream_id: int) -> np.random.Generator:
    """Independent Philox generator for one (seed, trajectory, stream) triple."""
    key = [int(seed) & _SEED_MASK, int(index) & _SEED_MASK]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(stream_id), 0]))


def _stream_lengths(grids: TimeGrids) -> tuple[int, ...]:
    n1, m1 = grids.n_steps + 1, grids.m_steps + 1
    # x1 and xb1 feed circular convolutions and span a full period
    return (grids.pad_len, n1, n1, grids.mu_period, m1, m1)


@dataclass(frozen=True)
class WhiteDraw:
    """Six white vectors (or stacks of them, leading axis = trajectory).

    Entries have variance 1/dt (real time) or 1/dtau (imaginary time).
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    xb1: np.ndarray
    xb2: np.ndarray
    xb3: np.ndarray

    @property
    def batched(self) -> bool:
        return self.x1.ndim == 2


@dataclass(frozen=True)
class NoiseRealization:
    """eta and nu on the real-time grid, mu on the imaginary-time grid.

    Arrays carry a leading trajectory axis when produced in batches.
    """

    eta: np.ndarray
    nu: np.ndarray
    mu: np.ndarray

    def __len__(self) -> int:
        return self.eta.shape[0] if self.eta.ndim == 2 else 1

    def rows(self) -> Iterator["NoiseRealization"]:
        if self.eta.ndim == 1:
            yield self
            return
        for k in range(self.eta.shape[0]):
            yield NoiseRealization(self.eta[k], self.nu[k], self.mu[k])


def draw_whites(seed: int, index: int, grids: TimeGrids) -> WhiteDraw:
    """White streams for trajectory ``index``."""
    scale_t = 1.0 / np.sqrt(grids.dt)
    scale_tau = 1.0 / np.sqrt(grids.dtau)
    out = []
    for sid, n in enumerate(_stream_lengths(grids)):
        scale = scale_t if sid < 3 else scale_tau
        out.append(substream(seed, index, sid).standard_normal(n) * scale)
    return WhiteDraw(*out)


def draw_white_batch(seed: int, indices: Sequence[int], grids: TimeGrids) -> WhiteDraw:
    """Stacked white streams; row k equals ``draw_whites(seed, indices[k])``."""
    lengths = _stream_lengths(grids)
    arrays = [np.empty((len(indices), n)) for n in lengths]
    for row, r in enumerate(indices):
        for sid, n in enumerate(lengths):
            substream(seed, r, sid).standard_normal(out=arrays[sid][row])
    for sid in range(6):
        arrays[sid] *= 1.0 / np.sqrt(grids.dt if sid < 3 else grids.dtau)
    return WhiteDraw(*arrays)


def synthesize(filters: FilterSet, whites: WhiteDraw) -> NoiseRealization:
    """Filter white streams into (eta, nu, mu); works on single draws and stacks."""
    g = filters.grids
    n1, m1 = g.n_steps + 1, g.m_steps + 1
    if (whites.x1.shape[-1] != g.pad_len or whites.x2.shape[-1] != n1
            or whites.xb1.shape[-1] != g.mu_period or whites.xb2.shape[-1] != m1):
        raise ConfigError("white-noise streams were drawn on different grids than the filters")
    fft, ifft = np.fft.fft, np.fft.ifft

    eta = ifft(filters.g_eta_eta_spectrum * fft(whites.x1))[..., :n1].real.astype(complex)
    w = whites.x2 + 1j * whites.x3
    eta += ifft(filters.g_eta_nu_spectrum * fft(w, n=g.pad_len))[..., :n1]
    wb = whites.xb2 + 1j * whites.xb3
    eta += g.dtau * (wb @ filters.g_eta_mu_matrix.T)

    cw = filters.companion_weight
    nu = cw * (whites.x3 + 1j * whites.x2)
    mu = ifft(filters.g_mu_mu_spectrum * fft(whites.xb1))[..., :m1].real.astype(complex)
    mu += cw * (whites.xb3 + 1j * whites.xb2)
    return NoiseRealization(eta, nu, mu)


def generate(filters: FilterSet, seed: int, count: int, *, start: int = 0,
             batch: int = 1000) -> Iterator[NoiseRealization]:
    """Batched realizations for trajectory indices start .. start+count-1."""
    for lo in range(start, start + count, batch):
        hi = min(lo + batch, start + count)
        yield synthesize(filters, draw_white_batch(seed, range(lo, hi), filters.grids))


_PAIRS = {
    "eta_eta": ("eta", "eta"),
    "eta_nu": ("eta", "nu"),
    "nu_nu": ("nu", "nu"),
    "mu_mu": ("mu", "mu"),
    "eta_mu": ("eta", "mu"),
    "nu_mu": ("nu", "mu"),
}


@dataclass
class CovarianceAccumulator:
    """Running bilinear sums sum_r a_r b_r^T (no conjugation) and means.

    Plain sums merge associatively, so partial accumulators from different
    workers can be combined with ``merge``.
    """

    n1: int
    m1: int
    count: int = 0
    sums: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)

    def __post_init__(self):
        size = {"eta": self.n1, "nu": self.n1, "mu": self.m1}
        for name, (a, b) in _PAIRS.items():
            self.sums.setdefault(name, np.zeros((size[a], size[b]), complex))
        for name, n in size.items():
            self.means.setdefault(name, np.zeros(n, complex))

    def add(self, noise: NoiseRealization) -> None:
        arrays = {k: np.atleast_2d(getattr(noise, k)) for k in ("eta", "nu", "mu")}
        for name, (a, b) in _PAIRS.items():
            self.sums[name] += arrays[a].T @ arrays[b]
        for k, v in arrays.items():
            self.means[k] += v.sum(axis=0)
        self.count += arrays["eta"].shape[0]

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        out = CovarianceAccumulator(self.n1, self.m1, self.count + other.count)
        for k in _PAIRS:
            out.sums[k] = self.sums[k] + other.sums[k]
        for k in self.means:
            out.means[k] = self.means[k] + other.means[k]
        return out

    def sample(self, name: str) -> np.ndarray:
        if self.count < 2:
            raise InsufficientDataError(
                f"need at least 2 realizations, have {self.count}")
        return self.sums[name] / self.count


def _targets(kernels: KernelTable) -> dict:
    n1 = kernels.grids.n_steps + 1
    m = kernels.grids.m_steps
    i = np.arange(n1)
    lag = i[:, None] - i[None, :]
    j = np.arange(m + 1)
    k_en = np.where(lag > 0, kernels.k_eta_nu[np.clip(lag, 0, n1 - 1)], 0.0)
    return {
        "eta_eta": kernels.k_eta_eta[np.abs(lag)].astype(complex),
        "eta_nu": k_en,
        "nu_nu": np.zeros((n1, n1), complex),
        "mu_mu": kernels.k_mu_mu[m + j[:, None] - j[None, :]].astype(complex),
        "eta_mu": np.asarray(kernels.k_eta_mu, complex),
        "nu_mu": np.zeros((n1, m + 1), complex),
    }


KERNEL_CORRELATORS = ("eta_eta", "eta_nu", "mu_mu", "eta_mu")
ZERO_CORRELATORS = ("nu_nu", "nu_mu")


@dataclass(frozen=True)
class CovarianceReport:
    """Sample correlators against their targets after ``runs`` realizations.

    ``rms`` uses the complex modulus of the deviation, ``rms_re`` the real
    part only.  ``max_zero`` is the largest modulus among entries of the
    correlators that should vanish.
    """

    runs: int
    rms: dict
    rms_re: dict
    max_zero: float
    max_zero_by_name: dict
    max_mean: dict
    samples: dict
    targets: dict
    history: tuple = ()

    def row(self) -> dict:
        return {"runs": self.runs, **{f"rms_{k.replace('_', '')}": self.rms[k]
                                      for k in KERNEL_CORRELATORS},
                "rms_re_etaeta": self.rms_re["eta_eta"], "max_zero_correlator": self.max_zero}

    def slope(self, name: str = "eta_eta", *, real: bool = True) -> float:
        """Least-squares log-log slope of RMS against runs over ``history``."""
        if len(self.history) < 2:
            raise InsufficientDataError("need at least two snapshots for a slope")
        runs = np.array([h.runs for h in self.history], float)
        vals = np.array([(h.rms_re if real else h.rms)[name] for h in self.history])
        return float(np.polyfit(np.log(runs), np.log(vals), 1)[0])


def _report(acc: CovarianceAccumulator, targets: dict, history=()) -> CovarianceReport:
    samples = {k: acc.sample(k) for k in _PAIRS}
    rms, rms_re = {}, {}
    for k in KERNEL_CORRELATORS:
        d = samples[k] - targets[k]
        rms[k] = float(np.sqrt(np.mean(np.abs(d) ** 2)))
        rms_re[k] = float(np.sqrt(np.mean(d.real**2)))
    zero = {k: float(np.abs(samples[k]).max()) for k in ZERO_CORRELATORS}
    max_mean = {k: float(np.abs(v / acc.count).max()) for k, v in acc.means.items()}
    return CovarianceReport(acc.count, rms, rms_re, max(zero.values()), zero, max_mean,
                            samples, targets, tuple(history))


def verify_covariances(realizations: Iterable[NoiseRealization], kernels: KernelTable, *,
                       snapshots: Sequence[int] = ()) -> CovarianceReport:
    """Accumulate bilinear sample correlators and compare with the kernels.

    ``snapshots`` lists run counts at which intermediate reports are kept in
    ``history`` (batches are split as needed so counts are exact).
    """
    g = kernels.grids
    acc = CovarianceAccumulator(g.n_steps + 1, g.m_steps + 1)
    targets = _targets(kernels)
    marks = sorted({int(s) for s in snapshots if s >= 2})
    history = []
    for noise in realizations:
        eta, nu, mu = (np.atleast_2d(a) for a in (noise.eta, noise.nu, noise.mu))
        lo = 0
        while lo < eta.shape[0]:
            hi = eta.shape[0]
            if marks and acc.count + (hi - lo) >= marks[0]:
                hi = lo + marks[0] - acc.count
            acc.add(NoiseRealization(eta[lo:hi], nu[lo:hi], mu[lo:hi]))
            lo = hi
            if marks and acc.count == marks[0]:
                history.append(_report(acc, targets))
                marks.pop(0)
    if acc.count < 2:
        raise InsufficientDataError(f"need at least 2 realizations, have {acc.count}")
    return _report(acc, targets, history)
