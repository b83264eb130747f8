"""Filtering kernels that map white noise onto the three correlated processes.

Stationary kernels (eta-eta in real time, mu-mu in imaginary time) are
factorized in the frequency domain, K~ = |G~|^2, taking the nonnegative real
root.  The cross kernels are split with a delta function on one side, so
G_nu_eta and G_mu_eta are identities and all structure sits in G_eta_nu and
G_eta_mu.

Transforms use continuous-FT units: for samples c_k spaced by delta,
K~ = delta * fft(c).  Filtering a white vector x of variance 1/delta is then
``ifft(G~ * fft(x))`` and reproduces covariance c.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FactorizationError
from .kernels import KernelTable, TimeGrids

__all__ = [
    "SpectralFactor",
    "FilterSet",
    "CLAMP_TOLERANCE",
    "factorize",
    "even_extension",
    "build_g_eta_eta",
    "build_g_mu_mu",
    "build_g_eta_nu",
    "build_g_eta_mu",
    "build_filters",
]

CLAMP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SpectralFactor:
    """Square-root factor of one stationary kernel.

    ``kernel_spectrum`` is the raw K~ before clamping and ``spectrum`` the
    stored G~ = sqrt(max(K~, 0)).
    """

    spectrum: np.ndarray
    kernel_spectrum: np.ndarray
    delta: float
    most_negative: float
    clamped_bins: int

    def __post_init__(self):
        self.spectrum.setflags(write=False)
        self.kernel_spectrum.setflags(write=False)

    @property
    def length(self) -> int:
        return self.spectrum.size

    def autocorrelation(self) -> np.ndarray:
        """Periodic covariance sequence reproduced by this filter."""
        return np.fft.ifft(self.spectrum**2).real / self.delta

    def residual_bound(self) -> float:
        """Upper bound on |autocorrelation - sampled kernel| caused by clamping."""
        return 2.0 * abs(min(self.most_negative, 0.0)) * self.length / self.delta


def even_extension(half: np.ndarray, length: int) -> np.ndarray:
    """Periodic real even sequence with c[k] = c[length - k] = half[k]."""
    half = np.asarray(half, dtype=float)
    n = half.size - 1
    if length < 2 * n:
        raise DomainError(f"period {length} too short for {n + 1} lags")
    c = np.zeros(length)
    c[: n + 1] = half
    if n > 0:
        c[length - n:] = half[:0:-1]
    return c


def factorize(sequence: np.ndarray, delta: float, *, strict: bool = True,
              what: str = "kernel") -> SpectralFactor:
    """Nonnegative square root of the spectrum of a real even periodic sequence."""
    k_spec = delta * np.fft.fft(np.asarray(sequence, dtype=float)).real
    peak = float(k_spec.max()) if k_spec.size else 0.0
    most_negative = float(k_spec.min()) if k_spec.size else 0.0
    negative = k_spec < 0
    if most_negative < -CLAMP_TOLERANCE * max(peak, 0.0):
        msg = (f"{what}: spectrum bin {most_negative:.3e} is below "
               f"-{CLAMP_TOLERANCE:g} x max bin ({peak:.3e})")
        if strict:
            raise FactorizationError(msg, most_negative=most_negative, max_bin=peak)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    g = np.sqrt(np.where(negative, 0.0, k_spec))
    return SpectralFactor(g, k_spec, float(delta), min(most_negative, 0.0),
                          int(negative.sum()))


def build_g_eta_eta(kernel: KernelTable, grids: TimeGrids, *,
                    strict: bool = True) -> SpectralFactor:
    """Factor of K_eta_eta on a circulant embedding of length ``grids.pad_len``."""
    seq = even_extension(kernel.k_eta_eta, grids.pad_len)
    return factorize(seq, grids.dt, strict=strict, what="K_eta_eta")


def build_g_mu_mu(kernel: KernelTable, grids: TimeGrids, *,
                  strict: bool = True) -> SpectralFactor:
    """Factor of K_mu_mu, periodically extended over [-beta hbar, beta hbar)."""
    m = grids.m_steps
    seq = even_extension(kernel.k_mu_mu[m:2 * m + 1], grids.mu_period)
    return factorize(seq, grids.dtau, strict=strict, what="K_mu_mu")


def build_g_eta_nu(kernel: KernelTable, grids: TimeGrids) -> np.ndarray:
    """G~_eta_nu = -(i/2) K~_eta_nu with K_eta_nu zero padded to pad_len."""
    padded = np.zeros(grids.pad_len, complex)
    padded[: grids.n_steps + 1] = kernel.k_eta_nu
    return -0.5j * grids.dt * np.fft.fft(padded)


def build_g_eta_mu(kernel: KernelTable) -> np.ndarray:
    """G_eta_mu(t_i, tau_j) = K_eta_mu(t_i - i tau_j) / (2i)."""
    return kernel.k_eta_mu / 2j


@dataclass(frozen=True)
class FilterSet:
    """Everything noise synthesis needs.

    ``companion_weight`` scales the identity filters G_nu_eta and G_mu_eta.
    It is 1 for a coupled bath and 0 when alpha = 0, where the physical
    kernels vanish and nu must vanish with them.
    """

    grids: TimeGrids
    eta_eta: SpectralFactor
    mu_mu: SpectralFactor
    g_eta_nu_spectrum: np.ndarray
    g_eta_mu_matrix: np.ndarray
    companion_weight: float

    def __post_init__(self):
        g = self.grids
        if self.eta_eta.length != g.pad_len or self.g_eta_nu_spectrum.size != g.pad_len:
            raise DomainError("real-time spectra do not match pad_len")
        if self.mu_mu.length != g.mu_period:
            raise DomainError("imaginary-time spectrum does not match the doubled period")
        if self.g_eta_mu_matrix.shape != (g.n_steps + 1, g.m_steps + 1):
            raise DomainError("cross-time matrix does not match the grids")
        self.g_eta_nu_spectrum.setflags(write=False)
        self.g_eta_mu_matrix.setflags(write=False)

    @property
    def pad_len(self) -> int:
        return self.grids.pad_len

    @property
    def g_eta_eta_spectrum(self) -> np.ndarray:
        return self.eta_eta.spectrum

    @property
    def g_mu_mu_spectrum(self) -> np.ndarray:
        return self.mu_mu.spectrum

    def without_cross_time(self) -> "FilterSet":
        """Copy with G_eta_mu zeroed, as used by the partitioned modes."""
        return FilterSet(self.grids, self.eta_eta, self.mu_mu, self.g_eta_nu_spectrum,
                         np.zeros_like(self.g_eta_mu_matrix), self.companion_weight)

    def diagnostics(self) -> dict:
        return {
            "pad_len": self.pad_len,
            "mu_period": self.grids.mu_period,
            "eta_eta_most_negative_bin": self.eta_eta.most_negative,
            "eta_eta_clamped_bins": self.eta_eta.clamped_bins,
            "eta_eta_max_bin": float(self.eta_eta.kernel_spectrum.max()),
            "mu_mu_most_negative_bin": self.mu_mu.most_negative,
            "mu_mu_clamped_bins": self.mu_mu.clamped_bins,
            "mu_mu_max_bin": float(self.mu_mu.kernel_spectrum.max()),
        }


def build_filters(kernel: KernelTable, *, strict: bool = True) -> FilterSet:
    grids = kernel.grids
    return FilterSet(
        grids=grids,
        eta_eta=build_g_eta_eta(kernel, grids, strict=strict),
        mu_mu=build_g_mu_mu(kernel, grids, strict=strict),
        g_eta_nu_spectrum=build_g_eta_nu(kernel, grids),
        g_eta_mu_matrix=build_g_eta_mu(kernel),
        companion_weight=1.0 if kernel.spec.alpha > 0 else 0.0,
    )
