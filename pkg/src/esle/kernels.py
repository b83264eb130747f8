"""Ohmic bath correlation kernels sampled on the real- and imaginary-time grids.

All four kernels are boundary values of one complex-time correlation function
of the bath coordinate,

    C(z) = (1/pi) int_0^inf I(w) [(1 + n(w)) exp(-i w z) + n(w) exp(i w z)] dw,

with z = t - i*tau, 0 <= tau <= beta*hbar and n(w) = 1/(exp(beta hbar w) - 1):

    K_eta_eta(t)      =  hbar * Re C(t)
    K_eta_nu(t)       =  2i * Theta(t) * Im C(t)
    K_mu_mu(s)        =  hbar * C(-i|s|)
    K_eta_mu(t, tau)  = -hbar * C(t - i tau)

``C`` is evaluated as a zero-temperature part (the ``1`` in ``1 + n``) in
closed form through exponential integrals, plus a thermal part carrying
``n(w)``, which decays exponentially in frequency and is integrated with
composite Gauss-Legendre quadrature.  Points with tau > beta*hbar/2 are mapped
to the lower half of the strip with the KMS relation
C(t - i tau) = C(-t - i(beta hbar - tau)) so the thermal integrand always
decays at least like exp(-w beta hbar / 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.special import exp1

from .errors import DomainError, QuadratureError

__all__ = [
    "BathSpec",
    "TimeGrids",
    "KernelTable",
    "ohmic_spectral_density",
    "bath_correlation",
    "k_eta_eta",
    "k_eta_nu",
    "k_mu_mu",
    "k_eta_mu",
    "build_kernel_table",
    "next_pow2",
]

_GL_ORDER = 16
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)
_QUAD_RTOL = 1e-11
_MAX_DOUBLINGS = 8
_ASYMPTOTIC_RADIUS = 40.0
_ASYMPTOTIC_TERMS = 32
_ASYMPTOTIC_COEFFS = np.array(
    [(-1.0) ** k * float(factorial(k)) for k in range(_ASYMPTOTIC_TERMS)]
)


@dataclass(frozen=True)
class BathSpec:
    """Ohmic bath and thermodynamic parameters, in units where Delta = 1."""

    alpha: float
    omega_c: float
    beta: float
    hbar: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise DomainError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("omega_c", "beta", "hbar"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be > 0, got {value}")

    @property
    def beta_hbar(self) -> float:
        """Length of the imaginary-time domain."""
        return self.beta * self.hbar


def next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


@dataclass(frozen=True)
class TimeGrids:
    """Uniform real-time grid t_i = t0 + i*dt (i = 0..N) and imaginary-time
    grid tau_j = j*dtau (j = 0..M) covering [0, beta*hbar]."""

    t0: float
    dt: float
    n_steps: int
    dtau: float
    m_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise DomainError(f"dt must be > 0, got {self.dt}")
        if not (np.isfinite(self.dtau) and self.dtau > 0):
            raise DomainError(f"dtau must be > 0, got {self.dtau}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        if int(self.m_steps) != self.m_steps or self.m_steps < 1:
            raise DomainError(f"m_steps must be an integer >= 1, got {self.m_steps}")
        if not np.isfinite(self.t0):
            raise DomainError("t0 must be finite")

    @classmethod
    def for_bath(cls, spec: BathSpec, *, t0: float, dt: float, n_steps: int,
                 m_steps: int) -> "TimeGrids":
        return cls(t0=float(t0), dt=float(dt), n_steps=int(n_steps),
                   dtau=spec.beta_hbar / int(m_steps), m_steps=int(m_steps))

    def check(self, spec: BathSpec) -> None:
        """Raise unless the imaginary grid spans exactly [0, beta*hbar]."""
        span = self.m_steps * self.dtau
        if abs(span - spec.beta_hbar) > 1e-12 * spec.beta_hbar:
            raise DomainError(
                f"m_steps*dtau = {span!r} does not match beta*hbar = {spec.beta_hbar!r}"
            )

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def elapsed(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def tau(self) -> np.ndarray:
        return self.dtau * np.arange(self.m_steps + 1)

    @property
    def pad_len(self) -> int:
        """Zero-padded DFT length for real-time convolutions."""
        return next_pow2(2 * (self.n_steps + 1))

    @property
    def mu_period(self) -> int:
        """Number of samples in one period of the doubled domain [-beta hbar, beta hbar)."""
        return 2 * self.m_steps


def ohmic_spectral_density(omega, spec: BathSpec):
    """I(w) = alpha * w / (1 + (w/w_c)^2)^2."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("spectral density is defined for finite omega >= 0")
    out = spec.alpha * w / (1.0 + (w / spec.omega_c) ** 2) ** 2
    return out[()] if out.ndim == 0 else out


# --- zero-temperature part ------------------------------------------------

def _exp_e1_upper(zeta: np.ndarray) -> np.ndarray:
    """exp(zeta) * E1(zeta) for Im(zeta) >= 0, taking the limit from above on
    the negative real axis."""
    out = np.empty_like(zeta)
    big = np.abs(zeta) > _ASYMPTOTIC_RADIUS
    if np.any(big):
        inv = 1.0 / zeta[big]
        acc = np.zeros_like(inv)
        for c in _ASYMPTOTIC_COEFFS[::-1]:
            acc = acc * inv + c
        out[big] = acc * inv
    small = ~big
    if np.any(small):
        z = zeta[small]
        out[small] = np.exp(z) * exp1(z)
    return out


def _zero_temperature(t: np.ndarray, tau: np.ndarray, spec: BathSpec) -> np.ndarray:
    """(1/pi) int_0^inf I(w) exp(-w (tau + i t)) dw in closed form.

    Uses w/(w^2 + a^2)^2 = [(w - ia)^-2 - (w + ia)^-2] / (4ia) and
    int_0^inf exp(-s w)/(w + b)^2 dw = 1/b - s exp(s b) E1(s b).
    """
    a = spec.omega_c
    t, tau = np.broadcast_arrays(np.asarray(t, float), np.asarray(tau, float))
    s = tau + 1j * t
    # s*(ia) = -a t + i a tau  (upper half plane for tau >= 0)
    z_plus = np.empty(t.shape, complex)
    z_plus.real = -a * t
    z_plus.imag = a * tau
    # s*(-ia) = a t - i a tau is the conjugate of (a t + i a tau)
    z_minus_c = np.empty(t.shape, complex)
    z_minus_c.real = a * t
    z_minus_c.imag = a * tau
    with np.errstate(invalid="ignore"):
        g_plus = _exp_e1_upper(z_plus)
        g_minus = np.conj(_exp_e1_upper(z_minus_c))
        p_minus = 1.0 / (-1j * a) - s * g_minus
        p_plus = 1.0 / (1j * a) - s * g_plus
        out = spec.alpha * a**4 / np.pi * (p_minus - p_plus) / (4j * a)
    origin = (t == 0) & (tau == 0)
    out[origin] = spec.alpha * a**2 / (2 * np.pi)
    return out


# --- thermal part -----------------------------------------------------------

def _thermal_weight(omega: np.ndarray, spec: BathSpec) -> np.ndarray:
    """I(w) n(w), finite at w -> 0 where it tends to alpha/(beta hbar)."""
    bh = spec.beta_hbar
    return (spec.alpha / (1.0 + (omega / spec.omega_c) ** 2) ** 2
            * omega / np.expm1(bh * omega))


def _gl_nodes(omega_max: float, panels: int):
    edges = np.linspace(0.0, omega_max, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def _thermal_block(t, tau, sin_sign, nodes, weights, spec, chunk=2_000_000):
    """(2/pi) sum_k w_k f(w_k) cos(w_k (t - i tau)) on the tensor grid t x tau."""
    f = weights * _thermal_weight(nodes, spec) * (2.0 / np.pi)
    wt = nodes[:, None] * tau[None, :]
    bc = f[:, None] * np.cosh(wt)
    bs = f[:, None] * np.sinh(wt) * sin_sign[None, :]
    out = np.empty((t.size, tau.size), complex)
    rows = max(1, chunk // max(nodes.size, 1))
    for start in range(0, t.size, rows):
        phase = np.outer(t[start:start + rows], nodes)
        out.real[start:start + rows] = np.cos(phase) @ bc
        out.imag[start:start + rows] = np.sin(phase) @ bs
    return out


def _thermal(t, tau, sin_sign, spec, scale_hint):
    """Thermal part with panel doubling until successive estimates agree."""
    bh = spec.beta_hbar
    tau_max = float(tau.max()) if tau.size else 0.0
    omega_max = 38.0 / (bh - tau_max)
    t_max = float(np.abs(t).max()) if t.size else 0.0
    h = min(spec.omega_c / 2.0, 2.0 / bh)
    if t_max > 0:
        h = min(h, 6.0 / t_max)
    panels = max(4, int(np.ceil(omega_max / h)))

    if t.size > 16:
        probe = np.unique(np.r_[np.linspace(0, t.size - 1, 15).astype(int),
                                np.argmax(np.abs(t))])
    else:
        probe = np.arange(t.size)
    tp = t[probe]

    previous = _thermal_block(tp, tau, sin_sign, *_gl_nodes(omega_max, panels), spec)
    for _ in range(_MAX_DOUBLINGS):
        refined = _thermal_block(tp, tau, sin_sign,
                                 *_gl_nodes(omega_max, 2 * panels), spec)
        scale = max(scale_hint, float(np.abs(refined).max()), 1e-300)
        diff = np.abs(refined - previous)
        if diff.max() <= _QUAD_RTOL * scale:
            if probe.size == t.size:
                return previous
            return _thermal_block(t, tau, sin_sign, *_gl_nodes(omega_max, panels), spec)
        previous = refined
        panels *= 2
    worst = np.unravel_index(np.argmax(diff), diff.shape)
    raise QuadratureError(
        "thermal quadrature did not converge",
        location=(float(tp[worst[0]]), float(tau[worst[1]])),
        estimate=float(diff.max() / scale),
        tolerance=_QUAD_RTOL,
    )


def _correlation_grid(t, tau_reduced, flip, spec):
    """C(t_i - i tau_j) on a tensor grid, columns already reduced to
    tau <= beta hbar / 2; ``flip[j]`` marks columns reached through KMS
    reflection, for which t is replaced by -t."""
    t = np.asarray(t, float)
    tau_reduced = np.asarray(tau_reduced, float)
    sign = np.where(flip, -1.0, 1.0)
    t_eff = t[:, None] * sign[None, :]
    zero_t = _zero_temperature(t_eff, np.broadcast_to(tau_reduced, t_eff.shape), spec)
    scale = float(np.abs(zero_t).max()) if zero_t.size else 0.0
    return zero_t + _thermal(t, tau_reduced, sign, spec, scale)


def _reduce_tau(tau, spec):
    tau = np.asarray(tau, float)
    bh = spec.beta_hbar
    flip = tau > 0.5 * bh
    return np.where(flip, bh - tau, tau), flip


def bath_correlation(t, tau, spec: BathSpec):
    """C(t - i tau) for scalar or 1-d ``t`` and ``tau`` (outer product grid)."""
    t_arr = np.atleast_1d(np.asarray(t, float))
    tau_arr = np.atleast_1d(np.asarray(tau, float))
    bh = spec.beta_hbar
    if np.any(tau_arr < 0) or np.any(tau_arr > bh * (1 + 1e-14)):
        raise DomainError(f"tau must lie in [0, beta*hbar] = [0, {bh}]")
    tau_arr = np.minimum(tau_arr, bh)
    reduced, flip = _reduce_tau(tau_arr, spec)
    out = _correlation_grid(t_arr, reduced, flip, spec)
    if np.ndim(t) == 0 and np.ndim(tau) == 0:
        return out[0, 0]
    if np.ndim(tau) == 0:
        return out[:, 0]
    if np.ndim(t) == 0:
        return out[0, :]
    return out


def _shape_like(values, template):
    return values.reshape(np.shape(template))[()]


def k_eta_eta(t_lag, spec: BathSpec):
    """<eta(t) eta(t')> as a function of t - t'; even in the lag."""
    t = np.abs(np.atleast_1d(np.asarray(t_lag, float)).ravel())
    if spec.alpha == 0:
        return _shape_like(np.zeros(t.size), t_lag)
    vals = spec.hbar * _correlation_grid(t, np.zeros(1), np.zeros(1, bool), spec)[:, 0].real
    return _shape_like(vals, t_lag)


def k_eta_nu(t_lag, spec: BathSpec):
    """<eta(t) nu(t')>, purely imaginary and zero for t - t' <= 0."""
    t = np.atleast_1d(np.asarray(t_lag, float)).ravel()
    out = np.zeros(t.size, complex)
    pos = t > 0
    if spec.alpha > 0 and np.any(pos):
        # the thermal part of C is real on the real axis
        out.imag[pos] = 2.0 * _zero_temperature(t[pos], np.zeros(pos.sum()), spec).imag
    return _shape_like(out, t_lag)


def k_mu_mu(tau_lag, spec: BathSpec):
    """<mu(tau) mu(tau')> for |tau - tau'| <= beta hbar; even and
    beta*hbar-periodic."""
    s = np.abs(np.atleast_1d(np.asarray(tau_lag, float)).ravel())
    bh = spec.beta_hbar
    if np.any(s > bh * (1 + 1e-14)):
        raise DomainError(f"|tau_lag| must not exceed beta*hbar = {bh}")
    if spec.alpha == 0:
        return _shape_like(np.zeros(s.size), tau_lag)
    reduced, flip = _reduce_tau(np.minimum(s, bh), spec)
    # C(-i s) is real and even in t, so the KMS flip of t = 0 is harmless
    vals = spec.hbar * _correlation_grid(np.zeros(1), reduced, flip, spec)[0].real
    return _shape_like(vals, tau_lag)


def k_eta_mu(t, tau, spec: BathSpec):
    """<eta(t) mu(tau)> with t measured from the start of the real-time
    evolution and 0 <= tau <= beta hbar."""
    t_arr = np.asarray(t, float)
    if np.any(t_arr < 0):
        raise DomainError("k_eta_mu requires t >= 0")
    if spec.alpha == 0:
        t_b, tau_b = np.broadcast_arrays(t_arr, np.asarray(tau, float))
        bh = spec.beta_hbar
        if np.any(tau_b < 0) or np.any(tau_b > bh * (1 + 1e-14)):
            raise DomainError(f"tau must lie in [0, beta*hbar] = [0, {bh}]")
        return np.zeros(t_b.shape, complex)[()]
    return -spec.hbar * bath_correlation(t, tau, spec)


@dataclass(frozen=True)
class KernelTable:
    """The four physical kernels tabulated on a pair of grids.

    ``k_eta_eta`` and ``k_eta_nu`` are indexed by real-time lag 0..N,
    ``k_mu_mu`` by imaginary-time lag -M..M (entry ``M + k`` holds lag k),
    ``k_eta_mu[i, j]`` holds K_eta_mu(i*dt, j*dtau).
    """

    spec: BathSpec
    grids: TimeGrids
    k_eta_eta: np.ndarray
    k_eta_nu: np.ndarray
    k_mu_mu: np.ndarray
    k_eta_mu: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n, m = self.grids.n_steps, self.grids.m_steps
        shapes = {
            "k_eta_eta": (n + 1,),
            "k_eta_nu": (n + 1,),
            "k_mu_mu": (2 * m + 1,),
            "k_eta_mu": (n + 1, m + 1),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise QuadratureError(f"{name} contains non-finite entries")
            arr.setflags(write=False)

    def eta_eta_at(self, lag: int) -> float:
        """Reflecting reader for the stored half table."""
        return float(self.k_eta_eta[abs(lag)])

    def mu_mu_at(self, lag: int) -> float:
        return float(self.k_mu_mu[self.grids.m_steps + lag])


def build_kernel_table(spec: BathSpec, grids: TimeGrids) -> KernelTable:
    """Sample all four kernels at exactly the grid lags and points."""
    grids.check(spec)
    n, m = grids.n_steps, grids.m_steps
    if spec.alpha == 0:
        return KernelTable(spec, grids, np.zeros(n + 1), np.zeros(n + 1, complex),
                           np.zeros(2 * m + 1), np.zeros((n + 1, m + 1), complex))

    lags_t = grids.dt * np.arange(n + 1)
    # columns j > M/2 are reached by KMS reflection onto index M - j so that
    # symmetric columns are computed from identical arguments
    j = np.arange(m + 1)
    flip = 2 * j > m
    reduced = grids.dtau * np.where(flip, m - j, j)
    try:
        c_mixed = _correlation_grid(lags_t, reduced, flip, spec)
    except QuadratureError as exc:
        raise QuadratureError(f"kernel table: {exc}", location=exc.location,
                              estimate=exc.estimate, tolerance=exc.tolerance) from exc

    c_real = _correlation_grid(lags_t, np.zeros(1), np.zeros(1, bool), spec)[:, 0]
    k_ee = spec.hbar * c_real.real
    k_en = np.zeros(n + 1, complex)
    k_en.imag[1:] = 2.0 * _zero_temperature(lags_t[1:], np.zeros(n), spec).imag

    half = spec.hbar * c_mixed[0].real  # C(-i tau_j), j = 0..M
    k_mm = np.concatenate([half[:0:-1], half])
    k_em = -spec.hbar * c_mixed
    return KernelTable(spec, grids, k_ee, k_en, k_mm, k_em)
