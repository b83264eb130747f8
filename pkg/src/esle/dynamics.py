"""Stochastic density-matrix trajectories for the spin-boson two-level system.

H_q(t) = eps(t) sigma_z + Delta sigma_x.  A trajectory first relaxes in
imaginary time from the identity,

    -hbar d rho/d tau = (H_q(t0) - mu(tau) sigma_z) rho        (left product),

and then propagates in real time,

    i hbar d rho/dt = [H_q(t) - eta sigma_z, rho] - (hbar/2) nu {sigma_z, rho},

both with explicit Euler steps.  Single trajectories need not stay Hermitian
or trace-one; only ensemble averages are physical.

The batched kernels take stacks of noises and return divergence steps
instead of raising, so the ensemble can count failures.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DomainError, TrajectoryDiverged
from .kernels import BathSpec, TimeGrids

__all__ = [
    "DIVERGENCE_CAP",
    "DriveProtocol",
    "EvolutionMode",
    "record_indices",
    "evolve_imaginary",
    "evolve_imaginary_batch",
    "evolve_real",
    "evolve_real_batch",
    "initial_condition",
    "gibbs_state",
    "imaginary_oracle",
    "unitary_oracle",
    "lz_survival_probability",
    "renormalized_tunneling",
]

DIVERGENCE_CAP = 1e6


class EvolutionMode(str, enum.Enum):
    ESLE = "esle"
    SLE_LZ = "sle_lz"
    SLE_MATCHED = "sle_matched"
    SLE_PARTITIONED = "sle_partitioned"

    @classmethod
    def parse(cls, value) -> "EvolutionMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise DomainError(f"unknown evolution mode {value!r}; "
                          f"expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class DriveProtocol:
    """Bias eps(t) = epsilon0 (constant) or kappa*t (linear, eps(t0) = kappa*t0)."""

    kind: str
    epsilon0: float
    t0: float
    kappa: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise DomainError(f"protocol kind must be 'constant' or 'linear', got {self.kind!r}")
        for name in ("epsilon0", "t0", "kappa", "delta"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if self.delta < 0:
            raise DomainError(f"delta must be >= 0, got {self.delta}")
        if self.kind == "constant" and self.kappa != 0:
            raise DomainError("constant protocol requires kappa = 0")
        if self.kind == "linear":
            if self.kappa < 0:
                raise DomainError(f"kappa must be >= 0, got {self.kappa}")
            expected = self.kappa * self.t0
            if abs(self.epsilon0 - expected) > 1e-12 * max(1.0, abs(expected)):
                raise DomainError(
                    f"linear protocol needs epsilon0 = kappa*t0 = {expected!r}, "
                    f"got {self.epsilon0!r}")

    @classmethod
    def linear(cls, kappa: float, t0: float, delta: float = 1.0) -> "DriveProtocol":
        return cls("linear", kappa * t0, t0, kappa, delta)

    @classmethod
    def constant(cls, epsilon0: float, t0: float = 0.0, delta: float = 1.0) -> "DriveProtocol":
        return cls("constant", epsilon0, t0, 0.0, delta)

    @property
    def rate(self) -> float:
        return self.kappa if self.kind == "linear" else 0.0

    def epsilon(self, t):
        return self.epsilon0 + self.rate * (np.asarray(t, float) - self.t0)


def record_indices(n_steps: int, stride: int = 1) -> np.ndarray:
    """Step indices stored for a trajectory; always includes 0 and n_steps."""
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


# --- numba kernels -----------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _imag_kernel(mu, eps0, delta, h, out, div_step, cap):
    nb, m1 = mu.shape
    for b in range(nb):
        r11 = 1.0 + 0j
        r12 = 0j
        r21 = 0j
        r22 = 1.0 + 0j
        div_step[b] = -1
        for j in range(m1 - 1):
            e = eps0 - mu[b, j]
            n11 = r11 - h * (e * r11 + delta * r21)
            n12 = r12 - h * (e * r12 + delta * r22)
            n21 = r21 - h * (delta * r11 - e * r21)
            n22 = r22 - h * (delta * r12 - e * r22)
            r11, r12, r21, r22 = n11, n12, n21, n22
            big = max(abs(r11), abs(r12), abs(r21), abs(r22))
            if not (big <= cap):
                div_step[b] = j + 1
                break
        out[b, 0, 0] = r11
        out[b, 0, 1] = r12
        out[b, 1, 0] = r21
        out[b, 1, 1] = r22


@numba.njit(cache=True, nogil=True)
def _real_kernel(rho0, eta, nu, noisy, n1, eps0, kdt, delta, h, hbar, rec, out,
                 div_step, cap):
    nb = rho0.shape[0]
    nrec = rec.shape[0]
    for b in range(nb):
        r11 = rho0[b, 0, 0]
        r12 = rho0[b, 0, 1]
        r21 = rho0[b, 1, 0]
        r22 = rho0[b, 1, 1]
        div_step[b] = -1
        k = 0
        if rec[0] == 0:
            out[b, 0, 0, 0] = r11
            out[b, 0, 0, 1] = r12
            out[b, 0, 1, 0] = r21
            out[b, 0, 1, 1] = r22
            k = 1
        for i in range(n1 - 1):
            a = eps0 + kdt * i + 0j
            hn = 0j
            if noisy:
                a -= eta[b, i]
                hn = hbar * nu[b, i]
            l11 = delta * (r21 - r12) - hn * r11
            l12 = 2.0 * a * r12 + delta * (r22 - r11)
            l21 = -2.0 * a * r21 + delta * (r11 - r22)
            l22 = delta * (r12 - r21) + hn * r22
            r11 = r11 - 1j * h * l11
            r12 = r12 - 1j * h * l12
            r21 = r21 - 1j * h * l21
            r22 = r22 - 1j * h * l22
            big = max(abs(r11), abs(r12), abs(r21), abs(r22))
            if not (big <= cap):
                div_step[b] = i + 1
                break
            if k < nrec and rec[k] == i + 1:
                out[b, k, 0, 0] = r11
                out[b, k, 0, 1] = r12
                out[b, k, 1, 0] = r21
                out[b, k, 1, 1] = r22
                k += 1
        while k < nrec:
            out[b, k, 0, 0] = np.nan
            out[b, k, 0, 1] = np.nan
            out[b, k, 1, 0] = np.nan
            out[b, k, 1, 1] = np.nan
            k += 1


@numba.njit(cache=True, nogil=True)
def _unitary_kernel(rho0, eps0, kdt, delta, dt_h, n_steps, rec, out):
    r11 = rho0[0, 0]
    r12 = rho0[0, 1]
    r21 = rho0[1, 0]
    r22 = rho0[1, 1]
    out[0, 0, 0] = r11
    out[0, 0, 1] = r12
    out[0, 1, 0] = r21
    out[0, 1, 1] = r22
    k = 1
    for i in range(n_steps):
        e = eps0 + kdt * (i + 0.5)
        norm = math.sqrt(e * e + delta * delta)
        theta = norm * dt_h
        c = math.cos(theta)
        s = math.sin(theta) / norm if norm > 0 else dt_h
        # U = exp(-i theta n.sigma) = c - i s (e sigma_z + delta sigma_x)
        u11 = c - 1j * s * e
        u12 = -1j * s * delta
        u22 = c + 1j * s * e
        # T = U rho, then rho = T U^dagger (U is symmetric, U^dagger = conj(U))
        t11 = u11 * r11 + u12 * r21
        t12 = u11 * r12 + u12 * r22
        t21 = u12 * r11 + u22 * r21
        t22 = u12 * r12 + u22 * r22
        c11 = np.conj(u11)
        c12 = np.conj(u12)
        c22 = np.conj(u22)
        r11 = t11 * c11 + t12 * c12
        r12 = t11 * c12 + t12 * c22
        r21 = t21 * c11 + t22 * c12
        r22 = t21 * c12 + t22 * c22
        if k < rec.shape[0] and rec[k] == i + 1:
            out[k, 0, 0] = r11
            out[k, 0, 1] = r12
            out[k, 1, 0] = r21
            out[k, 1, 1] = r22
            k += 1


# --- public API ----------------------------------------------------------------

def evolve_imaginary_batch(mu: np.ndarray, protocol: DriveProtocol, grids: TimeGrids,
                           hbar: float = 1.0):
    """Endpoints rho(beta hbar) for a stack of mu rows; returns (rho, div_step)
    with div_step = -1 for trajectories that stayed finite."""
    mu = np.ascontiguousarray(np.atleast_2d(mu), dtype=complex)
    if mu.shape[1] != grids.m_steps + 1:
        raise DomainError("mu does not match the imaginary-time grid")
    out = np.empty((mu.shape[0], 2, 2), complex)
    div = np.empty(mu.shape[0], np.int64)
    _imag_kernel(mu, float(protocol.epsilon0), float(protocol.delta),
                 grids.dtau / hbar, out, div, DIVERGENCE_CAP)
    return out, div


def evolve_imaginary(noise_mu, protocol: DriveProtocol, grids: TimeGrids,
                     hbar: float = 1.0) -> np.ndarray:
    """Unnormalized imaginary-time endpoint, starting from the identity."""
    out, div = evolve_imaginary_batch(np.asarray(noise_mu)[None, :], protocol, grids, hbar)
    if div[0] >= 0:
        raise TrajectoryDiverged("imaginary-time trajectory diverged", step=int(div[0]))
    return out[0]


def evolve_real_batch(rho0: np.ndarray, eta, nu, protocol: DriveProtocol, grids: TimeGrids,
                      hbar: float = 1.0, stride: int = 1):
    """Real-time Euler propagation of a stack; returns (traj, div_step) with
    traj of shape (B, len(record_indices), 2, 2).  ``eta = nu = None`` runs
    noise-free without allocating noise arrays."""
    n1 = grids.n_steps + 1
    rho0 = np.asarray(rho0, complex)
    noisy = eta is not None
    if noisy:
        eta = np.ascontiguousarray(np.atleast_2d(eta), dtype=complex)
        nu = np.ascontiguousarray(np.atleast_2d(nu), dtype=complex)
        nb = eta.shape[0]
        if eta.shape[1] != n1 or nu.shape != eta.shape:
            raise DomainError("noise does not match the real-time grid")
    else:
        nb = rho0.shape[0] if rho0.ndim == 3 else 1
        eta = nu = np.zeros((1, 1), complex)
    if rho0.ndim == 2:
        rho0 = np.broadcast_to(rho0, (nb, 2, 2))
    rho0 = np.ascontiguousarray(rho0)
    if rho0.shape != (nb, 2, 2):
        raise DomainError("initial states do not match the number of noise rows")
    rec = record_indices(grids.n_steps, stride)
    out = np.empty((nb, rec.size, 2, 2), complex)
    div = np.empty(nb, np.int64)
    _real_kernel(rho0, eta, nu, noisy, n1, float(protocol.epsilon0), protocol.rate * grids.dt,
                 float(protocol.delta), grids.dt / hbar, float(hbar), rec, out, div,
                 DIVERGENCE_CAP)
    return out, div


def evolve_real(rho0, noise, protocol: DriveProtocol, grids: TimeGrids, hbar: float = 1.0,
                stride: int = 1) -> np.ndarray:
    """Single trajectory on the recorded steps.  ``noise`` has ``eta`` and
    ``nu`` attributes, is an (eta, nu) pair, or is None for no noise."""
    if noise is None:
        eta = nu = None
    else:
        eta, nu = (noise.eta, noise.nu) if hasattr(noise, "eta") else noise
        eta, nu = np.asarray(eta)[None], np.asarray(nu)[None]
    traj, div = evolve_real_batch(np.asarray(rho0, complex)[None], eta, nu, protocol, grids,
                                  hbar, stride)
    if div[0] >= 0:
        raise TrajectoryDiverged("real-time trajectory diverged", step=int(div[0]))
    return traj[0]


def gibbs_state(epsilon: float, delta: float, beta: float) -> np.ndarray:
    """exp(-beta (eps sigma_z + Delta sigma_x)) / Z in closed form."""
    norm = math.hypot(epsilon, delta)
    if norm == 0:
        return 0.5 * np.eye(2, dtype=complex)
    th = math.tanh(beta * norm) / norm
    return 0.5 * np.array([[1 - th * epsilon, -th * delta],
                           [-th * delta, 1 + th * epsilon]], complex)


def initial_condition(mode, matched_rho=None, protocol: DriveProtocol | None = None,
                      spec: BathSpec | None = None) -> np.ndarray:
    """Starting matrix for the partitioned modes."""
    mode = EvolutionMode.parse(mode)
    if mode is EvolutionMode.ESLE:
        raise DomainError("ESLE trajectories start from their own imaginary-time endpoint")
    if (matched_rho is not None) != (mode is EvolutionMode.SLE_MATCHED):
        raise DomainError("matched_rho must be given exactly when mode is SLE_MATCHED")
    if mode is EvolutionMode.SLE_LZ:
        return np.array([[1, 0], [0, 0]], complex)
    if mode is EvolutionMode.SLE_MATCHED:
        r = np.asarray(matched_rho, complex)
        r = 0.5 * (r + r.conj().T)
        tr = np.trace(r).real
        if not np.isfinite(tr) or tr == 0:
            raise DomainError("matched density matrix has zero or non-finite trace")
        return r / tr
    if protocol is None or spec is None:
        raise DomainError("SLE_PARTITIONED needs the protocol and bath spec")
    return gibbs_state(protocol.epsilon0, protocol.delta, spec.beta)


def imaginary_oracle(protocol: DriveProtocol, beta_hbar: float, hbar: float = 1.0) -> np.ndarray:
    """Exact exp(-H_q(t0) beta hbar / hbar), unnormalized."""
    e, d = protocol.epsilon0, protocol.delta
    norm = math.hypot(e, d)
    x = norm * beta_hbar / hbar
    if norm == 0:
        return np.eye(2, dtype=complex)
    c, s = math.cosh(x), math.sinh(x) / norm
    return np.array([[c - s * e, -s * d], [-s * d, c + s * e]], complex)


def unitary_oracle(rho0, protocol: DriveProtocol, grids: TimeGrids, hbar: float = 1.0,
                   stride: int = 1) -> np.ndarray:
    """Noise-free reference: exact 2x2 propagator per step with eps at the
    step midpoint."""
    rec = record_indices(grids.n_steps, stride)
    out = np.empty((rec.size, 2, 2), complex)
    _unitary_kernel(np.ascontiguousarray(rho0, dtype=complex), float(protocol.epsilon0),
                    protocol.rate * grids.dt, float(protocol.delta), grids.dt / hbar,
                    grids.n_steps, rec, out)
    return out


def lz_survival_probability(delta: float, kappa: float, hbar: float = 1.0) -> float:
    """Asymptotic Landau-Zener survival probability exp(-pi Delta^2 / (hbar kappa))."""
    if not kappa > 0:
        raise DomainError(f"kappa must be > 0, got {kappa}")
    if not hbar > 0:
        raise DomainError(f"hbar must be > 0, got {hbar}")
    return math.exp(-math.pi * delta**2 / (hbar * kappa))


def renormalized_tunneling(delta: float, alpha: float, omega_c: float) -> float:
    """Delta_r = Delta (Delta/omega_c)^(alpha/(1-alpha))."""
    if not 0 <= alpha < 1:
        raise DomainError(f"renormalized tunneling needs 0 <= alpha < 1, got {alpha}")
    if not (delta > 0 and omega_c > delta):
        raise DomainError("renormalized tunneling needs omega_c > delta > 0")
    return delta * (delta / omega_c) ** (alpha / (1.0 - alpha))
