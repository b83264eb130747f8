"""Slow reference implementations shared by the test modules."""

import numpy as np
from scipy.linalg import expm


def direct_synthesis(filters, table, whites):
    """Build (eta, nu, mu) from one white draw with explicit O(N^2) sums.

    Stationary parts use the impulse responses g = ifft(G~) summed term by
    term; the cross parts use the kernel tables directly.
    """
    g = filters.grids
    n1, m1 = g.n_steps + 1, g.m_steps + 1
    L, P = g.pad_len, g.mu_period
    g_ee = np.fft.ifft(filters.g_eta_eta_spectrum).real
    g_mm = np.fft.ifft(filters.g_mu_mu_spectrum).real
    w = whites.x2 + 1j * whites.x3
    wb = whites.xb2 + 1j * whites.xb3
    eta = np.zeros(n1, complex)
    for i in range(n1):
        s = 0.0
        for k in range(L):
            s += g_ee[(i - k) % L] * whites.x1[k]
        c = 0j
        for k in range(i + 1):
            c += -0.5j * g.dt * table.k_eta_nu[i - k] * w[k]
        for j in range(m1):
            c += g.dtau * table.k_eta_mu[i, j] / 2j * wb[j]
        eta[i] = s + c
    mu = np.zeros(m1, complex)
    for i in range(m1):
        s = 0.0
        for k in range(P):
            s += g_mm[(i - k) % P] * whites.xb1[k]
        mu[i] = s + whites.xb3[i] + 1j * whites.xb2[i]
    nu = whites.x3 + 1j * whites.x2
    return eta, nu, mu


def hamiltonian(eps, delta):
    return np.array([[eps, delta], [delta, -eps]], dtype=complex)


def imaginary_exact(eps, delta, beta_hbar, hbar=1.0):
    """Normalized exp(-beta H) for a constant bias."""
    r = expm(-beta_hbar / hbar * hamiltonian(eps, delta))
    return r / np.trace(r)


def real_exact(rho0, eps, delta, t, hbar=1.0):
    """Constant-bias unitary evolution of rho0 over time t."""
    u = expm(-1j * t / hbar * hamiltonian(eps, delta))
    return u @ rho0 @ u.conj().T
