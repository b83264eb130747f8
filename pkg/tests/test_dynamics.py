import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from esle.dynamics import (DriveProtocol, EvolutionMode, evolve_imaginary, evolve_real,
                           evolve_real_batch, gibbs_state, imaginary_oracle, initial_condition,
                           lz_survival_probability, record_indices, renormalized_tunneling,
                           unitary_oracle)
from esle.errors import DomainError, TrajectoryDiverged
from esle.kernels import BathSpec, TimeGrids
from oracles import hamiltonian, imaginary_exact, real_exact

UP = np.array([[1, 0], [0, 0]], complex)


def _grids(dt=0.01, n=100, dtau=0.1 / 64, m=64, t0=0.0):
    return TimeGrids(t0, dt, n, dtau, m)


def _slope(dts, errs):
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


# protocol and modes

def test_linear_protocol_needs_consistent_bias():
    p = DriveProtocol.linear(8.0, -10.0)
    assert p.epsilon0 == -80.0
    assert p.epsilon(0.0) == 0.0
    with pytest.raises(DomainError):
        DriveProtocol("linear", -79.0, -10.0, 8.0)
    with pytest.raises(DomainError):
        DriveProtocol("constant", 1.0, 0.0, kappa=2.0)
    with pytest.raises(DomainError):
        DriveProtocol.constant(1.0, delta=-1.0)
    with pytest.raises(DomainError):
        DriveProtocol("ramp", 0.0, 0.0)


def test_zero_tunneling_is_allowed():
    assert DriveProtocol.constant(1.0, delta=0.0).delta == 0.0


def test_mode_parsing():
    assert EvolutionMode.parse("SLE-matched") is EvolutionMode.SLE_MATCHED
    assert EvolutionMode.parse(EvolutionMode.ESLE) is EvolutionMode.ESLE
    with pytest.raises(DomainError):
        EvolutionMode.parse("hierarchy")


def test_record_indices_keep_both_ends():
    assert record_indices(10, 3).tolist() == [0, 3, 6, 9, 10]
    assert record_indices(9, 3).tolist() == [0, 3, 6, 9]
    with pytest.raises(DomainError):
        record_indices(10, 0)


# initial states

def test_gibbs_state_example():
    rho = gibbs_state(5.0, 0.0, 0.1)
    assert np.allclose(np.diag(rho).real, [0.2689414, 0.7310586], atol=1e-7)


def test_gibbs_state_high_temperature_limit():
    assert np.allclose(gibbs_state(5.0, 1.0, 1e-12), 0.5 * np.eye(2), atol=1e-11)


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(-20, 20), delta=st.floats(0, 5), beta=st.floats(0.01, 3))
def test_gibbs_state_is_a_density_matrix(eps, delta, beta):
    rho = gibbs_state(eps, delta, beta)
    assert abs(np.trace(rho) - 1) < 1e-12
    assert np.allclose(rho, rho.conj().T)
    assert np.all(np.linalg.eigvalsh(rho) >= -1e-12)
    assert np.allclose(rho, imaginary_exact(eps, delta, beta), atol=1e-10)


def test_initial_condition_modes():
    p = DriveProtocol.constant(5.0)
    spec = BathSpec(0.05, 200.0, 0.1)
    assert np.array_equal(initial_condition("sle_lz"), UP)
    assert np.allclose(initial_condition("sle_partitioned", protocol=p, spec=spec),
                       gibbs_state(5.0, 1.0, 0.1))
    m = initial_condition("sle_matched", matched_rho=[[2, 1 + 1j], [1, 2]])
    assert np.trace(m) == pytest.approx(1.0)
    assert np.allclose(m, m.conj().T)
    with pytest.raises(DomainError):
        initial_condition("esle")
    with pytest.raises(DomainError):
        initial_condition("sle_matched")
    with pytest.raises(DomainError):
        initial_condition("sle_lz", matched_rho=UP)
    with pytest.raises(DomainError):
        initial_condition("sle_partitioned")


# deterministic propagation

def test_imaginary_noise_free_matches_exponential():
    g = _grids(dtau=0.1 / 4000, m=4000)
    p = DriveProtocol.constant(5.0)
    rho = evolve_imaginary(np.zeros(g.m_steps + 1), p, g)
    want = imaginary_oracle(p, 0.1)
    assert np.allclose(rho / np.trace(rho), imaginary_exact(5.0, 1.0, 0.1), atol=1e-4)
    assert np.allclose(rho, want, rtol=1e-3)


def test_imaginary_euler_is_first_order():
    p = DriveProtocol.constant(3.0, delta=1.0)
    # H^2 is proportional to the identity, so the leading error cancels after
    # normalization; compare the raw endpoint with expm(-beta H)
    want = expm(-0.5 * hamiltonian(3.0, 1.0))
    errs, steps = [], [50, 100, 200, 400, 800]
    for m in steps:
        g = _grids(dtau=0.5 / m, m=m)
        errs.append(np.abs(evolve_imaginary(np.zeros(m + 1), p, g) - want).max())
    assert _slope(0.5 / np.array(steps), errs) == pytest.approx(1.0, abs=0.1)


def test_real_euler_is_first_order():
    p = DriveProtocol.constant(2.0, delta=1.0)
    want = real_exact(UP, 2.0, 1.0, 1.0)
    errs, steps = [], [1000, 2000, 4000, 8000, 16000]
    for n in steps:
        g = _grids(dt=1.0 / n, n=n)
        errs.append(np.abs(evolve_real(UP, None, p, g)[-1] - want).max())
    assert _slope(1.0 / np.array(steps), errs) == pytest.approx(1.0, abs=0.1)


def test_unitary_oracle_matches_exponential_and_stays_pure():
    p = DriveProtocol.constant(2.0, delta=1.0)
    g = _grids(dt=0.01, n=300)
    traj = unitary_oracle(UP, p, g, stride=30)
    assert np.allclose(traj[-1], real_exact(UP, 2.0, 1.0, 3.0), atol=1e-12)
    for rho in traj:
        assert abs(np.trace(rho) - 1) < 1e-12
        assert np.allclose(np.linalg.eigvalsh(rho), [0, 1], atol=1e-12)


def test_noise_free_real_time_has_hermitian_trace_one_path():
    p = DriveProtocol.linear(4.0, -2.0)
    g = _grids(dt=1e-3, n=4000, t0=-2.0)
    traj = evolve_real(UP, None, p, g, stride=100)
    for rho in traj:
        assert np.allclose(rho, rho.conj().T, atol=1e-14)
        assert abs(np.trace(rho) - 1) < 1e-13


def test_zero_coupling_sweep_approaches_landau_zener():
    p = DriveProtocol.linear(8.0, -10.0)
    g = _grids(dt=1e-5, n=2_000_000, t0=-10.0)
    traj = evolve_real(UP, None, p, g, stride=2000)
    tail = traj[-200:, 0, 0].real.mean()
    assert tail == pytest.approx(lz_survival_probability(1.0, 8.0), rel=0.02)


def test_nu_step_changes_trace_by_known_amount():
    rho0 = np.array([[0.7, 0.1 - 0.2j], [0.1 + 0.2j, 0.3]], complex)
    p = DriveProtocol.constant(1.5, delta=0.8)
    g = _grids(dt=0.01, n=1)
    nu = np.array([0.3 - 0.4j, 0.0])
    eta = np.array([0.2 + 0.1j, 0.0])
    traj = evolve_real(rho0, (eta, nu), p, g)
    got = np.trace(traj[-1]) - np.trace(rho0)
    want = 1j * g.dt * nu[0] * (rho0[0, 0] - rho0[1, 1])
    assert got == pytest.approx(want, abs=1e-15)


def test_eta_acts_as_a_bias_shift():
    rho0 = gibbs_state(1.0, 1.0, 0.3)
    g = _grids(dt=0.01, n=50)
    shifted = evolve_real(rho0, None, DriveProtocol.constant(1.0 - 0.25), g)
    noisy = evolve_real(rho0, (np.full(51, 0.25 + 0j), np.zeros(51, complex)),
                        DriveProtocol.constant(1.0), g)
    assert np.allclose(shifted, noisy, atol=1e-14)


def test_real_step_is_linear_in_rho():
    rng = np.random.default_rng(0)
    g = _grids(dt=0.01, n=40)
    p = DriveProtocol.constant(0.5)
    eta = rng.normal(size=41) + 1j * rng.normal(size=41)
    nu = rng.normal(size=41) + 1j * rng.normal(size=41)
    a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    b = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    fa = evolve_real(a, (eta, nu), p, g)
    fb = evolve_real(b, (eta, nu), p, g)
    fab = evolve_real(2 * a - 3 * b, (eta, nu), p, g)
    assert np.allclose(fab, 2 * fa - 3 * fb, atol=1e-12)


def test_batch_matches_single_trajectories():
    rng = np.random.default_rng(1)
    g = _grids(dt=0.01, n=30)
    p = DriveProtocol.constant(0.5)
    eta = rng.normal(size=(3, 31)) + 0j
    nu = 1j * rng.normal(size=(3, 31))
    traj, div = evolve_real_batch(UP, eta, nu, p, g, stride=7)
    assert np.all(div == -1)
    for k in range(3):
        assert np.array_equal(traj[k], evolve_real(UP, (eta[k], nu[k]), p, g, stride=7))


def test_divergence_reports_step():
    g = _grids(dt=0.01, n=100)
    p = DriveProtocol.constant(0.0)
    nu = np.zeros(101, complex)
    nu[:] = 1e5j
    with pytest.raises(TrajectoryDiverged) as info:
        evolve_real(UP, (np.zeros(101, complex), nu), p, g)
    assert 0 < info.value.step <= 100
    traj, div = evolve_real_batch(UP, np.zeros((1, 101), complex), nu[None], p, g)
    assert div[0] == info.value.step
    assert np.isnan(traj[0, -1, 0, 0])


def test_imaginary_divergence_reports_step():
    g = _grids(dtau=0.01, m=50)
    with pytest.raises(TrajectoryDiverged) as info:
        evolve_imaginary(np.full(51, -1e4 + 0j), DriveProtocol.constant(0.0), g)
    assert info.value.step > 0


def test_shape_errors():
    g = _grids(dt=0.01, n=10)
    p = DriveProtocol.constant(0.0)
    with pytest.raises(DomainError):
        evolve_real(UP, (np.zeros(5), np.zeros(5)), p, g)
    with pytest.raises(DomainError):
        evolve_imaginary(np.zeros(3), p, g)


# closed forms

def test_landau_zener_probability():
    assert lz_survival_probability(1.0, 8.0) == pytest.approx(math.exp(-math.pi / 8))
    assert lz_survival_probability(1.0, 8.0) == pytest.approx(0.6752, abs=1e-4)
    with pytest.raises(DomainError):
        lz_survival_probability(1.0, 0.0)


def test_renormalized_tunneling():
    assert renormalized_tunneling(1.0, 0.0, 25.0) == 1.0
    want = (1 / 25) ** (0.05 / 0.95)
    assert renormalized_tunneling(1.0, 0.05, 25.0) == pytest.approx(want, rel=1e-14)
    for args in ((1.0, 1.0, 25.0), (1.0, -0.1, 25.0), (30.0, 0.05, 25.0), (0.0, 0.05, 25.0)):
        with pytest.raises(DomainError):
            renormalized_tunneling(*args)
