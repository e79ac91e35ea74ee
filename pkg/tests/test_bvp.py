import math

import numpy as np
import pytest
from src.bvp import (ConnectionProblem, asymptotic_T, check_cone, in_cone, largest_convergent_mu, shilnikov_iterate,
                     solve_fixed_energy, solve_fixed_time, solve_passage, time_reparametrization)
from src.errors import ConeViolation, SpecError
from src.hamiltonian import Dims, ModelSpec, build_model
from src.ladder import linear_fit, loglog_fit
from src.manifold import fit_local_graphs, limit_direction

Q_PLUS = np.array([0.1])
P_MINUS = np.array([-0.1])
Z0 = np.zeros(2)


@pytest.fixture(scope="module")
def linear():
    sys = build_model(ModelSpec(Dims(1, 1), lam=1.0))
    return sys, fit_local_graphs(sys, Z0)


@pytest.fixture(scope="module")
def model():
    sys = build_model(ModelSpec(Dims(1, 1), lam="1 + 0.05*(x1**2 + y1**2)",
                                cubic_coeffs={(2, 1): 0.1, (1, 2): -0.05}))
    return sys, fit_local_graphs(sys, Z0)


def test_cone_membership():
    assert in_cone(Q_PLUS, P_MINUS, 0.1)
    assert not in_cone(Q_PLUS, P_MINUS, 0.1, sign=-1)
    assert in_cone(Q_PLUS, -P_MINUS, 0.1, sign=-1)
    assert not in_cone([0.01], P_MINUS, 0.1)
    assert not in_cone([0.2], P_MINUS, 0.1)
    with pytest.raises(ConeViolation):
        check_cone(Q_PLUS, -P_MINUS, 0.1)


def test_connection_problem_needs_one_of_time_and_energy():
    with pytest.raises(SpecError):
        ConnectionProblem(Z0, Q_PLUS, P_MINUS)
    with pytest.raises(SpecError):
        ConnectionProblem(Z0, Q_PLUS, P_MINUS, T=5.0, mu=1e-6)
    assert ConnectionProblem(Z0, Q_PLUS, P_MINUS, mu=1e-6).mode == "energy"


def test_fixed_time_rejects_short_passages(linear):
    sys, chart = linear
    with pytest.raises(SpecError):
        solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, 0.5)


def test_fixed_time_linear_passage(linear):
    sys, chart = linear
    T = 5.0
    solution = solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, T)
    # q(t) = q+ exp(-(t + T)), p(t) = p- exp(t - T), H = -q p
    assert solution.mu == pytest.approx(0.01 * math.exp(-2 * T), rel=1e-8)
    assert solution.chart_start[2] == pytest.approx(0.1, rel=1e-9)
    assert solution.chart_end[3] == pytest.approx(-0.1, rel=1e-9)
    assert solution.chart_midpoint[2] == pytest.approx(0.1 * math.exp(-T), rel=1e-8)
    assert solution.action == pytest.approx(2 * T * solution.mu, rel=1e-7)
    assert solution.hamilton_action == pytest.approx(0.0, abs=1e-12)
    assert solution.residual_norm <= 1e-10
    summary = solution.summary(sys.dims)
    assert summary["q_plus"] == pytest.approx([0.1])


def test_picard_backend_agrees_with_asymptotic_seed(linear):
    sys, chart = linear
    shooting = solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, 6.0)
    picard = solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, 6.0, backend="picard")
    assert picard.mu == pytest.approx(shooting.mu, rel=1e-8)
    with pytest.raises(SpecError):
        solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, 6.0, backend="collocation")


def test_asymptotic_time_formula(linear):
    _, chart = linear
    assert asymptotic_T(chart, Z0, Q_PLUS, P_MINUS, 1e-6) == pytest.approx(4.60517, abs=1e-5)
    with pytest.raises(ValueError):
        asymptotic_T(chart, Z0, Q_PLUS, P_MINUS, 0.0)
    with pytest.raises(ConeViolation):
        asymptotic_T(chart, Z0, Q_PLUS, P_MINUS, -1e-6)


def test_fixed_energy_linear_passage(linear):
    sys, chart = linear
    solution = solve_fixed_energy(sys, chart, Z0, Q_PLUS, P_MINUS, 1e-6)
    assert solution.T == pytest.approx(0.5 * math.log(1e4), abs=1e-9)
    assert solution.mu == pytest.approx(1e-6, rel=1e-9)
    assert solution.trajectory.t0 == pytest.approx(-solution.T)
    assert solution.trajectory.t1 == pytest.approx(solution.T)


def test_connection_problem_solve(linear):
    sys, chart = linear
    solution = ConnectionProblem(Z0, Q_PLUS, P_MINUS, mu=1e-5).solve(sys, chart)
    assert solution.T == pytest.approx(0.5 * math.log(1e3), abs=1e-9)


def test_fixed_energy_on_nonlinear_model(model):
    sys, chart = model
    mu = 1e-6
    solution = solve_fixed_energy(sys, chart, Z0, Q_PLUS, P_MINUS, mu)
    assert solution.mu == pytest.approx(mu, rel=1e-8)
    assert np.max(np.abs(solution.chart_midpoint[:2])) < 1e-9
    _, states = solution.trajectory.sample(21)
    energies = np.array([sys.energy(state) for state in states])
    np.testing.assert_allclose(energies, mu, rtol=1e-5)
    # the passage time approaches the asymptotic formula as mu shrinks
    assert abs(solution.T - asymptotic_T(chart, Z0, Q_PLUS, P_MINUS, mu)) < 0.05


def test_endpoint_anchored_passage(linear):
    sys, chart = linear
    solution = solve_passage(sys, chart, [0.2], [0.1], Q_PLUS, P_MINUS, T=5.0)
    assert solution.chart_start[0] == pytest.approx(0.2)
    assert solution.chart_end[1] == pytest.approx(0.1)
    assert solution.mu == pytest.approx(0.01 * math.exp(-10.0), rel=1e-8)
    with pytest.raises(SpecError):
        solve_passage(sys, chart, [0.2], [0.1], Q_PLUS, P_MINUS)


def test_endpoint_anchored_fixed_energy(linear):
    sys, chart = linear
    solution = solve_passage(sys, chart, [0.2], [0.1], Q_PLUS, P_MINUS, mu=1e-6)
    assert solution.T == pytest.approx(0.5 * math.log(1e4), abs=1e-8)


def test_picard_iteration_on_linear_saddle(linear):
    _, chart = linear
    straight = chart.straightening(Z0)
    solution = shilnikov_iterate(straight, Z0, Q_PLUS, P_MINUS, calT=4.0)
    assert solution.u[0, 0] == pytest.approx(0.1)
    assert solution.v[-1, 0] == pytest.approx(-0.1)
    assert solution.u_minus[0] == pytest.approx(0.1 * math.exp(-8.0))
    np.testing.assert_allclose(solution.w, 0.0, atol=1e-15)
    np.testing.assert_allclose(time_reparametrization(solution), solution.tau, atol=1e-12)


def test_largest_convergent_mu(linear):
    sys, chart = linear
    mu0, records = largest_convergent_mu(sys, chart, Z0, Q_PLUS, P_MINUS, [1e-5, 1e-6])
    assert mu0 == 1e-5
    assert [record["converged"] for record in records] == [True, True]


@pytest.mark.slow
def test_passage_time_deviation_shrinks_like_sqrt_mu(model):
    sys, chart = model
    mus = [10.0 ** -k for k in range(3, 9)]
    deviations = np.array([solve_fixed_energy(sys, chart, Z0, Q_PLUS, P_MINUS, mu).T
                           - asymptotic_T(chart, Z0, Q_PLUS, P_MINUS, mu) for mu in mus])
    # successive differences drop the constant offset left by the truncated limit directions
    increments = np.abs(np.diff(deviations))
    assert np.all(increments <= 0.1 * np.sqrt(mus[:-1]))
    assert loglog_fit(mus[:-1], increments).slope >= 0.4


@pytest.mark.slow
def test_midpoint_approaches_limit_direction(model):
    sys, chart = model
    # on p = 0 the model reduces to q' = -q + 0.1 q^2, whose limit direction is q+ / (1 - 0.1 q+)
    v_plus = Q_PLUS[0] / (1 - 0.1 * Q_PLUS[0])
    assert limit_direction(sys, chart, Z0, q_plus=Q_PLUS).vector[0] == pytest.approx(v_plus, rel=1e-3)
    times = [5.0, 7.0, 9.0, 11.0]
    gaps = [abs(solve_fixed_time(sys, chart, Z0, Q_PLUS, P_MINUS, T).chart_midpoint[2] - math.exp(-T) * v_plus)
            for T in times]
    rate = -linear_fit(times, np.log(gaps)).slope
    assert 1.9 <= rate <= 2.1
