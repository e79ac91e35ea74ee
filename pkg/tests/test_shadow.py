import numpy as np
import pytest
from src.errors import ConfigError, DegenerateOrbit, SpecError
from src.hamiltonian import LoopSpec, build_loop_system
from src.ladder import loglog_fit
from src.manifold import fit_local_graphs
from src.scattering import BranchPoint, HeteroclinicChain, HeteroclinicOrbit, ScatteringBranch, planted_chain
from src.shadow import (DiscreteOrbitProblem, ShadowProblem, action_gradient, action_mu, branch_map_jacobian,
                        check_sign_condition, continue_shadow, discrete_action, multiplier_spectrum, shadowing_distance,
                        solve_discrete_action, spectral_distance)


def _twist_branch(x, Y):
    # S(x, Y) = (x + Y)^2 / 2
    s = np.asarray(x, dtype=float) + np.asarray(Y, dtype=float)
    return BranchPoint(np.asarray(x, dtype=float), np.asarray(Y, dtype=float), 0.5 * float(s @ s), s, s)


def _bilinear_branch(x, Y):
    x, Y = np.asarray(x, dtype=float), np.asarray(Y, dtype=float)
    return BranchPoint(x, Y, float(x @ Y), Y, x)


def _orbit(v_plus, v_minus) -> HeteroclinicOrbit:
    corner = np.zeros(2)
    return HeteroclinicOrbit(corner, corner, np.asarray(v_minus, dtype=float), np.asarray(v_plus, dtype=float))


@pytest.fixture(scope="module")
def loop():
    spec = LoopSpec()
    sys = build_loop_system(spec)
    chart = fit_local_graphs(sys, spec.critical_corner())
    return sys, chart, planted_chain(sys, spec, chart)


def test_discrete_orbit_of_twist_map():
    problem = DiscreteOrbitProblem([_twist_branch], [[0.3, -0.2]])
    solution = solve_discrete_action(problem)
    np.testing.assert_allclose(solution.corners, [[0.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(solution.hessian, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(solution.return_jacobian, [[0.0, 1.0], [-1.0, 1.0]], atol=1e-8)
    assert solution.determinant == pytest.approx(1.0, rel=1e-8)
    assert solution.nondegenerate
    np.testing.assert_allclose(np.abs(solution.return_spectrum()), 1.0, rtol=1e-8)
    assert solution.to_dict()["determinant"] == solution.determinant


def test_discrete_action_gradient_vanishes_at_fixed_corner():
    problem = DiscreteOrbitProblem([_twist_branch, _twist_branch], np.zeros((2, 2)))
    value, gradient, points = discrete_action(problem, np.zeros(4))
    assert value == 0.0
    np.testing.assert_array_equal(gradient, 0.0)
    assert len(points) == 2


def test_degenerate_action_is_rejected():
    problem = DiscreteOrbitProblem([_bilinear_branch], [[0.1, 0.2]])
    with pytest.raises(DegenerateOrbit):
        solve_discrete_action(problem)


def test_discrete_problem_validation():
    with pytest.raises(SpecError):
        DiscreteOrbitProblem([_twist_branch, _twist_branch], [[0.0, 0.0]])
    with pytest.raises(SpecError):
        DiscreteOrbitProblem([_twist_branch], [[0.0, 0.0, 0.0]])


@pytest.mark.parametrize("m", [1, 2])
def test_branch_map_preserves_symplectic_form(m):
    rng = np.random.default_rng(m)
    a, b = rng.normal(size=(m, m)), rng.normal(size=(m, m))
    S_xx, S_YY = a + a.T, b + b.T
    S_xY = rng.normal(size=(m, m)) + 3 * np.eye(m)
    jacobian = branch_map_jacobian(S_xx, S_xY, S_xY.T, S_YY)
    J = np.block([[np.zeros((m, m)), np.eye(m)], [-np.eye(m), np.zeros((m, m))]])
    np.testing.assert_allclose(jacobian.T @ J @ jacobian, J, atol=1e-10)


def test_sign_condition():
    chain = HeteroclinicChain([_orbit([0.1], [-0.1])])
    holds, values = check_sign_condition(chain, lambda z: -1.0)
    assert holds
    assert values == [pytest.approx(-0.01)]
    holds, _ = check_sign_condition(chain, lambda z: 2.0)
    assert not holds


def test_spectral_distance():
    assert spectral_distance([1.0, 2.0], [1.1, 5.0]) == pytest.approx(0.9)
    assert spectral_distance([1j], [1j, -1j]) == 0.0


def test_shadow_problem_validation():
    spec = LoopSpec()
    sys = build_loop_system(spec)
    chart = fit_local_graphs(sys, spec.critical_corner())
    chain = HeteroclinicChain([_orbit([0.1], [-0.1])])
    open_chain = HeteroclinicChain(chain.orbits, periodic=False)
    with pytest.raises(SpecError):
        ShadowProblem(sys, chart, open_chain, 1e-4)
    with pytest.raises(SpecError):
        ShadowProblem(sys, [chart, chart], chain, 1e-4)
    problem = ShadowProblem(sys, chart, chain, 1e-4)
    assert len(problem.charts) == 1
    assert problem.with_mu(1e-5).mu == 1e-5
    with pytest.raises(ConfigError):
        continue_shadow(problem, [1e-5, 1e-4])


@pytest.mark.slow
def test_loop_shadow_orbit(loop):
    sys, chart, chain = loop
    ladder = [1e-4, 5e-5, 2.5e-5]
    problem = ShadowProblem(sys, chart, chain, ladder[0])
    orbits = continue_shadow(problem, ladder)
    assert [orbit.mu for orbit in orbits] == ladder
    for orbit in orbits:
        assert orbit.closure < 1e-6
        assert orbit.energy_error < 1e-6
        assert orbit.period > 0
    smaller = orbits[-1]
    at_smaller = problem.with_mu(smaller.mu)
    assert np.isfinite(action_mu(at_smaller, smaller.X))
    assert np.max(np.abs(action_gradient(at_smaller, smaller.X))) < 1e-7

    distances = [shadowing_distance(orbit, chain, tube_radius=0.05, samples=500) for orbit in orbits]
    for d_global, d_outside in distances:
        assert d_outside <= d_global < chart.radius
    assert loglog_fit(ladder, [d_global for d_global, _ in distances]).slope == pytest.approx(0.5, abs=0.1)
    scaled = [d_outside / (mu * abs(np.log(mu))) for mu, (_, d_outside) in zip(ladder, distances)]
    assert min(scaled) > 0
    assert max(scaled) / min(scaled) <= 3
    # a growing excess would add |ln 2| / lambda per halving of mu
    excess = [orbit.period_excess for orbit in orbits]
    assert np.ptp(excess) < 0.3

    branches = [ScatteringBranch(sys, chart, orbit) for orbit in chain.orbits]
    discrete = solve_discrete_action(DiscreteOrbitProblem(branches, [orbit.c_minus for orbit in chain.orbits]))
    reference = discrete.return_spectrum()
    gaps = []
    for orbit in orbits:
        report = multiplier_spectrum(orbit, sys)
        assert len(report.multipliers) == sys.dims.n - 2
        assert report.pairing_error < 1e-4
        # one degree of freedom transverse to M: the return map has only the pair tracking the discrete orbit
        assert len(report.large) == 0
        gaps.append(spectral_distance(report.small, reference))
    assert all(later <= earlier + 1e-6 for earlier, later in zip(gaps, gaps[1:]))
