import math

import numpy as np
import pytest
from src.errors import ChartOverflow, ConeViolation, SpecError
from src.hamiltonian import Dims, LoopSpec, ModelSpec, ThreeBodyParams, build_loop_system, build_model, build_threebody
from src.ladder import linear_fit
from src.manifold import fit_local_graphs
from src.scattering import (GenFunRecord, HeteroclinicChain, HeteroclinicOrbit, ScatteringBranch, SectionShear,
                            SphereChart, chain_positive, genfun_L, genfun_L_T, genfun_R_mu, genfun_record,
                            genfun_S_minus, genfun_S_plus, hessian_asymmetry, load_chain, planted_chain,
                            poincare_record, save_chain, scattering_branch, symplectic_angle, transverse_poincare,
                            twist_term)
from src.shadow import _branch_derivatives, branch_map_jacobian

Z = np.array([0.2, 0.1, 0.1, -0.1])


@pytest.fixture(scope="module")
def linear():
    sys = build_model(ModelSpec(Dims(1, 1), lam=1.0))
    return sys, fit_local_graphs(sys, np.zeros(2))


@pytest.fixture(scope="module")
def cubic():
    sys = build_model(ModelSpec(Dims(1, 1), lam="1 + 0.05*(x1**2 + y1**2)",
                                cubic_coeffs={(2, 1): 0.1, (1, 2): -0.05}))
    return sys, fit_local_graphs(sys, np.zeros(2))


@pytest.fixture(scope="module")
def loop():
    spec = LoopSpec()
    sys = build_loop_system(spec)
    chart = fit_local_graphs(sys, spec.critical_corner())
    return spec, sys, chart, planted_chain(sys, spec, chart)


def _orbit(v_plus, v_minus, corner=(0.0, 0.0)) -> HeteroclinicOrbit:
    corner = np.asarray(corner, dtype=float)
    return HeteroclinicOrbit(corner, corner, np.asarray(v_minus, dtype=float), np.asarray(v_plus, dtype=float))


def test_sphere_chart_stereographic_coordinates():
    sphere = SphereChart(0.1, np.array([0.0, 0.0, 1.0]))
    assert sphere.dim == 2
    np.testing.assert_allclose(sphere.point([0.0, 0.0]), [0.0, 0.0, 0.1])
    xi = np.array([0.3, -0.4])
    point = sphere.point(xi)
    assert np.linalg.norm(point) == pytest.approx(0.1)
    np.testing.assert_allclose(sphere.coordinates(point), xi, atol=1e-14)
    h = 1e-6
    numeric = np.array([(sphere.point(xi + e) - sphere.point(xi - e)) / (2 * h) for e in np.eye(2) * h]).T
    np.testing.assert_allclose(sphere.jacobian(xi), numeric, atol=1e-8)


def test_section_shear_fixes_base():
    rng = np.random.default_rng(0)
    shear = SectionShear.random(np.array([0.5, -0.2]), 0.1, rng, seed=0, attempt=1)
    np.testing.assert_array_equal(shear.matrix, shear.matrix.T)
    np.testing.assert_allclose(shear.apply([1.0, 2.0], shear.base), [1.0, 2.0])
    assert shear.potential(shear.base) == 0.0
    restored = SectionShear.from_dict(shear.to_dict())
    np.testing.assert_array_equal(restored.matrix, shear.matrix)
    assert restored.attempt == 1
    y = np.array([0.7, 0.1])
    offset = y - shear.base
    expected = float(y @ shear.matrix @ offset) - 0.5 * float(offset @ shear.matrix @ offset)
    assert shear.value_shift(y) == pytest.approx(expected)


def test_generating_functions_need_adapted_coordinates():
    sys = build_threebody(ThreeBodyParams())
    with pytest.raises(SpecError):
        genfun_S_plus(sys, None, [1.0, 0.0], [0.0, 0.0], [0.01, 0.0])
    with pytest.raises(SpecError):
        genfun_R_mu(sys, None, np.zeros(8), 1e-6)


def test_linear_S_plus_is_bilinear(linear):
    sys, chart = linear
    sample = genfun_S_plus(sys, chart, [0.2], [0.1], [0.08])
    assert sample.value == pytest.approx(0.02, abs=1e-12)
    np.testing.assert_allclose(sample.gradient, [0.1, 0.2, 0.0], atol=1e-12)
    assert sample.extras["tail"] < 1e-10
    with pytest.raises(ChartOverflow):
        genfun_S_plus(sys, chart, [0.2], [0.1], [0.5])


def test_linear_S_minus_is_bilinear(linear):
    sys, chart = linear
    sample = genfun_S_minus(sys, chart, [0.2], [0.1], [-0.08])
    assert sample.value == pytest.approx(0.02, abs=1e-12)
    np.testing.assert_allclose(sample.gradient, [0.1, 0.2, 0.0], atol=1e-12)


def test_linear_L_reflection_point(linear):
    sys, chart = linear
    sample = genfun_L(sys, chart, Z)
    assert sample.value == pytest.approx(0.02, abs=1e-12)
    np.testing.assert_allclose(sample.extras["zeta"], [0.2, 0.1], atol=1e-12)
    np.testing.assert_allclose(sample.gradient, [0.1, 0.2, 0.0, 0.0], atol=1e-12)


def test_linear_L_T_correction(linear):
    sys, chart = linear
    T = 5.0
    sample = genfun_L_T(sys, chart, Z, T)
    # Hamilton action vanishes on the linear saddle; the correction is <q_minus, p_minus>
    assert sample.value - 0.02 == pytest.approx(math.exp(-2 * T) * (0.1 * -0.1), rel=1e-7)


def test_R_mu_against_closed_form(linear):
    sys, chart = linear
    mu = 1e-6
    sample = genfun_R_mu(sys, chart, Z, mu)
    pairing = 0.1 * -0.1
    # R_mu - L = -mu (1 + ln(-<q+, p->/mu)) on the linear saddle
    assert sample.value - 0.02 == pytest.approx(-mu * (1 + math.log(-pairing / mu)), rel=1e-6)
    assert sample.extras["T"] == pytest.approx(0.5 * math.log(-pairing / mu), abs=1e-8)
    # dR/dq_plus is the twist term -mu p- / (lambda <q+, p->)
    assert sample.gradient[2] == pytest.approx(twist_term([0.1], [-0.1], mu, 1.0)[0], rel=1e-6)
    with pytest.raises(ConeViolation):
        genfun_R_mu(sys, chart, np.array([0.2, 0.1, 0.1, 0.1]), mu)


def test_twist_term_value():
    assert twist_term([0.1], [-0.1], 1e-6, 1.0)[0] == pytest.approx(-1e-5)


def test_record_gradient_matches_conjugates(linear):
    sys, chart = linear
    record = genfun_record("S_plus", sys, chart)
    argument = np.array([0.2, 0.1, 0.08])
    np.testing.assert_allclose(record.gradient(argument), record.conjugates(argument), atol=1e-8)
    assert record.fix_base(argument) == pytest.approx(0.02, abs=1e-12)
    assert record.value(argument) == pytest.approx(0.0, abs=1e-14)


def test_record_hessian_of_L_is_symmetric(linear):
    sys, chart = linear
    hessian = genfun_record("L", sys, chart).hessian(Z)
    expected = np.zeros((4, 4))
    expected[0, 1] = expected[1, 0] = 1.0
    np.testing.assert_allclose(hessian, expected, atol=1e-6)
    assert hessian_asymmetry(hessian) < 1e-4


def test_record_rejects_unknown_kind(linear):
    sys, chart = linear
    with pytest.raises(SpecError):
        GenFunRecord("G", (), (), lambda a: None)
    with pytest.raises(SpecError):
        genfun_record("F", sys, chart)


def test_symplectic_angle_sign():
    positive = HeteroclinicChain([_orbit([0.1], [-0.1])])
    assert symplectic_angle(positive, 0) == pytest.approx(0.01)
    assert chain_positive(positive) == (True, pytest.approx(0.01))
    flat = HeteroclinicChain([_orbit([0.1, 0.0], [0.0, 0.1])])
    is_positive, margin = chain_positive(flat)
    assert not is_positive
    assert margin == 0.0


def test_angle_uses_incoming_and_outgoing_orbits():
    chain = HeteroclinicChain([_orbit([0.2], [0.3]), _orbit([-0.5], [0.1])])
    # corner 0 pairs v_plus of orbit 1 with v_minus of orbit 0
    assert symplectic_angle(chain, 0) == pytest.approx(0.15)
    assert symplectic_angle(chain, 1) == pytest.approx(-0.02)
    open_chain = HeteroclinicChain(chain.orbits, periodic=False)
    assert list(open_chain.corner_indices()) == [1]


@pytest.mark.slow
def test_planted_loop_is_positive(loop):
    spec, sys, chart, chain = loop
    orbit = chain.orbits[0]
    assert len(chain) == 1
    assert orbit.residual <= 1e-6
    assert orbit.certificate > 0
    assert chain.corner_mismatch() < 1e-6
    assert orbit.exit_state[3] == pytest.approx(chart.radius)
    assert orbit.entry_state[2] == pytest.approx(-chart.radius)
    assert sys.energy(orbit.exit_state) == pytest.approx(0.0, abs=1e-9)
    positive, margin = chain_positive(chain)
    assert positive
    assert margin == pytest.approx(-float(orbit.v_plus @ orbit.v_minus))


@pytest.mark.slow
def test_chain_save_and_load(loop, tmp_path):
    _, _, _, chain = loop
    path = save_chain(chain, tmp_path / "chain.json")
    restored = load_chain(path)
    assert len(restored) == 1
    assert restored.angles == pytest.approx(chain.angles)
    np.testing.assert_allclose(restored.orbits[0].exit_state, chain.orbits[0].exit_state)
    with pytest.raises(FileNotFoundError):
        load_chain(tmp_path / "missing.json")


@pytest.mark.slow
def test_section_map_gradient_identity(loop):
    _, sys, _, chain = loop
    orbit = chain.orbits[0]
    X = orbit.section_data(sys.dims)
    sample, shear = transverse_poincare(sys, orbit, X)
    assert sample.kind == "F"
    record = poincare_record(sys, orbit, shear=shear)
    np.testing.assert_allclose(record.gradient(X), sample.gradient, atol=1e-6)


@pytest.mark.slow
def test_nonlinear_L_reflection_point(cubic):
    sys, chart = cubic
    sample = genfun_L(sys, chart, Z)
    plus, minus = sample.extras["S_plus"], sample.extras["S_minus"]
    np.testing.assert_allclose(sample.extras["zeta"], np.concatenate([plus.extras["x0"], minus.extras["y0"]]),
                               atol=1e-10)
    np.testing.assert_allclose(sample.extras["zeta"], Z[:2], atol=1e-2)
    assert sample.extras["iterations"] <= 6


@pytest.mark.slow
def test_fixed_time_L_T_converges_to_L(cubic):
    sys, chart = cubic
    reflection = genfun_L(sys, chart, Z)
    lam = chart.lam(reflection.extras["zeta"])
    times = [4.0, 5.0, 6.0, 7.0]
    values = np.array([genfun_L_T(sys, chart, Z, T).value for T in times])
    slope = linear_fit(times, np.log(np.abs(values - reflection.value))).slope
    assert slope == pytest.approx(-2 * lam, rel=0.02)
    steps = np.abs(np.diff(values))
    assert np.all(steps[1:] < steps[:-1])


@pytest.mark.slow
def test_R_mu_remainder_scales_like_mu_log_mu(cubic):
    sys, chart = cubic
    grid = [np.array([0.2, 0.1, 0.1, -0.1]), np.array([-0.1, 0.15, 0.08, -0.1]), np.array([0.0, -0.2, 0.1, -0.07])]
    limits = [genfun_L(sys, chart, point).value for point in grid]
    constants = []
    for mu in [1e-6, 1e-7, 1e-8]:
        gap = max(abs(genfun_R_mu(sys, chart, point, mu).value - limit) for point, limit in zip(grid, limits))
        constants.append(gap / (mu * abs(math.log(mu))))
    mean = float(np.mean(constants))
    assert all(abs(c - mean) <= 0.25 * mean for c in constants)


@pytest.mark.slow
def test_R_mu_twist_by_finite_differences(cubic):
    sys, chart = cubic
    mu, h = 1e-6, 1e-4
    point = np.array([0.2, 0.1, 0.08, -0.1])
    shifted = [point + sign * h * np.eye(4)[2] for sign in (1, -1)]
    slope = (genfun_R_mu(sys, chart, shifted[0], mu).value - genfun_R_mu(sys, chart, shifted[1], mu).value) / (2 * h)
    sample = genfun_R_mu(sys, chart, point, mu)
    graph = chart.f_plus(point[:2], point[2:3])[0]
    lam = chart.lam(sample.extras["zeta"])
    expected = twist_term(point[2:3], point[3:], mu, lam)[0]
    assert slope - graph == pytest.approx(expected, rel=0.2)
    assert sample.gradient[2] == pytest.approx(slope, rel=1e-2)


@pytest.mark.slow
def test_scattering_branch_conjugates(loop):
    _, sys, chart, chain = loop
    orbit = chain.orbits[0]
    x_minus, y_plus, h = np.array([0.04]), np.array([-0.03]), 1e-4
    point = scattering_branch(sys, chart, orbit, x_minus, y_plus)
    assert np.isfinite(point.condition)
    d_x = (scattering_branch(sys, chart, orbit, x_minus + h, y_plus).value
           - scattering_branch(sys, chart, orbit, x_minus - h, y_plus).value) / (2 * h)
    d_y = (scattering_branch(sys, chart, orbit, x_minus, y_plus + h).value
           - scattering_branch(sys, chart, orbit, x_minus, y_plus - h).value) / (2 * h)
    assert d_x == pytest.approx(point.y[0], abs=1e-5)
    assert d_y == pytest.approx(point.x_next[0], abs=1e-5)
    branch = ScatteringBranch(sys, chart, orbit)
    assert branch(x_minus, y_plus).value == pytest.approx(point.value, abs=1e-9)


@pytest.mark.slow
def test_scattering_branch_map_is_symplectic(loop):
    _, sys, chart, chain = loop
    branch = ScatteringBranch(sys, chart, chain.orbits[0], tol=1e-10)
    blocks = _branch_derivatives(branch, np.array([0.04]), np.array([-0.03]), 1e-3)
    jacobian = branch_map_jacobian(*blocks)
    omega = np.array([[0.0, 1.0], [-1.0, 0.0]])
    np.testing.assert_allclose(jacobian.T @ omega @ jacobian, omega, atol=1e-5)
