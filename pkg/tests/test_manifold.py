import math

import numpy as np
import pytest
from scipy.optimize import brentq
from src.errors import ChartOverflow, SpecError
from src.hamiltonian import Dims, LoopSpec, ModelSpec, ThreeBodyParams, build_loop_system, build_model, build_threebody
from src.manifold import CACHE_SIZES, ManifoldChart, eigenvalue_lambda, fit_local_graphs, limit_direction, straighten


@pytest.fixture(scope="module")
def loop_spec():
    return LoopSpec(twist=0.0)


@pytest.fixture(scope="module")
def loop_system(loop_spec):
    return build_loop_system(loop_spec)


@pytest.fixture(scope="module")
def model_system():
    return build_model(ModelSpec(Dims(1, 1), lam="1 + 0.05*(x1**2 + y1**2)",
                                 cubic_coeffs={(2, 1): 0.1, (1, 2): -0.05}))


def _loop_stable_p(spec: LoopSpec, q: float) -> float:
    """p on the incoming branch of the loop at coordinate q < 0."""
    speed = spec.limit_speed(np.zeros(2))
    rho = brentq(lambda r: speed * r / (1 + r) ** 3 - abs(q), 1e-16, 0.3)
    return abs(q) * rho


def test_chart_rejects_bad_parameters(model_system):
    with pytest.raises(SpecError):
        ManifoldChart(model_system, [0.0, 0.0], order=4)
    with pytest.raises(SpecError):
        ManifoldChart(model_system, [0.0, 0.0], radius=0.0)


def test_eigenvalue_on_model(model_system):
    assert eigenvalue_lambda(model_system, [0.3, 0.4]) == pytest.approx(1.0125)
    chart = fit_local_graphs(model_system, [0.0, 0.0])
    assert chart.lam([0.3, 0.4]) == pytest.approx(1.0125)
    assert chart.contains([0.4, -0.4])
    assert not chart.contains([0.6, 0.0])


def test_frame_cache_is_bounded(model_system):
    chart = ManifoldChart(model_system, [0.0, 0.0])
    for s in np.linspace(-0.4, 0.4, CACHE_SIZES["frames"] + 100):
        chart.lam([s, 0.5 * s])
    assert chart.cache_info()["frames"].currsize == CACHE_SIZES["frames"]
    chart.lam([0.1, 0.0])
    chart.lam([0.1 + 1e-15, -0.0])
    assert chart.cache_info()["frames"].hits >= 1


def test_threebody_eigenvalue_matches_closed_form():
    sys = build_threebody(ThreeBodyParams())
    assert eigenvalue_lambda(sys, [1.0, 0.0, 0.0, 0.0]) == pytest.approx(math.sqrt(2), rel=1e-8)


def test_model_graphs_vanish(model_system):
    # every perturbation monomial carries both q and p, so q = 0 and p = 0 stay invariant
    chart = fit_local_graphs(model_system, [0.0, 0.0])
    assert abs(chart.f_plus([0.2, 0.1], [0.07])[0]) < 1e-14
    assert abs(chart.f_minus([0.2, 0.1], [-0.07])[0]) < 1e-14


@pytest.mark.parametrize("q", [-0.005, -0.01])
def test_loop_stable_graph_matches_loop(loop_spec, loop_system, q):
    chart = fit_local_graphs(loop_system, [0.0, 0.0], order=3)
    expected = _loop_stable_p(loop_spec, q)
    assert chart.f_plus([0.0, 0.0], [q])[0] == pytest.approx(expected, abs=2e-9)


def test_loop_unstable_graph_is_mirror_image(loop_system):
    chart = fit_local_graphs(loop_system, [0.0, 0.0], order=3)
    for value in (0.01, 0.05):
        assert chart.f_minus([0.0, 0.0], [value])[0] == pytest.approx(-chart.f_plus([0.0, 0.0], [-value])[0])


def test_invariance_residual_improves_with_order(loop_system):
    second = fit_local_graphs(loop_system, [0.0, 0.0], order=2).invariance_residual([0.0, 0.0], samples=4)
    third = fit_local_graphs(loop_system, [0.0, 0.0], order=3).invariance_residual([0.0, 0.0], samples=4)
    assert max(third["plus"], third["minus"]) < max(second["plus"], second["minus"])
    assert set(third) == {"plus", "minus", "scaled"}


def test_invariance_residual_records_action(model_system):
    chart = fit_local_graphs(model_system, [0.0, 0.0])
    report = chart.invariance_residual([0.1, 0.0], samples=3)
    assert report["plus"] < 1e-12
    assert any("Invariance residual" in action for action in chart.actions)


def test_straightening_inverse(loop_system):
    chart = fit_local_graphs(loop_system, [0.0, 0.0])
    straight = straighten(loop_system, chart)
    points = np.array([[0.01, -0.02, 0.05, 0.03], [0.0, 0.0, -0.08, 0.01]])
    assert straight.composition_residual(points) < 1e-12
    with pytest.raises(SpecError):
        straighten(loop_system, chart, order=2)


def test_straightened_linear_field():
    linear = build_model(ModelSpec(Dims(1, 1), lam=2.0))
    chart = fit_local_graphs(linear, [0.0, 0.0])
    field = chart.straightening().pushforward_field(np.array([0.1, 0.2, 0.03, -0.04]))
    np.testing.assert_allclose(field, [0.0, 0.0, -0.06, -0.08], atol=1e-14)


def test_limit_direction():
    linear = build_model(ModelSpec(Dims(1, 1), lam=1.0))
    chart = fit_local_graphs(linear, [0.0, 0.0])
    direction = limit_direction(linear, chart, [0.0, 0.0], q_plus=[0.05])
    assert direction.kind == "stable"
    np.testing.assert_allclose(direction.vector, [0.05])
    with pytest.raises(ValueError):
        limit_direction(linear, chart, [0.0, 0.0])
    with pytest.raises(ValueError):
        limit_direction(linear, chart, [0.0, 0.0], q_plus=[0.05], p_minus=[0.05])
    with pytest.raises(ChartOverflow):
        limit_direction(linear, chart, [0.0, 0.0], p_minus=[0.2])


def test_chart_save_and_load(loop_system, tmp_path):
    chart = fit_local_graphs(loop_system, [0.0, 0.0])
    path = chart.save(tmp_path / "chart.json")
    loaded = ManifoldChart.load(path, loop_system)
    assert loaded.order == chart.order
    assert loaded.f_plus([0.0, 0.0], [-0.03])[0] == pytest.approx(chart.f_plus([0.0, 0.0], [-0.03])[0])
    with pytest.raises(FileNotFoundError):
        ManifoldChart.load(tmp_path / "missing.json", loop_system)
