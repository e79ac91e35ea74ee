import numpy as np
import pytest
from src.polynomial import Polynomial, evaluate_all, evaluate_jacobian, jacobian, tensor_polynomials


def test_arithmetic_and_degree():
    x = Polynomial.variable(2, 0)
    y = Polynomial.variable(2, 1)
    poly = x * x + 3 * x * y - 2
    assert poly.degree == 2
    assert poly.lowest_degree == 0
    assert poly([1.0, 2.0]) == pytest.approx(1 + 6 - 2)
    assert (poly - poly).terms == {}


def test_mismatched_variables():
    with pytest.raises(ValueError):
        Polynomial(2, {(1,): 1.0})
    with pytest.raises(ValueError):
        Polynomial.variable(2, 0) + Polynomial.variable(3, 0)


def test_truncated_multiply_and_homogeneous_part():
    x = Polynomial.variable(1, 0)
    series = 1 + x + x * x
    product = series.multiply(series, max_degree=2)
    assert product.degree == 2
    assert product.homogeneous(2).terms == {(2,): 3.0}
    assert series.truncate(1).terms == {(0,): 1.0, (1,): 1.0}


def test_diff_and_jacobian():
    x = Polynomial.variable(2, 0)
    y = Polynomial.variable(2, 1)
    poly = x * x * y
    assert poly.diff(0).terms == {(1, 1): 2.0}
    assert poly.diff(1).terms == {(2, 0): 1.0}
    jac = evaluate_jacobian(jacobian([poly, x + y]), np.array([2.0, 3.0]))
    np.testing.assert_allclose(jac, [[12.0, 4.0], [1.0, 1.0]])


def test_compose_matches_direct_evaluation():
    t = Polynomial.variable(1, 0)
    x = Polynomial.variable(2, 0)
    y = Polynomial.variable(2, 1)
    poly = x * x + x * y
    composed = poly.compose([1 + t, t * t])
    for value in (-0.5, 0.3, 1.7):
        direct = poly(np.array([1 + value, value ** 2]))
        assert composed(np.array([value])) == pytest.approx(direct)


def test_embed_reindexes_variables():
    poly = Polynomial(2, {(1, 2): 4.0})
    embedded = poly.embed(4, [3, 1])
    assert embedded.terms == {(0, 2, 0, 1): 4.0}


def test_table_roundtrip_keeps_coefficients():
    poly = Polynomial(2, {(0, 3): -0.25, (2, 1): 1.5})
    restored = Polynomial.from_table(2, poly.to_table())
    assert restored.terms == poly.terms


def test_tensor_polynomials_rebuild_taylor_series():
    # f(w) = (w0 * w1, w0 ** 2 / 2)
    first = np.zeros((2, 2))
    second = np.zeros((2, 2, 2))
    second[0, 0, 1] = second[0, 1, 0] = 1.0
    second[1, 0, 0] = 1.0
    polys = tensor_polynomials([first, second], 2)
    points = np.array([[0.3, -0.7], [1.0, 2.0]])
    values = evaluate_all(polys, points)
    np.testing.assert_allclose(values[:, 0], points[:, 0] * points[:, 1])
    np.testing.assert_allclose(values[:, 1], 0.5 * points[:, 0] ** 2)
