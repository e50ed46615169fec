"""Reference-element bases and quadrature rules."""
from math import factorial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from porohomog import reference as ref


def monomial_integral(i, j):
    return factorial(i) * factorial(j) / factorial(i + j + 2)


@pytest.mark.parametrize("degree", range(1, 13))
def test_triangle_rule_exact(degree):
    pts, w = ref.triangle_rule(degree)
    assert np.isclose(w.sum(), 0.5, rtol=0, atol=1e-15)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            got = np.sum(w * pts[:, 0] ** i * pts[:, 1] ** j)
            assert got == pytest.approx(monomial_integral(i, j), rel=1e-13, abs=1e-16)


@pytest.mark.parametrize("degree", range(1, 12))
def test_line_rule_exact(degree):
    t, w = ref.line_rule(degree)
    for k in range(degree + 1):
        assert np.sum(w * t**k) == pytest.approx(1.0 / (k + 1), rel=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_kronecker_and_partition(degree):
    nodes = ref.node_coords(degree)
    assert len(nodes) == ref.n_local(degree)
    np.testing.assert_allclose(ref.shape_values(degree, nodes), np.eye(len(nodes)), atol=1e-14)
    pts, _ = ref.triangle_rule(6)
    np.testing.assert_allclose(ref.shape_values(degree, pts).sum(axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(ref.shape_grads(degree, pts).sum(axis=-2), 0.0, atol=1e-12)


@pytest.mark.parametrize("degree", [1, 2, 3])
@given(xi=st.floats(0.05, 0.9), frac=st.floats(0.05, 0.95))
def test_gradients_match_finite_differences(degree, xi, frac):
    p = np.array([xi, frac * (1.0 - xi)])
    h = 1e-6
    g = ref.shape_grads(degree, p)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd = (ref.shape_values(degree, p + e) - ref.shape_values(degree, p - e)) / (2 * h)
        np.testing.assert_allclose(g[:, d], fd, atol=1e-7)


@pytest.mark.parametrize("degree", [2, 3])
def test_interpolation_reproduces_polynomials(degree):
    nodes = ref.node_coords(degree)
    f = lambda p: p[..., 0] ** 2 + (degree - 2) * p[..., 0] * p[..., 1] ** 2  # noqa: E731
    centre = np.array([1.0 / 3.0, 1.0 / 3.0])
    val = ref.shape_values(degree, centre) @ f(nodes)
    assert val == pytest.approx(f(centre), abs=1e-14)
    if degree == 2:
        assert val == pytest.approx(1.0 / 9.0, abs=1e-15)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_edge_nodes_lie_on_edge(degree):
    nodes = ref.node_coords(degree)
    for edge in range(3):
        idx = ref.edge_local_nodes(degree, edge)
        t = np.linspace(0, 1, len(idx))
        np.testing.assert_allclose(nodes[idx], ref.edge_ref_points(edge, t), atol=1e-15)


def test_unsupported_degree():
    with pytest.raises(ValueError):
        ref.shape_values(4, np.zeros(2))
