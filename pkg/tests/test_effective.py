"""Closed-form effective solution."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from porohomog.effective import build_effective, verify_compatibility
from porohomog.errors import SpecError

K_CIRCLE = 0.0199014353519271
K_ELLIPSE = np.array([[0.0122773324576884, 0.00268891986291451], [0.00268891986291451, 0.0122773324576884]])
C1_ELLIPSE = -0.003336740001686

points = st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(-1.0, 1.0)), min_size=1, max_size=10).map(np.array)
spd = st.tuples(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.floats(-0.9, 0.9)).map(
    lambda t: np.array([[t[0], t[2] * np.sqrt(t[0] * t[1])], [t[2] * np.sqrt(t[0] * t[1]), t[1]]]))


def test_circle_values():
    eff = build_effective(K_CIRCLE * np.eye(2), 0.0)
    x = np.array([[0.3, 0.5], [0.9, 0.0]])
    np.testing.assert_array_equal(eff.u_eff(x), [[0.0, -1.0], [0.0, -1.0]])
    assert eff.P_D(np.array([[0.4, -1.0]]))[0] == pytest.approx(-1 / K_CIRCLE, rel=1e-15)
    assert eff.P_D(np.array([[0.4, -1.0]]))[0] == pytest.approx(-50.2476, abs=1e-4)


def test_ellipse_slip():
    eff = build_effective(K_ELLIPSE, C1_ELLIPSE)
    assert eff.slip == pytest.approx(-0.27178, abs=1e-5)
    assert eff.u_eff(np.array([[0.2, 0.0]]))[0, 0] == pytest.approx(C1_ELLIPSE / K_ELLIPSE[1, 1], rel=1e-15)
    assert eff.u_eff(np.array([[0.2, 1.0]]))[0, 0] == 0.0
    np.testing.assert_allclose(eff.u_D(np.zeros((1, 2))), [[-K_ELLIPSE[0, 1] / K_ELLIPSE[1, 1], -1.0]])


@given(K=spd, c1=st.floats(-1.0, 1.0), x=points)
def test_normal_continuity_and_interface_values(K, c1, x):
    eff = build_effective(K, c1)
    on_s = x.copy()
    on_s[:, 1] = 0.0
    np.testing.assert_allclose(eff.u_eff(on_s)[:, 1], -1.0)
    np.testing.assert_allclose(eff.u_D(on_s)[:, 1], -1.0, rtol=1e-14)
    np.testing.assert_allclose(eff.u_eff(on_s)[:, 0], c1 / K[1, 1], rtol=1e-14)
    np.testing.assert_array_equal(eff.P_D(on_s), 0.0)
    jump = eff.u_eff(on_s)[:, 0] - eff.u_D(on_s)[:, 0]
    np.testing.assert_allclose(jump, eff.tangential_jump(), rtol=1e-12, atol=1e-14)
    assert eff.tangential_jump() == pytest.approx(c1 / K[1, 1] + K[0, 1] / K[1, 1], rel=1e-12, abs=1e-14)


@given(K=spd, c1=st.floats(-1.0, 1.0), x=points)
def test_finite_difference_identities(K, c1, x):
    eff = build_effective(K, c1)
    h = 1e-3
    e1, e2 = np.array([h, 0.0]), np.array([0.0, h])

    def d(f, e):
        return (f(x + e) - f(x - e)) / (2 * h)

    def d2(f, e):
        return (f(x + e) - 2 * f(x) + f(x - e)) / h**2

    du1 = d(eff.u_eff, e1)
    du2 = d(eff.u_eff, e2)
    scale = 1 + abs(eff.slip)
    assert np.max(np.abs(du1[:, 0] + du2[:, 1])) <= 1e-10 * scale
    lap = d2(eff.u_eff, e1) + d2(eff.u_eff, e2)
    assert np.max(np.abs(lap)) <= 1e-10 * scale / h
    grad = eff.grad_u_eff(x)
    np.testing.assert_allclose(grad[:, :, 0], du1, atol=1e-10 * scale)
    np.testing.assert_allclose(grad[:, :, 1], du2, atol=1e-10 * scale)
    np.testing.assert_array_equal(eff.p_eff(x), 0.0)
    dP = np.stack([d(eff.P_D, e1), d(eff.P_D, e2)], 1)
    np.testing.assert_allclose(dP, eff.grad_P_D(x), rtol=1e-9)
    # Darcy law and the drained bottom: -K22 dP_D/dx2 = -1
    np.testing.assert_allclose(-K[1, 1] * eff.grad_P_D(x)[:, 1], -1.0, rtol=1e-14)
    np.testing.assert_allclose(eff.u_D(x), -(eff.grad_P_D(x) @ K.T), rtol=1e-14)


def test_compatibility_examples():
    assert verify_compatibility((0.0, -1.0), -1.0, 1.0) == -1.0
    assert verify_compatibility((0.0, 0.0), 0.0) == 0.0
    with pytest.raises(SpecError):
        verify_compatibility((0.0, -0.5), -1.0)
    assert verify_compatibility((0.0, lambda s: -1 + np.sin(2 * np.pi * s)), -1.0) == pytest.approx(-1.0, abs=1e-13)


def test_invalid_permeability():
    with pytest.raises(SpecError):
        build_effective(np.array([[1.0, 0.0], [0.0, 0.0]]), 0.0)
    with pytest.raises(SpecError):
        build_effective(np.array([[1.0, 0.0], [0.0, -1.0]]), 0.0)
    with pytest.raises(SpecError):
        build_effective(np.array([[0.1, 0.2], [0.2, 0.1]]), 0.0)
    with pytest.raises(SpecError):
        build_effective(np.eye(3), 0.0)
