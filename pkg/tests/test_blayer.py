"""Interface boundary layer on the truncated strip."""
import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL
from porohomog import femcore as fc
from porohomog.blayer import (
    BoundaryLayerResult, DecayWarning, check_strip, compute_boundary_layer, evaluate_bl,
    extract_constant_profile, flux_defect, strip_mesh,
)
from porohomog.cellprob import compute_cell, transfer_cell_fields
from porohomog.errors import MeshError, SpecError
from porohomog.mesh import PORE


@pytest.fixture(scope="module")
def production_bl(ellipse_study):
    return ellipse_study.study.blayer(ellipse_study.study.config.mesh.levels)


@pytest.fixture(scope="module")
def production_circle_bl(circle_study):
    return circle_study.study.blayer(circle_study.study.config.mesh.levels)


def interface_points(bl, n=41):
    y1 = np.linspace(0.0, 1.0, n, endpoint=False) + 0.5 / n
    return np.stack([y1, np.zeros(n)], 1)


def both_sides(bl, pts):
    up = bl.evaluate(pts, gradients=False)
    cells, refs = fc.locator(bl.mesh, PORE).locate(pts)
    down = bl.at(cells, refs, gradients=False)
    return up, down


# --- invariants -------------------------------------------------------------------


@pytest.mark.parametrize("name", ["ellipse_bl", "circle_bl", "production_bl"])
def test_second_constant_vanishes(name, request):
    bl = request.getfixturevalue(name)
    assert abs(bl.C2bl_check) <= 1e-6 * (1 + abs(bl.C1bl))


@pytest.mark.parametrize("name", ["ellipse_bl", "circle_bl"])
def test_jump_recovery(name, request):
    bl = request.getfixturevalue(name)
    pts = interface_points(bl)
    up, down = both_sides(bl, pts)
    w = transfer_cell_fields(bl.cell, pts, gradients=False)["w"][:, bl.j - 1]
    expected = bl.Kcol - w
    np.testing.assert_allclose(up["beta"] - down["beta"], expected, atol=1e-10)
    # the pressure jump is the cell pressure trace
    pi = transfer_cell_fields(bl.cell, pts, gradients=False)["pi"][:, bl.j - 1]
    np.testing.assert_allclose(up["omega"] - down["omega"], -pi, atol=1e-10)


def test_zero_net_flux_production(production_bl):
    for c in (0.5, 1.5, 2.5, 3.5, -0.3, -1.5, -2.7):
        side = "+" if c >= 0 else "-"
        assert abs(production_bl.line_mean("beta2", c, side)) <= 1e-6


def test_profile_constancy_production(production_bl):
    lines = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    beta = extract_constant_profile(production_bl, "beta1_mean", lines)
    omega = extract_constant_profile(production_bl, "omega_mean", lines)
    assert beta["spread"] <= 1e-6
    assert omega["spread"] <= 1e-5
    assert beta["means"][-1] == production_bl.C1bl
    small = extract_constant_profile(production_bl, "beta1_mean", [0.5, 1.0, 2.0])
    assert small["spread"] <= 1e-6 * abs(production_bl.C1bl)


def test_pressure_trace_at_interface(production_bl, production_circle_bl):
    for bl in (production_bl, production_circle_bl):
        at_zero = bl.line_mean("omega", 0.0, "+")
        assert abs(at_zero - bl.Cpi) <= 1e-5
        assert extract_constant_profile(bl, "omega_mean", [1.0])["means"][0] == bl.Cpi


def test_monotone_decay_production(production_bl):
    d = production_bl.decay
    h = np.array(d["heights_up"])
    dev = np.array(d["deviation_up"])
    sel = (h >= 1.0) & (h <= production_bl.cutoff[1] - 1.0)
    assert np.all(np.diff(dev[sel]) < 0)
    assert d["rate_up"] > 0
    # below S, away from the truncated bottom line
    assert np.all(np.diff(d["deviation_down"][:-1]) < 0)


def test_circle_symmetry(circle_bl):
    assert abs(circle_bl.C1bl) <= 1e-6


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(-3.9, 3.9)), min_size=1, max_size=15))
def test_circle_beta1_antisymmetric(circle_bl, pts):
    pts = np.array(pts)
    local = pts - np.floor(pts)
    pts = pts[(pts[:, 1] >= 0) | (np.linalg.norm(local - 0.5, axis=1) > 0.26)]
    pts = pts[np.abs(pts[:, 1]) > 1e-6]
    if len(pts) == 0:
        return
    refl = pts.copy()
    refl[:, 0] = 1.0 - refl[:, 0]
    a = circle_bl.evaluate(pts, gradients=False)["beta"][:, 0]
    b = circle_bl.evaluate(refl, gradients=False)["beta"][:, 0]
    assert np.max(np.abs(a + b)) <= 1e-6


def test_cutoff_stability(ellipse, ellipse_cell, ellipse_bl, ellipse_bl6):
    fine_cell = compute_cell(ellipse, dataclasses.replace(SMALL, levels=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DecayWarning)
        fine = compute_boundary_layer(fine_cell, (4, 4))
    for name in ("C1bl", "Cpi"):
        cut = abs(getattr(ellipse_bl, name) - getattr(ellipse_bl6, name))
        disc = abs(getattr(ellipse_bl, name) - getattr(fine, name))
        assert cut < disc


def test_bottom_flux_correction_recorded(ellipse_bl, ellipse_cell):
    assert ellipse_bl.report["bottom_flux_defect"] == flux_defect(ellipse_cell, 2)
    assert abs(ellipse_bl.report["bottom_flux_defect"]) < 5e-3 * ellipse_cell.K[1, 1]


# --- evaluation and profiles ----------------------------------------------------------


def test_far_field_substitution(ellipse_bl):
    eps = 0.125
    x = np.array([[0.03, 10 * eps], [0.07, -10 * eps], [0.01, 4 * eps]])
    out = evaluate_bl(ellipse_bl, x, eps)
    np.testing.assert_array_equal(out["beta"][0], [ellipse_bl.C1bl, 0.0])
    assert out["omega"][0] == ellipse_bl.Cpi
    np.testing.assert_array_equal(out["beta"][1], [0.0, 0.0])
    assert out["omega"][1] == 0.0
    np.testing.assert_array_equal(out["beta"][2], [ellipse_bl.C1bl, 0.0])
    with pytest.raises(ValueError):
        evaluate_bl(ellipse_bl, x, eps, band=5.0)


@given(st.lists(st.tuples(st.floats(0.0, 0.2499), st.floats(-0.99, 0.99)), min_size=1, max_size=15))
def test_in_band_matches_direct(ellipse_bl, pts):
    eps = 0.25
    x = np.array(pts)
    y = x / eps
    loc = y - np.floor(y)
    x = x[(y[:, 1] >= 0) | (ellipse_bl.cell.shape.level(loc) > 1.02)]
    if len(x) == 0:
        return
    got = evaluate_bl(ellipse_bl, x, eps, gradients=True)
    direct = ellipse_bl.evaluate(x / eps)
    np.testing.assert_array_equal(got["beta"], direct["beta"])
    np.testing.assert_array_equal(got["omega"], direct["omega"])
    np.testing.assert_array_equal(got["grad_beta"], direct["grad_beta"])


def test_profile_errors(ellipse_bl):
    with pytest.raises(ValueError):
        extract_constant_profile(ellipse_bl, "beta2_mean", [1.0])
    with pytest.raises(ValueError):
        extract_constant_profile(ellipse_bl, "beta1_mean", [4.5])
    with pytest.raises(ValueError):
        extract_constant_profile(ellipse_bl, "omega_mean", [-0.5])


# --- plumbing -----------------------------------------------------------------------------


def test_inconsistent_strip(ellipse_cell):
    strip = strip_mesh(ellipse_cell, (2, 2))
    check_strip(strip, ellipse_cell)
    bad = dataclasses.replace(strip, points=strip.points.copy())
    node = bad.cells[np.flatnonzero(bad.cell_tags == PORE)[0], 4]
    bad.points[node] += 1e-6
    with pytest.raises(MeshError):
        check_strip(bad, ellipse_cell)


def test_decay_warning_for_short_strip(ellipse_cell):
    with pytest.warns(DecayWarning):
        compute_boundary_layer(ellipse_cell, (2, 2))
    with pytest.raises(SpecError):
        compute_boundary_layer(ellipse_cell, (2, 1))


def test_invalid_index(ellipse_cell):
    with pytest.raises(ValueError):
        compute_boundary_layer(ellipse_cell, (2, 2), j=3)


def test_save_load(ellipse_bl, ellipse_cell, tmp_path):
    ellipse_bl.save(tmp_path / "b")
    back = BoundaryLayerResult.load(tmp_path / "b", ellipse_cell)
    assert (back.C1bl, back.Cpi, back.C2bl_check) == (ellipse_bl.C1bl, ellipse_bl.Cpi, ellipse_bl.C2bl_check)
    np.testing.assert_array_equal(back.gamma.vel_coeffs, ellipse_bl.gamma.vel_coeffs)
    np.testing.assert_array_equal(back.gamma.pres_coeffs, ellipse_bl.gamma.pres_coeffs)
