"""Inclusion shapes and block domains."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from porohomog.errors import GeometryError, SpecError
from porohomog.geometry import (
    BL_STRIP, MICRO_STRIP, PRESET_SHAPES, UNIT_CELL, DomainSpec, InclusionShape, build_domain,
)


def test_unit_cell_circle_fluid_area():
    d = build_domain(DomainSpec(UNIT_CELL, PRESET_SHAPES["circle"]))
    assert d.fluid_area == pytest.approx(1 - math.pi / 16, abs=1e-15)
    assert d.fluid_area == pytest.approx(0.8037, abs=1e-4)


def test_unit_cell_ellipse_fluid_area():
    d = build_domain(DomainSpec(UNIT_CELL, PRESET_SHAPES["ellipse"]))
    assert d.fluid_area == pytest.approx(1 - 0.08 * math.pi, abs=1e-15)
    assert d.fluid_area == pytest.approx(0.7487, abs=1e-4)


def test_micro_strip_counts_cells():
    d = build_domain(DomainSpec(MICRO_STRIP, PRESET_SHAPES["circle"], eps=0.5, H=1.0, h=1.0))
    assert len(d.inclusions) == 2
    assert d.bounds == (0.0, 0.5, -1.0, 1.0)
    centres = sorted(inc.center[1] for inc in d.inclusions)
    np.testing.assert_allclose(centres, [-0.75, -0.25])
    assert all(inc.radius == pytest.approx(0.125) for inc in d.inclusions)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 8])
def test_micro_strip_inclusions_fill_porous_part(k):
    eps = 1.0 / k
    d = build_domain(DomainSpec(MICRO_STRIP, PRESET_SHAPES["ellipse"], eps=eps, columns=2))
    assert len(d.inclusions) == 2 * k
    assert all(inc.center[1] < 0 for inc in d.inclusions)
    assert d.fluid_area == pytest.approx(2 * eps * 2 - 2 * k * 0.08 * math.pi * eps**2)


def test_boundary_layer_strip():
    d = build_domain(DomainSpec(BL_STRIP, PRESET_SHAPES["circle"], cutoff=(3, 2)))
    assert d.bounds == (0.0, 1.0, -3.0, 2.0)
    np.testing.assert_allclose(sorted(i.center[1] for i in d.inclusions), [-2.5, -1.5, -0.5])
    assert d.interface == 0.0


def test_errors():
    with pytest.raises(SpecError):
        build_domain(DomainSpec(MICRO_STRIP, PRESET_SHAPES["circle"], eps=0.3))
    with pytest.raises(SpecError):
        build_domain(DomainSpec(BL_STRIP, PRESET_SHAPES["circle"], cutoff=(0, 4)))
    with pytest.raises(SpecError):
        build_domain(DomainSpec("Other"))
    with pytest.raises(GeometryError):
        build_domain(DomainSpec(UNIT_CELL, InclusionShape.circle(0.5)))
    with pytest.raises(GeometryError):
        build_domain(DomainSpec(UNIT_CELL, InclusionShape.ellipse(0.45, 0.2, 0.0, (0.6, 0.5))))
    with pytest.raises(GeometryError):
        InclusionShape.ellipse(0.1, 0.2)
    with pytest.raises(GeometryError):
        InclusionShape.circle(-0.1)


def test_symmetry_flags():
    assert PRESET_SHAPES["circle"].is_mirror_symmetric()
    assert not PRESET_SHAPES["ellipse"].is_mirror_symmetric()
    assert InclusionShape.ellipse(0.4, 0.2, 90.0).is_mirror_symmetric()


def polygon_second_moment(pts):
    """Integral of y^2 over a closed counterclockwise polygon."""
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    return float(np.sum(cross * (y * y + y * yn + yn * yn)) / 12.0)


@given(a=st.floats(0.1, 0.4), ratio=st.floats(0.2, 1.0), rot=st.floats(0.0, 180.0))
def test_second_moment_against_polygon(a, ratio, rot):
    shape = InclusionShape.ellipse(a, a * ratio, rot)
    pts = shape.point(np.linspace(0, 2 * np.pi, 4000, endpoint=False)) - np.array(shape.center)
    assert shape.second_moment_y() == pytest.approx(polygon_second_moment(pts), rel=1e-5)


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)), min_size=1, max_size=20))
def test_projection_lands_on_curve(points):
    shape = PRESET_SHAPES["ellipse"]
    pts = np.array(points)
    pts = pts[np.linalg.norm(pts - 0.5, axis=1) > 1e-3]
    if len(pts) == 0:
        return
    proj = shape.project(pts)
    np.testing.assert_allclose(shape.level(proj), 1.0, atol=1e-10)
    # nothing on the sampled curve is closer than the projection
    curve = shape.point(np.linspace(0, 2 * np.pi, 2000, endpoint=False))
    best = np.min(np.linalg.norm(pts[:, None] - curve[None], axis=2), axis=1)
    assert np.all(np.linalg.norm(pts - proj, axis=1) <= best + 1e-6)


def test_shape_roundtrip():
    for s in PRESET_SHAPES.values():
        assert InclusionShape.from_dict(s.to_dict()) == s
