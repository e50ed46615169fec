"""Inclusion shapes and analytic domain descriptions.

All domains are unions of square blocks. A block is either a pore cell
(unit square with one solid inclusion) or a free-fluid square. The unit
cell is a single pore block; the microscopic strip stacks pore blocks of
size eps below the interface and free blocks above it; the boundary-layer
strip does the same with unit blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import GeometryError, SpecError

CIRCLE = "circle"
ELLIPSE = "ellipse"


@dataclass(frozen=True)
class InclusionShape:
    """Solid inclusion, described in unit-cell coordinates.

    A circle uses ``radius``; an ellipse uses ``semi_axes`` (a >= b) and an
    anticlockwise ``rotation`` in degrees.
    """

    kind: str = CIRCLE
    center: tuple = (0.5, 0.5)
    radius: float = 0.25
    semi_axes: tuple = (0.4, 0.2)
    rotation: float = 0.0

    def __post_init__(self):
        if self.kind not in (CIRCLE, ELLIPSE):
            raise GeometryError(f"unknown inclusion kind {self.kind!r}")
        if self.kind == CIRCLE and not self.radius > 0:
            raise GeometryError("circle radius must be positive")
        if self.kind == ELLIPSE:
            a, b = self.semi_axes
            if not (a >= b > 0):
                raise GeometryError("ellipse semi-axes must satisfy a >= b > 0")

    @classmethod
    def circle(cls, radius=0.25, center=(0.5, 0.5)):
        return cls(CIRCLE, tuple(center), float(radius))

    @classmethod
    def ellipse(cls, a=0.4, b=0.2, rotation=45.0, center=(0.5, 0.5)):
        return cls(ELLIPSE, tuple(center), semi_axes=(float(a), float(b)), rotation=float(rotation))

    @property
    def axes(self):
        if self.kind == CIRCLE:
            return self.radius, self.radius
        return self.semi_axes

    @property
    def _rot(self):
        th = math.radians(self.rotation if self.kind == ELLIPSE else 0.0)
        return np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])

    def placed(self, offset, scale):
        """The same inclusion under x -> scale * (x + offset)."""
        cx, cy = self.center
        center = (scale * (cx + offset[0]), scale * (cy + offset[1]))
        if self.kind == CIRCLE:
            return replace(self, center=center, radius=self.radius * scale)
        a, b = self.semi_axes
        return replace(self, center=center, semi_axes=(a * scale, b * scale))

    # --- parametrisation -------------------------------------------------
    def point(self, t):
        a, b = self.axes
        t = np.asarray(t, dtype=float)
        local = np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
        return local @ self._rot.T + np.asarray(self.center)

    def tangent(self, t):
        a, b = self.axes
        t = np.asarray(t, dtype=float)
        return np.stack([-a * np.sin(t), b * np.cos(t)], axis=-1) @ self._rot.T

    def normal(self, t):
        tan = self.tangent(t)
        nrm = np.stack([tan[..., 1], -tan[..., 0]], axis=-1)
        return nrm / np.linalg.norm(nrm, axis=-1, keepdims=True)

    def _local(self, points):
        return (np.asarray(points, dtype=float) - np.asarray(self.center)) @ self._rot

    def level(self, points):
        """< 1 inside the inclusion, 1 on its boundary, > 1 outside."""
        a, b = self.axes
        loc = self._local(points)
        return (loc[..., 0] / a) ** 2 + (loc[..., 1] / b) ** 2

    def contains(self, points):
        return self.level(points) < 1.0

    def parameter(self, points):
        """Curve parameter of the closest boundary point."""
        a, b = self.axes
        loc = self._local(points)
        x, y = loc[..., 0], loc[..., 1]
        t = np.arctan2(a * y, b * x)
        if self.kind == CIRCLE:
            return t
        # seed from the nearest of a coarse sample: the radial guess can sit on
        # a distance maximum for interior points near the major axis
        grid = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
        d2 = (x[..., None] - a * np.cos(grid)) ** 2 + (y[..., None] - b * np.sin(grid)) ** 2
        t = grid[np.argmin(d2, axis=-1)]
        for _ in range(40):
            s, c = np.sin(t), np.cos(t)
            f = (a * a - b * b) * s * c - x * a * s + y * b * c
            df = (a * a - b * b) * (c * c - s * s) - x * a * c - y * b * s
            step = f / np.where(np.abs(df) > 1e-300, df, 1e-300)
            t = t - np.clip(step, -0.5, 0.5)
            if np.all(np.abs(step) < 1e-15):
                break
        return t

    def project(self, points):
        """Closest point on the inclusion boundary."""
        return self.point(self.parameter(points))

    def signed_distance(self, points):
        points = np.asarray(points, dtype=float)
        if self.kind == CIRCLE:
            return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius
        d = np.linalg.norm(points - self.project(points), axis=-1)
        return np.where(self.level(points) < 1.0, -d, d)

    def sample(self, n, offset=0.0, start=0.0):
        """``n`` points equally spaced in arc length on the curve offset
        outward by ``offset``; the first point sits at parameter ``start``."""
        if self.kind == CIRCLE:
            t = start + 2.0 * np.pi * np.arange(n) / n
            return self.point(t) + offset * self.normal(t)
        fine = start + np.linspace(0.0, 2.0 * np.pi, 8193)
        curve = self.point(fine) + offset * self.normal(fine)
        seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        t = np.interp(s[-1] * np.arange(n) / n, s, fine)
        return self.point(t) + offset * self.normal(t)

    def perimeter(self, offset=0.0):
        if self.kind == CIRCLE:
            return 2.0 * np.pi * (self.radius + offset)
        pts = self.sample(4096, offset)
        return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))

    # --- analytic moments -------------------------------------------------
    @property
    def area(self):
        a, b = self.axes
        return math.pi * a * b

    def second_moment_y(self):
        """Integral of (y - center_y)^2 over the inclusion."""
        a, b = self.axes
        th = math.radians(self.rotation if self.kind == ELLIPSE else 0.0)
        return math.pi * a * b / 4.0 * (a * a * math.sin(th) ** 2 + b * b * math.cos(th) ** 2)

    def clearance(self, n=2048):
        """Minimum distance from the boundary curve to the unit-square boundary."""
        pts = self.point(np.linspace(0.0, 2.0 * np.pi, n, endpoint=False))
        return float(np.min(np.concatenate([pts, 1.0 - pts], axis=1)))

    def is_mirror_symmetric(self, tol=1e-12):
        """Symmetric with respect to the vertical line y1 = 1/2."""
        if abs(self.center[0] - 0.5) > tol:
            return False
        if self.kind == CIRCLE:
            return True
        r = self.rotation % 90.0
        return min(r, 90.0 - r) < 1e-12

    def validate(self):
        if self.clearance() <= 0.0:
            raise GeometryError(f"inclusion {self} touches or crosses the unit-cell boundary")
        return self

    def to_dict(self):
        if self.kind == CIRCLE:
            return {"kind": CIRCLE, "center": list(self.center), "radius": self.radius}
        return {
            "kind": ELLIPSE,
            "center": list(self.center),
            "semi_axes": list(self.semi_axes),
            "rotation": self.rotation,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind")
        if kind == CIRCLE:
            return cls.circle(data.get("radius", 0.25), tuple(data.get("center", (0.5, 0.5))))
        a, b = data.get("semi_axes", (0.4, 0.2))
        return cls.ellipse(a, b, data.get("rotation", 0.0), tuple(data.get("center", (0.5, 0.5))))


PRESET_SHAPES = {
    "circle": InclusionShape.circle(0.25),
    "ellipse": InclusionShape.ellipse(0.4, 0.2, 45.0),
}


UNIT_CELL = "UnitCell"
MICRO_STRIP = "MicroStrip"
BL_STRIP = "BoundaryLayerStrip"


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    shape: InclusionShape | None = None
    eps: float = 1.0
    H: float = 1.0
    h: float = 1.0
    cutoff: tuple = (4, 4)
    columns: int = 1

    def check(self):
        if self.kind not in (UNIT_CELL, MICRO_STRIP, BL_STRIP):
            raise SpecError(f"unknown domain kind {self.kind!r}")
        if self.shape is not None:
            self.shape.validate()
        if self.kind == MICRO_STRIP:
            if not self.eps > 0:
                raise SpecError("eps must be positive")
            for name in ("H", "h"):
                _cells_per(getattr(self, name), self.eps, name)
            if self.columns < 1:
                raise SpecError("columns must be >= 1")
        if self.kind == BL_STRIP:
            m_minus, m_plus = self.cutoff
            if int(m_minus) != m_minus or m_minus < 1 or int(m_plus) != m_plus or m_plus < 1:
                raise SpecError("cutoff (M_minus, M_plus) must be positive integers")
        return self


def _cells_per(length, eps, name):
    ratio = Fraction(length).limit_denominator(10**6) / Fraction(eps).limit_denominator(10**6)
    if ratio.denominator != 1 or ratio <= 0:
        raise SpecError(f"{name}/eps = {float(length) / eps:.6g} is not a positive integer")
    return int(ratio)


@dataclass(frozen=True)
class Block:
    """Grid position (i, j) of a block and whether it holds an inclusion."""

    i: int
    j: int
    porous: bool


@dataclass
class Domain:
    """Exact description of a meshed region as a union of blocks.

    Block (i, j) covers scale * ([i, i+1] x [j, j+1]); the interface, when
    present, is the line y = 0.
    """

    spec: DomainSpec
    scale: float
    blocks: list
    bounds: tuple
    inclusions: list = field(default_factory=list)
    periodic_y: bool = False

    @property
    def interface(self):
        if self.spec.kind == UNIT_CELL:
            return None
        return 0.0

    @property
    def fluid_area(self):
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0) - sum(inc.area for inc in self.inclusions)

    @property
    def segments(self):
        """Outer boundary as line segments ((x0, y0), (x1, y1), tag)."""
        x0, x1, y0, y1 = self.bounds
        return [
            ((x0, y0), (x1, y0), "Bottom"),
            ((x1, y0), (x1, y1), "PeriodicRight"),
            ((x1, y1), (x0, y1), "Top"),
            ((x0, y1), (x0, y0), "PeriodicLeft"),
        ]


def build_domain(spec: DomainSpec) -> Domain:
    """Exact boundary representation and block layout of ``spec``."""
    spec.check()
    shape = spec.shape
    if spec.kind == UNIT_CELL:
        blocks = [Block(0, 0, shape is not None)]
        scale, bounds, periodic_y = 1.0, (0.0, 1.0, 0.0, 1.0), True
    elif spec.kind == MICRO_STRIP:
        n_below = _cells_per(spec.H, spec.eps, "H")
        n_above = _cells_per(spec.h, spec.eps, "h")
        scale = spec.eps
        blocks = [
            Block(i, j, j < 0 and shape is not None)
            for j in range(-n_below, n_above)
            for i in range(spec.columns)
        ]
        bounds = (0.0, spec.columns * spec.eps, -spec.H, spec.h)
        periodic_y = False
    else:
        m_minus, m_plus = (int(v) for v in spec.cutoff)
        scale = 1.0
        blocks = [Block(0, j, j < 0 and shape is not None) for j in range(-m_minus, m_plus)]
        bounds = (0.0, 1.0, float(-m_minus), float(m_plus))
        periodic_y = False
    inclusions = [shape.placed((b.i, b.j), scale) for b in blocks if b.porous]
    return Domain(spec, scale, blocks, bounds, inclusions, periodic_y)
