"""Microscopic Stokes flow through the perforated strip.

Domain (0, L) x (-H, h) with L = eps for the single-column reduction:
pore blocks of size eps below the interface x2 = 0, free fluid above.
Boundary data: v = v_D on top, v = 0 on the walls, v2 = g at the bottom
with dv1/dx2 = 0 there, periodic in x1, and int p = 0 over the free fluid.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import femcore as fc
from . import fileio
from .effective import verify_compatibility
from .geometry import MICRO_STRIP, DomainSpec, InclusionShape, build_domain
from .mesh import BOTTOM, FREE, TOP, WALL, Mesh, MeshParams, block_pair, tile


@dataclass(frozen=True)
class MicroCase:
    shape: InclusionShape | None
    eps: float
    H: float = 1.0
    h: float = 1.0
    v_D: tuple = (0.0, -1.0)
    g: float = -1.0
    params: MeshParams = field(default_factory=MeshParams)
    vel_degree: int = 2
    columns: int = 1

    @property
    def width(self):
        return self.columns * self.eps

    def domain_spec(self):
        return DomainSpec(MICRO_STRIP, self.shape, self.eps, self.H, self.h, columns=self.columns)

    def check(self):
        self.domain_spec().check()
        return verify_compatibility(self.v_D, self.g, self.width)

    def to_dict(self):
        for v in (*self.v_D, self.g):
            if callable(v):
                raise TypeError("cases with callable boundary data are not serializable")
        return {
            "shape": None if self.shape is None else self.shape.to_dict(),
            "eps": str(Fraction(self.eps).limit_denominator(10**6)),
            "H": self.H,
            "h": self.h,
            "v_D": list(self.v_D),
            "g": self.g,
            "mesh": self.params.to_dict(),
            "vel_degree": self.vel_degree,
            "columns": self.columns,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            None if d["shape"] is None else InclusionShape.from_dict(d["shape"]),
            float(Fraction(d["eps"])),
            d["H"],
            d["h"],
            tuple(d["v_D"]),
            d["g"],
            MeshParams(**d["mesh"]),
            d["vel_degree"],
            d["columns"],
        )


def _periodic_data(value, L):
    """Boundary data as a callable of points (x1 scaled to the period)."""
    if value is None or not callable(value):
        return value
    return lambda x: value(x[:, 0])


def micro_mesh(case: MicroCase, blocks=None) -> Mesh:
    pore, free = blocks if blocks is not None else block_pair(case.shape, case.params)
    return tile(build_domain(case.domain_spec()), pore, free)


def micro_space(mesh: Mesh, case: MicroCase):
    dirichlet = {
        TOP: (_periodic_data(case.v_D[0], case.width), _periodic_data(case.v_D[1], case.width)),
        BOTTOM: (None, _periodic_data(case.g, case.width)),
    }
    if np.any(mesh.facet_tags == WALL):
        dirichlet[WALL] = (0.0, 0.0)
    return fc.build_space(mesh, case.vel_degree, True, dirichlet, fc.mean_zero(FREE))


def solve_micro(case: MicroCase, mesh: Mesh | None = None, blocks=None, method=fc.SPARSE_DIRECT, tol=1e-10):
    """Solve the micro problem; returns a StokesSolution on the strip mesh."""
    case.check()
    t0 = time.perf_counter()
    mesh = mesh if mesh is not None else micro_mesh(case, blocks)
    space = micro_space(mesh, case)
    system = fc.assemble_stokes(space)
    u, report = fc.solve(system, method=method, tol=tol)
    report.seconds = time.perf_counter() - t0
    return fc.StokesSolution.from_vector(space, u, report)


def cross_section_profile(solution: fc.StokesSolution, heights, degree=None):
    """Flux per unit width and fluid-averaged pressure on horizontal lines.

    Returns dict with 'heights', 'flux' (int v2 dx1 / width), 'pressure'
    (int p dx1 / fluid length), 'v1' (int v1 dx1 / fluid length) and
    'fluid_length'.
    """
    mesh = solution.mesh
    k = solution.space.vel_degree
    degree = degree if degree is not None else 2 * k + 2
    out = {"heights": [], "flux": [], "pressure": [], "v1": [], "fluid_length": []}
    for c in heights:
        cells, refs, _, w = fc.line_quadrature(mesh, fc.HLine(float(c), "+"), degree)
        vals = solution.at(cells, refs, gradients=False)
        length = float(np.sum(w))
        out["heights"].append(float(c))
        out["flux"].append(float(np.sum(vals["v"][:, 1] * w)) / mesh.width)
        out["pressure"].append(float(np.sum(vals["p"] * w)) / length)
        out["v1"].append(float(np.sum(vals["v"][:, 0] * w)) / length)
        out["fluid_length"].append(length)
    return out


def boundary_fluxes(solution: fc.StokesSolution):
    """Net flux int v2 dx1 through the top and bottom boundaries."""
    top = fc.integrate(solution, lambda x, f: f["v"][:, 1], fc.Facets(TOP))
    bottom = fc.integrate(solution, lambda x, f: f["v"][:, 1], fc.Facets(BOTTOM))
    return top, bottom


def consistent_flux(solution: fc.StokesSolution, height):
    """Flux through y = height computed from the weak continuity equation.

    With psi the P1 function equal to 1 at pressure nodes below ``height``
    and 0 at the others, int psi div v = 0 holds discretely, so
    int v . grad psi equals the bottom flux. The line must be a row of
    mesh nodes.
    """
    s = solution.space
    if s.pres_degree < 1:
        raise ValueError("consistent flux needs a continuous pressure space")
    mesh = solution.mesh
    nodes_y = s.pres_coords[:, 1]
    on_line = np.isclose(nodes_y, height, rtol=0, atol=1e-12 * max(1.0, mesh.height))
    if not on_line.any():
        raise ValueError(f"no mesh nodes on y = {height}")
    psi = (nodes_y < height - 1e-12 * max(1.0, mesh.height)).astype(float)
    pts, wts = fc.ref.triangle_rule(2 * s.vel_degree)
    cells = np.arange(mesh.n_cells)
    local = psi[s.pres_dofs]
    if not np.any(local.min(axis=1) != local.max(axis=1)):
        raise ValueError("psi has no transition layer")
    _, jac, det = fc.geometry_at(mesh.cell_nodes(), pts)
    gpsi = fc.physical_grads(s.pres_degree, pts, jac, det)  # (M, Q, np, 2)
    grad_psi = np.einsum("mqic,mi->mqc", gpsi, local)
    v = solution.on_cells(cells, pts)["v"]
    layer = -np.sum(np.einsum("mqc,mqc->mq", v, grad_psi) * det * wts)
    return float(layer)


def save_micro(solution: fc.StokesSolution, case: MicroCase, directory):
    """Store case description, mesh and coefficients in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"case": case.to_dict(), "dofs": int(solution.space.n_total),
            "residual": float(getattr(solution.report, "residual", 0.0) or 0.0)}
    (directory / "micro.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    fileio.write_mesh(solution.mesh, directory / "micro_mesh.txt")
    fileio.save_arrays(directory / "micro_fields.npz", vel=solution.vel_coeffs, pres=solution.pres_coeffs)
    return directory


def load_micro(directory):
    """Inverse of save_micro; returns (case, solution)."""
    directory = Path(directory)
    meta = json.loads((directory / "micro.json").read_text())
    case = MicroCase.from_dict(meta["case"])
    mesh = fileio.read_mesh(directory / "micro_mesh.txt")
    arrays = fileio.load_arrays(directory / "micro_fields.npz")
    space = micro_space(mesh, case)
    report = fc.SolveReport("loaded", meta["residual"], space.n_total, 0)
    return case, fc.StokesSolution(space, arrays["vel"], arrays["pres"], report)
