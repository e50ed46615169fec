"""Periodic cell problems and the permeability tensor.

For j = 1, 2 the problem on the fluid part of the unit cell is

    -lap w^j + grad pi^j = e^j,  div w^j = 0,  w^j = 0 on the wall,

periodic in both directions with mean-zero pressure. Both right-hand sides
share one factorization. K_ij is taken from the energy form
int grad w^i : grad w^j; the mean-velocity form int w^i_j is kept as a
cross-check.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import femcore as fc
from . import fileio
from .errors import LocationError, MeshError
from .geometry import UNIT_CELL, DomainSpec, InclusionShape
from .mesh import WALL, Mesh, MeshParams, domain_mesh


@dataclass(frozen=True)
class CellResult:
    K: np.ndarray  # energy form
    K_flux: np.ndarray  # mean-velocity form int w^i_j
    fields: tuple  # (StokesSolution for j=1, for j=2)
    vel_degree: int
    shape: InclusionShape | None = None
    params: MeshParams | None = None
    report: dict = field(default_factory=dict)

    @property
    def mesh(self) -> Mesh:
        return self.fields[0].mesh

    @property
    def space(self):
        return self.fields[0].space

    def w(self, j):
        """Velocity solution of problem j (1-based)."""
        return self.fields[j - 1]

    def surface_flux(self, j=2, height=0.0):
        """int_0^1 w^j_2(y1, height) dy1."""
        return fc.integrate(self.fields[j - 1], lambda x, f: f["v"][:, 1], fc.HLine(height, "+"))

    def energy_identity_defect(self):
        return float(np.max(np.abs(self.K - self.K_flux)))

    # --- serialization -------------------------------------------------
    def to_dict(self):
        return {
            "K": self.K.tolist(),
            "K_flux": self.K_flux.tolist(),
            "vel_degree": self.vel_degree,
            "shape": None if self.shape is None else self.shape.to_dict(),
            "mesh": None if self.params is None else self.params.to_dict(),
            "dofs": int(self.space.n_total),
            "report": self.report,
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "cell.json").write_text(json.dumps(_round17(self.to_dict()), indent=2, sort_keys=True) + "\n")
        fileio.write_mesh(self.mesh, directory / "cell_mesh.txt")
        fileio.save_arrays(
            directory / "cell_fields.npz",
            vel=np.stack([f.vel_coeffs for f in self.fields]),
            pres=np.stack([f.pres_coeffs for f in self.fields]),
        )
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "cell.json").read_text())
        mesh = fileio.read_mesh(directory / "cell_mesh.txt")
        arrays = fileio.load_arrays(directory / "cell_fields.npz")
        space = cell_space(mesh, meta["vel_degree"])
        if arrays["vel"].shape[1] != space.n_vel:
            raise MeshError("stored cell fields do not match the rebuilt space")
        fields = tuple(fc.StokesSolution(space, arrays["vel"][j], arrays["pres"][j]) for j in range(2))
        shape = None if meta["shape"] is None else InclusionShape.from_dict(meta["shape"])
        params = None if meta["mesh"] is None else MeshParams(**meta["mesh"])
        return cls(np.array(meta["K"]), np.array(meta["K_flux"]), fields, meta["vel_degree"], shape, params,
                   meta.get("report", {}))


def _round17(obj):
    if isinstance(obj, float):
        return float(format(obj, ".17g"))
    if isinstance(obj, dict):
        return {k: _round17(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round17(v) for v in obj]
    return obj


def cell_space(mesh: Mesh, vel_degree=2):
    if not (mesh.periodic_x and mesh.periodic_y):
        raise MeshError("the cell problem needs a mesh periodic in both directions")
    return fc.build_space(mesh, vel_degree, True, {WALL: (0.0, 0.0)}, fc.mean_zero(None))


def solve_cell_problem(mesh: Mesh, vel_degree=2, method=fc.SPARSE_DIRECT, tol=1e-10, shape=None, params=None):
    """Solve both cell problems on a doubly periodic unit-cell mesh."""
    t0 = time.perf_counter()
    space = cell_space(mesh, vel_degree)
    system = fc.assemble_stokes(space, [(1.0, 0.0), (0.0, 1.0)])
    u, report = fc.solve(system, method=method, tol=tol)
    fields = tuple(fc.StokesSolution.from_vector(space, u[:, j], report) for j in range(2))
    w = u[: space.n_vel]
    K = w.T @ (system.velocity_stiffness @ w)
    K_flux = w.T @ system.load[: space.n_vel]
    # K_flux[i, j] = int w^i . e^j
    rep = {
        "residual": report.residual,
        "method": report.method,
        "dofs": int(space.n_total),
        "seconds": time.perf_counter() - t0,
    }
    return CellResult(K, K_flux, fields, vel_degree, shape if shape is not None else _shape_of(mesh), params, rep)


def _shape_of(mesh):
    return mesh.curves[0] if mesh.curves else None


def compute_cell(shape: InclusionShape, params: MeshParams, vel_degree=2, **kw) -> CellResult:
    """Mesh the unit cell and solve the cell problems."""
    mesh = domain_mesh(DomainSpec(UNIT_CELL, shape), params)
    return solve_cell_problem(mesh, vel_degree, shape=shape, params=params, **kw)


def cell_fields_on(result: CellResult, source_cells, ref_pts, gradients=True):
    """Cell fields at fixed reference points on the given cell-mesh cells.

    Returns 'w' (n, Q, 2, 2) indexed [..., j, component], 'pi' (n, Q, 2) and,
    if requested, 'grad_w' (n, Q, 2, 2, 2) with derivatives in y.
    """
    vals = [f.on_cells(source_cells, ref_pts, gradients) for f in result.fields]
    out = {"w": np.stack([v["v"] for v in vals], axis=-2), "pi": np.stack([v["p"] for v in vals], axis=-1)}
    if gradients:
        out["grad_w"] = np.stack([v["grad_v"] for v in vals], axis=-3)
    return out


def transfer_cell_fields(result: CellResult, points, eps=1.0, gradients=True, tol=1e-9):
    """Cell fields at y = x / eps wrapped into the unit cell.

    Returns 'w' (n, 2, 2) indexed [point, j, component], 'pi' (n, 2) and
    'grad_w' (n, 2, 2, 2) holding derivatives with respect to y. Raises
    LocationError if a wrapped point falls in the solid.
    """
    y = np.atleast_2d(np.asarray(points, dtype=float)) / eps
    y = y - np.floor(y)
    try:
        cells, refs = fc.locator(result.mesh).locate(y, tol=tol)
    except LocationError as exc:
        raise LocationError("cell-field transfer: mapped point lies in the solid inclusion", exc.points) from exc
    vals = [f.at(cells, refs, gradients) for f in result.fields]
    out = {"w": np.stack([v["v"] for v in vals], axis=1), "pi": np.stack([v["p"] for v in vals], axis=1)}
    if gradients:
        out["grad_w"] = np.stack([v["grad_v"] for v in vals], axis=1)
    return out
