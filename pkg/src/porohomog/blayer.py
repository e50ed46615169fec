"""Interface boundary layer on a truncated periodic strip.

The boundary-layer velocity and pressure (beta, omega) jump across the
interface S = (0, 1) x {0}. The solver works with continuous unknowns

    gamma = beta,                  chi = omega            above S,
    gamma = beta + K_2j e2 - w^j,  chi = omega - pi^j     below S,

which satisfy -lap gamma + grad chi = -e^j below S and 0 above, with
gamma = K_2j e2 on the walls, homogeneous jumps across S, and on the
truncation lines: gamma = K_2j e2 - w^j(y1, 0) at the bottom; gamma_2 = 0
with d gamma_1 / d y2 = 0 at the top. The bottom data for gamma_2 is shifted
by the constant that makes its net flux vanish: discretely
int w^j_2(y1, 0) dy1 differs from K_2j by a small defect, and an
unbalanced inflow would otherwise drive a Darcy pressure drift through
the porous part. Because the strip's porous blocks
are translates of the cell mesh, cell fields are added back per cell with
no interpolation.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import femcore as fc
from . import fileio
from .cellprob import CellResult, cell_fields_on
from .errors import LocationError, MeshError, SpecError
from .geometry import BL_STRIP, DomainSpec, build_domain
from .mesh import BOTTOM, FREE, PORE, TOP, WALL, Mesh, block_pair, tile

log = logging.getLogger(__name__)


class DecayWarning(UserWarning):
    """Boundary layer not settled at the top of the truncated strip."""


@dataclass(frozen=True)
class BoundaryLayerResult:
    j: int
    gamma: fc.StokesSolution  # transformed, continuous unknowns (gauge shifted)
    cell: CellResult
    cutoff: tuple
    C1bl: float
    C2bl_check: float
    Cpi: float
    decay: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def mesh(self) -> Mesh:
        return self.gamma.mesh

    @property
    def Kcol(self):
        """K_2j e2 as a vector."""
        return np.array([0.0, self.cell.K[1, self.j - 1]])

    def fields_on(self, strip_cells, ref_pts, gradients=True):
        """beta, omega (and grad beta) at fixed reference points of strip cells.

        Returns 'beta' (n, Q, 2), 'omega' (n, Q), 'grad_beta' (n, Q, 2, 2).
        """
        strip_cells = np.asarray(strip_cells, dtype=int)
        out = self.gamma.on_cells(strip_cells, ref_pts, gradients)
        beta = out["v"].copy()
        omega = out["p"].copy()
        grad = out.get("grad_v")
        below = self.mesh.cell_tags[strip_cells] == PORE
        if np.any(below):
            src = self.mesh.cell_source[strip_cells[below]]
            cf = cell_fields_on(self.cell, src, ref_pts, gradients)
            beta[below] += cf["w"][..., self.j - 1, :] - self.Kcol
            omega[below] += cf["pi"][..., self.j - 1]
            if gradients:
                grad = grad.copy()
                grad[below] += cf["grad_w"][..., self.j - 1, :, :]
        res = {"x": out["x"], "beta": beta, "omega": omega}
        if gradients:
            res["grad_beta"] = grad
        return res

    def at(self, cells, refs, gradients=True):
        """beta, omega at per-point (strip cell, reference coordinate) pairs."""
        cells = np.asarray(cells, dtype=int)
        out = self.gamma.at(cells, refs, gradients)
        beta, omega = out["v"].copy(), out["p"].copy()
        grad = out.get("grad_v")
        below = self.mesh.cell_tags[cells] == PORE
        if np.any(below):
            src = self.mesh.cell_source[cells[below]]
            cw = self.cell.fields[self.j - 1].at(src, refs[below], gradients)
            beta[below] += cw["v"] - self.Kcol
            omega[below] += cw["p"]
            if gradients:
                grad = grad.copy()
                grad[below] += cw["grad_v"]
        res = {"x": out["x"], "beta": beta, "omega": omega}
        if gradients:
            res["grad_beta"] = grad
        return res

    def evaluate(self, points, gradients=True, tol=1e-9):
        """beta, omega at strip points; y2 >= 0 is resolved on the upper side."""
        points = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        points[:, 0] -= np.floor(points[:, 0])
        n = len(points)
        cells = np.empty(n, dtype=np.int64)
        refs = np.empty((n, 2))
        up = points[:, 1] >= 0.0
        for mask, tag in ((up, FREE), (~up, PORE)):
            if np.any(mask):
                c, r = fc.locator(self.mesh, tag).locate(points[mask], tol=tol)
                cells[mask], refs[mask] = c, r
        out = self.at(cells, refs, gradients)
        out["cells"], out["ref"] = cells, refs
        return out

    def line_mean(self, quantity, height, side="+"):
        """Mean over the fluid part of y2 = height of beta1, beta2 or omega."""
        cells, refs, _, w = fc.line_quadrature(self.mesh, fc.HLine(height, side), 8)
        vals = self.at(cells, refs, gradients=False)
        f = {"beta1": vals["beta"][:, 0], "beta2": vals["beta"][:, 1], "omega": vals["omega"]}[quantity]
        return float(np.sum(f * w))

    def line_deviation(self, height, side="+"):
        """L2(0, 1) norm of beta(., height) - (C1bl, 0) (above S) or beta (below)."""
        cells, refs, _, w = fc.line_quadrature(self.mesh, fc.HLine(height, side), 8)
        beta = self.at(cells, refs, gradients=False)["beta"]
        target = np.array([self.C1bl, 0.0]) if height >= 0 else np.zeros(2)
        return float(np.sqrt(np.sum(np.sum((beta - target) ** 2, axis=1) * w)))

    def to_dict(self):
        return {
            "j": self.j,
            "C1bl": self.C1bl,
            "C2bl_check": self.C2bl_check,
            "Cpi": self.Cpi,
            "cutoff": list(self.cutoff),
            "decay": self.decay,
            "report": self.report,
        }

    def save(self, directory):
        from .cellprob import _round17

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"blayer_j{self.j}.json").write_text(
            json.dumps(_round17(self.to_dict()), indent=2, sort_keys=True) + "\n"
        )
        fileio.write_mesh(self.mesh, directory / f"blayer_j{self.j}_mesh.txt")
        fileio.save_arrays(directory / f"blayer_j{self.j}_fields.npz", vel=self.gamma.vel_coeffs,
                           pres=self.gamma.pres_coeffs)
        return directory

    @classmethod
    def load(cls, directory, cell: CellResult, j=2):
        directory = Path(directory)
        meta = json.loads((directory / f"blayer_j{j}.json").read_text())
        mesh = fileio.read_mesh(directory / f"blayer_j{j}_mesh.txt")
        arrays = fileio.load_arrays(directory / f"blayer_j{j}_fields.npz")
        space = _strip_space(mesh, cell, j)
        gamma = fc.StokesSolution(space, arrays["vel"], arrays["pres"])
        return cls(j, gamma, cell, tuple(meta["cutoff"]), meta["C1bl"], meta["C2bl_check"], meta["Cpi"],
                   meta["decay"], meta["report"])


def strip_mesh(cell: CellResult, cutoff=(4, 4), blocks=None) -> Mesh:
    """Boundary-layer strip tiled from the cell problem's block mesh."""
    if cell.params is None and blocks is None:
        raise MeshError("cell result carries no mesh parameters; pass the block meshes explicitly")
    spec = DomainSpec(BL_STRIP, cell.shape, cutoff=tuple(cutoff))
    pore, free = blocks if blocks is not None else block_pair(cell.shape, cell.params)
    return tile(build_domain(spec), pore, free)


def check_strip(strip: Mesh, cell: CellResult, tol=1e-12):
    """Porous strip cells must be exact translates of the cell-mesh cells."""
    cmesh = cell.mesh
    sel = np.flatnonzero(strip.cell_tags == PORE)
    if strip.cell_source is None or np.any(strip.cell_source[sel] >= cmesh.n_cells):
        raise MeshError("strip mesh carries no valid cell-source map")
    own = strip.cell_nodes(sel)
    ref_nodes = cmesh.cell_nodes(strip.cell_source[sel])
    shift = np.round(own[:, :1, :] - ref_nodes[:, :1, :])
    dev = np.abs(own - ref_nodes - shift).max() if len(sel) else 0.0
    if dev > tol:
        raise MeshError(f"strip porous cells are not translates of the cell mesh (deviation {dev:.2e})")


def flux_defect(cell: CellResult, j):
    """K_2j - int_0^1 w^j_2(y1, 0) dy1 on the cell mesh."""
    return float(cell.K[1, j - 1]) - cell.surface_flux(j, 0.0)


def _strip_space(mesh, cell, j):
    K2j = float(cell.K[1, j - 1])
    wj = cell.fields[j - 1]
    delta = flux_defect(cell, j)

    def bottom_u(c):
        def f(x):
            pts = np.stack([x[:, 0] - np.floor(x[:, 0]), np.zeros(len(x))], axis=1)
            cells, refs = fc.locator(cell.mesh).locate(pts)
            val = wj.at(cells, refs)["v"][:, c]
            return (K2j - delta if c == 1 else 0.0) - val

        return f

    dirichlet = {
        WALL: (0.0, K2j),
        BOTTOM: (bottom_u(0), bottom_u(1)),
        TOP: (None, 0.0),
    }
    return fc.build_space(mesh, cell.vel_degree, True, dirichlet, fc.mean_zero(None))


def solve_boundary_layer(strip: Mesh, cell: CellResult, j=2, method=fc.SPARSE_DIRECT, tol=1e-10,
                         decay_tol=1e-4) -> BoundaryLayerResult:
    """Solve the transformed boundary-layer problem for index j."""
    if j not in (1, 2):
        raise ValueError("j must be 1 or 2")
    t0 = time.perf_counter()
    check_strip(strip, cell)
    x0, x1, y0, y1 = strip.bounds
    cutoff = (int(round(-y0)), int(round(y1)))
    if cutoff[1] < 2:
        raise SpecError("the upper cut-off must be at least 2: Cpi is read on the line y2 = 1")
    space = _strip_space(strip, cell, j)
    force = {PORE: tuple(-np.eye(2)[j - 1]), FREE: (0.0, 0.0)}
    system = fc.assemble_stokes(space, force)
    u, report = fc.solve(system, method=method, tol=tol)
    gamma = fc.StokesSolution.from_vector(space, u, report)
    # gauge: mean of omega = chi + pi^j over the bottom porous cell vanishes
    bottom = fc.Cells(PORE, strip.cell_block == 0)
    area = fc.integrate(strip, lambda x, f: np.ones(len(x)), bottom)
    shift = -fc.integrate(gamma, lambda x, f: f["p"], bottom) / area
    pres = gamma.pres_coeffs + shift
    gamma = fc.StokesSolution(space, gamma.vel_coeffs, pres, report)
    partial = BoundaryLayerResult(j, gamma, cell, cutoff, 0.0, 0.0, 0.0)
    top_line = cutoff[1] - 0.5
    C1 = partial.line_mean("beta1", top_line)
    C2 = partial.line_mean("beta2", top_line)
    Cpi = partial.line_mean("omega", 1.0)
    result = BoundaryLayerResult(j, gamma, cell, cutoff, C1, C2, Cpi)
    decay = decay_diagnostics(result)
    scale = max(decay["scale"], 1e-300)
    if decay["deviation_top"] > decay_tol * scale:
        msg = (f"boundary layer not settled at y2 = {cutoff[1] - 1}: deviation {decay['deviation_top']:.3e} "
               f"exceeds {decay_tol:g} x field scale; increase the upper cut-off")
        warnings.warn(msg, DecayWarning, stacklevel=2)
        log.warning(msg)
    rep = {
        "residual": report.residual,
        "dofs": int(space.n_total),
        "gauge_shift": shift,
        "bottom_flux_defect": flux_defect(cell, j),
        "seconds": time.perf_counter() - t0,
    }
    return BoundaryLayerResult(j, gamma, cell, cutoff, C1, C2, Cpi, decay, rep)


def decay_diagnostics(result: BoundaryLayerResult, step=0.5):
    """Line deviations from the far-field values and fitted exponential rates."""
    m_minus, m_plus = result.cutoff
    up = np.arange(step, m_plus - 0.5 + 1e-12, step)
    down = -np.arange(0.5, m_minus - 0.5 + 1e-12, 1.0)
    dev_up = [result.line_deviation(c) for c in up]
    dev_down = [result.line_deviation(c) for c in down]
    scale = result.line_deviation(0.0, "+") + abs(result.C1bl) + 1e-300
    fit = (up >= 1.0) & (up <= m_plus - 1.0)

    def rate(h, d):
        d = np.asarray(d)
        ok = d > 1e-14 * scale
        if ok.sum() < 2:
            return float("nan")
        return float(-np.polyfit(np.abs(h[ok]), np.log(d[ok]), 1)[0])

    return {
        "heights_up": up.tolist(),
        "deviation_up": dev_up,
        "heights_down": down.tolist(),
        "deviation_down": dev_down,
        "rate_up": rate(up[fit], np.asarray(dev_up)[fit]),
        "rate_down": rate(down, dev_down),
        "deviation_top": float(result.line_deviation(m_plus - 1.0)),
        "scale": float(scale),
    }


def compute_boundary_layer(cell: CellResult, cutoff=(4, 4), j=2, **kw) -> BoundaryLayerResult:
    return solve_boundary_layer(strip_mesh(cell, cutoff), cell, j, **kw)


def evaluate_bl(result: BoundaryLayerResult, x, eps, band=4.0, gradients=False):
    """beta and omega at y = x / eps with far-field substitution outside the band.

    For |x2| < band * eps the strip solution is evaluated (x2 = 0 on the
    upper side); above the band beta = (C1bl, 0), omega = Cpi; below it
    both vanish. Gradients, when requested, are with respect to y.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m_minus, m_plus = result.cutoff
    if band > min(m_minus, m_plus):
        raise ValueError(f"band {band} exceeds the strip cut-off {result.cutoff}")
    n = len(x)
    beta = np.zeros((n, 2))
    omega = np.zeros(n)
    grad = np.zeros((n, 2, 2))
    y2 = x[:, 1] / eps
    above = y2 >= band
    beta[above, 0] = result.C1bl
    omega[above] = result.Cpi
    inside = np.abs(y2) < band
    if np.any(inside):
        y = x[inside] / eps
        vals = result.evaluate(y, gradients=gradients)
        beta[inside] = vals["beta"]
        omega[inside] = vals["omega"]
        if gradients:
            grad[inside] = vals["grad_beta"]
    out = {"beta": beta, "omega": omega}
    if gradients:
        out["grad_beta"] = grad
    return out


def extract_constant_profile(result: BoundaryLayerResult, quantity, lines):
    """Per-line means of 'beta1_mean' or 'omega_mean' and their spread."""
    key = {"beta1_mean": "beta1", "omega_mean": "omega"}.get(quantity)
    if key is None:
        raise ValueError(f"unknown profile quantity {quantity!r}")
    m_plus = result.cutoff[1]
    lines = np.asarray(lines, dtype=float)
    if np.any(lines < 0) or np.any(lines >= m_plus):
        raise ValueError(f"profile lines must lie in [0, {m_plus})")
    try:
        means = np.array([result.line_mean(key, c, "+") for c in lines])
    except LocationError as exc:
        raise LocationError(f"a profile line intersects no fluid: {exc}") from exc
    spread = float(means.max() - means.min()) if len(means) else 0.0
    return {"lines": lines.tolist(), "means": means.tolist(), "spread": spread}
