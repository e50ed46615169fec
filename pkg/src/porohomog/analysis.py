"""Homogenization error norms, pressure extension and rate fits.

For the canonical infiltration case (dP_D/dx2 = 1/K22, dP_D/dx1 = 0) the
micro solution is compared with the composite approximations built from
the effective solution, the cell fields w^2, pi^2 and the boundary layer
beta = beta^{2,bl}, omega = omega^{2,bl}, all evaluated at y = x / eps:

    Est1   ||v - u_eff||                                     on Omega1
    Est1A  ||v - u_eff + (C1bl/K22) e1 - beta/K22||          on Omega1
    Est2   ||v + e2 - beta(x1/eps, 0+)/K22||                 on Sigma
    Est3   ||v + w^2/K22 - beta/K22||                        on [0, L] x [-0.6, 0]
    Est4   ||p~ - H(-x2) eps^-2 P_D||                        on Omega
    Est4A  ||p~ - H(-x2)(eps^-2 P_D - eps^-1 (Cpi + pi^2)/K22)||  on Omega

Est2A and Est3A share the integrands of Est2 and Est3. p~ is the micro
pressure extended into each solid inclusion by its fluid average over the
enclosing eps-cell. Boundary-layer terms are evaluated for |x2| < band * eps
and replaced by their far-field values (C1bl, 0), Cpi above and 0 below.

Micro solves use a single column of width eps; norms are rescaled to the
full width L by sqrt(L / (columns * eps)).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import femcore as fc
from . import kernels
from .blayer import BoundaryLayerResult
from .cellprob import CellResult, transfer_cell_fields
from .effective import EffectiveSolution
from .errors import LocationError, MeshError
from .mesh import FREE, PORE

OMEGA1 = "Omega1"
SIGMA = "Sigma"
OMEGA2_MINUS_O = "Omega2MinusO"
OMEGA = "Omega"
POROUS_DEPTH = 0.6  # Omega2 \ O = [0, L] x [-0.6, 0]

ESTIMATE_IDS = ("Est1", "Est2", "Est3", "Est4", "Est1A", "Est2A", "Est3A", "Est4A")


@dataclass(frozen=True)
class EstimateSpec:
    id: str
    region: str
    scaling: int = 0  # reported value = eps**scaling * norm
    bl_band: float = 4.0
    formula: str = ""
    bound: str = ""

    def __post_init__(self):
        if self.id not in ESTIMATE_IDS:
            raise ValueError(f"unknown estimate {self.id!r}")
        if self.region not in (OMEGA1, SIGMA, OMEGA2_MINUS_O, OMEGA):
            raise ValueError(f"unknown region {self.region!r}")
        if not self.bl_band > 0:
            raise ValueError("bl_band must be positive")


_CATALOG = {
    "Est1": (OMEGA1, 0, "||v - u_eff||_L2(Omega1)", "C eps^1/2"),
    "Est2": (SIGMA, 0, "||v + e2 - beta(x1/eps, 0+)/K22||_L2(Sigma)", "C eps^1/2"),
    "Est3": (OMEGA2_MINUS_O, 0, "||v + w2(x/eps)/K22 - beta(x/eps)/K22||_L2(Omega2 minus O)", "C eps"),
    "Est4": (OMEGA, 2, "||p~ - H(-x2) eps^-2 P_D||_L2(Omega)", "C / eps"),
    "Est1A": (OMEGA1, 0, "||v - u_eff + (C1bl/K22) e1 - beta(x/eps)/K22||_L2(Omega1)", "C eps"),
    "Est2A": (SIGMA, 0, "||v + e2 - beta(x1/eps, 0+)/K22||_L2(Sigma)", "C eps"),
    "Est3A": (OMEGA2_MINUS_O, 0, "||v + w2(x/eps)/K22 - beta(x/eps)/K22||_L2(Omega2 minus O)", "C eps"),
    "Est4A": (OMEGA, 2, "||p~ - H(-x2)(eps^-2 P_D - eps^-1 (Cpi + pi2(x/eps))/K22)||_L2(Omega)",
              "C / sqrt(eps)"),
}


def estimate_spec(est_id, bl_band=4.0) -> EstimateSpec:
    region, scaling, formula, bound = _CATALOG[est_id]
    return EstimateSpec(est_id, region, scaling, bl_band, formula, bound)


def catalog(bl_band=4.0):
    return [estimate_spec(e, bl_band) for e in ESTIMATE_IDS]


@dataclass
class ErrorReport:
    shape: str
    eps: float
    level: int
    values: dict  # estimate id -> raw norm
    scaled: dict  # estimate id -> eps**s * norm
    floors: dict = field(default_factory=dict)  # estimate id -> scaled numerical floor
    sweep: str = ""
    meta: dict = field(default_factory=dict)

    def check(self):
        for k, v in list(self.values.items()) + list(self.scaled.items()):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} = {v} is not a finite non-negative norm")
        return self


# ---------------------------------------------------------------------------
# composite fields
# ---------------------------------------------------------------------------


class Composite:
    """Micro solution together with the cell, boundary-layer and effective
    fields needed by the estimates, evaluated at micro-mesh points.

    When the micro mesh, the cell mesh and the boundary-layer strip are
    tiled from the same block meshes, the cell and boundary-layer fields are
    read at identical reference coordinates of corresponding cells (no
    interpolation). Otherwise points are located in those meshes.
    """

    def __init__(self, micro: fc.StokesSolution, cell: CellResult, bl: BoundaryLayerResult,
                 effective: EffectiveSolution, eps: float, band=4.0, L=1.0, columns=1, transfer="auto"):
        if bl.j != 2:
            raise ValueError("the canonical estimates use the boundary layer for j = 2")
        if band > min(bl.cutoff):
            raise ValueError(f"band {band} exceeds the strip cut-off {bl.cutoff}")
        self.micro, self.cell, self.bl, self.eff = micro, cell, bl, effective
        self.eps, self.band, self.L, self.columns = float(eps), float(band), float(L), int(columns)
        self.K22 = effective.K22
        mesh = micro.mesh
        corners = mesh.cell_nodes()[:, :3].mean(axis=1) / self.eps
        self.block_ij = np.floor(corners).astype(int)
        self.cell_map = self.strip_map = None
        if transfer not in ("auto", "exact", "locate"):
            raise ValueError(f"unknown transfer mode {transfer!r}")
        if transfer != "locate":
            self.cell_map, self.strip_map = self._exact_maps()
            if transfer == "exact" and (self.cell_map is None or self.strip_map is None):
                raise MeshError("micro, cell and strip meshes are not tiled from the same blocks")

    @property
    def mesh(self):
        return self.micro.mesh

    @property
    def exact(self):
        return self.cell_map is not None and self.strip_map is not None

    @property
    def width_factor(self):
        return math.sqrt(self.L / (self.columns * self.eps))

    def _exact_maps(self, tol=1e-9):
        mesh, eps = self.mesh, self.eps
        src = mesh.cell_source
        if src is None:
            return None, None
        nodes = mesh.cell_nodes() / eps
        shift = self.block_ij.astype(float)
        n = mesh.n_cells
        # cell problem: porous micro cells are translates of cell-mesh cells
        cell_map = None
        pore = np.flatnonzero(mesh.cell_tags == PORE)
        cm = self.cell.mesh
        if len(pore) and src[pore].max() < cm.n_cells:
            dev = np.abs(nodes[pore] - shift[pore, None, :] - cm.cell_nodes(src[pore])).max()
            if dev <= tol:
                cell_map = np.full(n, -1)
                cell_map[pore] = src[pore]
        # boundary-layer strip: block j of the strip holds the same block mesh
        strip_map = None
        sm = self.bl.mesh
        if sm.cell_block is not None and sm.cell_source is not None:
            m_minus = self.bl.cutoff[0]
            jj = self.block_ij[:, 1]
            inside = np.flatnonzero((jj >= -m_minus) & (jj < self.bl.cutoff[1]))
            bid = jj[inside] + m_minus
            starts = np.searchsorted(sm.cell_block, np.arange(sum(self.bl.cutoff) + 1))
            cand = starts[bid] + src[inside]
            ok = (cand < sm.n_cells) & (np.all(np.diff(sm.cell_block) >= 0))
            if np.all(ok):
                ok = (sm.cell_block[cand] == bid) & (sm.cell_source[cand] == src[inside])
            if np.all(ok):
                sh = np.stack([shift[inside, 0], np.zeros(len(inside))], axis=1)
                dev = np.abs(nodes[inside] - sh[:, None, :] - sm.cell_nodes(cand)).max() if len(inside) else 0
                if dev <= tol:
                    strip_map = np.full(n, -1)
                    strip_map[inside] = cand
        return cell_map, strip_map

    def evaluate(self, cells, refs, x):
        """Fields at per-point (micro cell, reference point) pairs with
        physical coordinates ``x``.

        Returns 'v', 'p', 'w2', 'pi2' (zero outside porous cells), 'beta',
        'omega' (far-field values outside the band).
        """
        cells = np.asarray(cells, dtype=int)
        n = len(cells)
        m = self.micro.at(cells, refs, gradients=False)
        out = {"v": m["v"], "p": m["p"], "w2": np.zeros((n, 2)), "pi2": np.zeros(n)}
        pore = self.mesh.cell_tags[cells] == PORE
        if np.any(pore):
            if self.cell_map is not None:
                cw = self.cell.fields[1].at(self.cell_map[cells[pore]], refs[pore], gradients=False)
                out["w2"][pore], out["pi2"][pore] = cw["v"], cw["p"]
            else:
                cw = transfer_cell_fields(self.cell, x[pore], self.eps, gradients=False)
                out["w2"][pore], out["pi2"][pore] = cw["w"][:, 1, :], cw["pi"][:, 1]
        beta = np.zeros((n, 2))
        omega = np.zeros(n)
        y2 = x[:, 1] / self.eps
        above = y2 >= self.band
        beta[above, 0] = self.bl.C1bl
        omega[above] = self.bl.Cpi
        inb = np.abs(y2) < self.band
        if np.any(inb):
            if self.strip_map is not None:
                vals = self.bl.at(self.strip_map[cells[inb]], refs[inb], gradients=False)
            else:
                y = x[inb] / self.eps
                y[:, 1] = np.where(self.mesh.cell_tags[cells[inb]] == FREE, np.maximum(y[:, 1], 0.0), y[:, 1])
                vals = self.bl.evaluate(y, gradients=False)
            beta[inb], omega[inb] = vals["beta"], vals["omega"]
        out["beta"], out["omega"] = beta, omega
        return out


# ---------------------------------------------------------------------------
# pressure extension
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PressureExtension:
    """Per-inclusion constants of the extended pressure."""

    inclusions: list  # placed InclusionShape per solid
    constants: np.ndarray  # extension value on each inclusion
    fluid_areas: np.ndarray  # fluid area of the enclosing eps-cell
    fluid_integral: float  # int p over the fluid

    def integral(self):
        """int over Omega of the extended pressure."""
        return self.fluid_integral + float(sum(c * s.area for c, s in zip(self.constants, self.inclusions)))

    def value(self, points):
        """Extension constant at points inside inclusions; NaN elsewhere."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(points), np.nan)
        for c, s in zip(self.constants, self.inclusions):
            out[s.contains(points)] = c
        return out

    def solid_l2_sq(self, a, b):
        """sum_k int_{S_k} (c_k - a - b x2)^2 dx, from the analytic moments."""
        total = 0.0
        for c, s in zip(self.constants, self.inclusions):
            d = c - a - b * s.center[1]
            total += s.area * d * d + b * b * s.second_moment_y()
        return total


def _inclusion_blocks(inclusions, eps):
    return [tuple(int(math.floor(v / eps)) for v in inc.center) for inc in inclusions]


def _block_averages(values, w, ij, inclusions, eps):
    """Averages of ``values`` over the fluid part of each inclusion's eps-cell.

    ``ij`` holds the (i, j) block index of every quadrature point.
    """
    avgs, areas = [], []
    key = ij[:, 0] * 1_000_003 + ij[:, 1]
    for ci, cj in _inclusion_blocks(inclusions, eps):
        sel = key == ci * 1_000_003 + cj
        area = float(np.sum(w[sel]))
        if not area > 0:
            raise ValueError(f"eps-cell ({ci}, {cj}) has no fluid to average over")
        avgs.append(np.sum(values[sel] * w[sel], axis=0) / area)
        areas.append(area)
    return np.array(avgs), np.array(areas)


def extend_pressure(micro: fc.StokesSolution, eps, quad_degree=None) -> PressureExtension:
    """Extend the micro pressure into each solid inclusion by its average
    over the fluid part of the enclosing eps-cell."""
    mesh = micro.mesh
    degree = quad_degree if quad_degree is not None else 2 * micro.space.vel_degree + 2
    cells, refs, x, w = fc.quadrature(mesh, fc.Cells(), degree)
    p = micro.at(cells, refs)["p"]
    ij = np.floor(mesh.cell_nodes()[:, :3].mean(axis=1) / eps).astype(int)[cells]
    constants, areas = _block_averages(p, w, ij, mesh.curves, eps)
    return PressureExtension(list(mesh.curves), constants, areas, float(np.sum(p * w)))


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


def _region(mesh, region):
    if region == OMEGA1:
        return fc.Cells(FREE)
    if region == SIGMA:
        return fc.HLine(0.0, "+")
    if region == OMEGA2_MINUS_O:
        if mesh.bounds[2] > -POROUS_DEPTH + 1e-12:
            raise ValueError(f"porous layer thinner than {POROUS_DEPTH}")
        return fc.Box(-POROUS_DEPTH, 0.0, PORE)
    return fc.Cells()


def _residual(est_id, f, x, comp: Composite, literal_4a=False):
    """Pointwise integrand (vector or scalar) of an estimate."""
    K22, eps = comp.K22, comp.eps
    eff = comp.eff
    if est_id in ("Est1", "Est1A"):
        r = f["v"] - eff.u_eff(x)
        if est_id == "Est1A":
            r = r + np.array([comp.bl.C1bl / K22, 0.0]) - f["beta"] / K22
        return r
    if est_id in ("Est2", "Est2A"):
        return f["v"] + np.array([0.0, 1.0]) - f["beta"] / K22
    if est_id in ("Est3", "Est3A"):
        return f["v"] + f["w2"] / K22 - f["beta"] / K22
    below = x[:, 1] < 0
    target = eff.P_D(x) / eps**2
    if est_id == "Est4A":
        if literal_4a:
            target = target - comp.bl.Cpi / (eps * K22) + f["pi2"] / K22
        else:
            target = target - (comp.bl.Cpi + f["pi2"]) / (eps * K22)
    return f["p"] - np.where(below, target, 0.0)


def _solid_target(est_id, comp: Composite, literal_4a=False):
    """(a, b) with the Est4 / Est4A target equal to a + b x2 on the solids
    (all inclusions lie below the interface; pi^2 is extended by 0)."""
    K22, eps = comp.K22, comp.eps
    a = 0.0
    if est_id == "Est4A":
        a = -comp.bl.Cpi / (eps * K22)
    return a, 1.0 / (K22 * eps**2)


def _sq(r):
    return np.sum(r * r, axis=1) if r.ndim == 2 else r * r


def compute_estimates(comp: Composite, specs=None, quad_degree=None, literal_4a=False, shape_name="",
                      level=0, sweep="", coarse: Composite | None = None, floor_order=None, extension="error"):
    """Evaluate the estimate norms for one eps.

    ``coarse`` is the same case solved on the parent mesh level; when given,
    the numerical floor of each estimate is the Richardson estimate
    ||I_h - I_2h|| / (2^q - 1) of the integrand's discretization error (q
    the velocity degree unless ``floor_order`` is set), but never less than
    the solver residual times the field scale.

    Pressure norms over Omega need a value on the solids. With
    ``extension="error"`` the integrand of Est4 / Est4A is extended into
    each inclusion by its average over the fluid part of the eps-cell; with
    ``"pressure"`` the micro pressure is extended that way (extend_pressure)
    and compared with the target there. The pressure-extension values are
    always recorded in ``meta["pressure_extension"]``.
    """
    specs = list(specs) if specs is not None else catalog(comp.band)
    degree = quad_degree if quad_degree is not None else 2 * comp.micro.space.vel_degree + 2
    mesh = comp.mesh
    if extension not in ("error", "pressure"):
        raise ValueError(f"unknown pressure extension {extension!r}")
    cache, cache_cells, alt = {}, {}, {}
    ext = ext_c = None
    values, scaled, floors = {}, {}, {}
    q = floor_order if floor_order is not None else comp.micro.space.vel_degree
    residual = float(getattr(comp.micro.report, "residual", 0.0) or 0.0)
    for spec in specs:
        if spec.bl_band != comp.band:
            raise ValueError(f"{spec.id}: band {spec.bl_band} differs from the composite's {comp.band}")
        if spec.region not in cache:
            cells, refs, x, w = fc.quadrature(mesh, _region(mesh, spec.region), degree)
            if len(cells) == 0:
                raise ValueError(f"region {spec.region} intersects no cells")
            f = comp.evaluate(cells, refs, x)
            fc_ = None
            if coarse is not None:
                cc, rc = map_to_parent(mesh, coarse.mesh, cells, x)
                fc_ = coarse.evaluate(cc, rc, x)
            cache[spec.region] = (x, w, f, fc_)
            cache_cells[spec.region] = cells
        x, w, f, fcoarse = cache[spec.region]
        r = _residual(spec.id, f, x, comp, literal_4a)
        sq = float(np.sum(_sq(r) * w))
        scale_sq = float(np.sum(_sq(_field(spec.id, f)) * w))
        diff_sq = rc = None
        if fcoarse is not None:
            rc = _residual(spec.id, fcoarse, x, coarse, literal_4a)
            diff_sq = float(np.sum(_sq(r - rc) * w))
        if spec.region == OMEGA:
            ij = comp.block_ij[cache_cells[spec.region]]
            incs = mesh.curves
            if extension == "error":
                # the error function itself is extended by its fluid average
                rbar, _ = _block_averages(r, w, ij, incs, comp.eps)
                sq += float(sum(s_.area * v * v for s_, v in zip(incs, rbar)))
                if diff_sq is not None:
                    dbar, _ = _block_averages(r - rc, w, ij, incs, comp.eps)
                    diff_sq += float(sum(s_.area * v * v for s_, v in zip(incs, dbar)))
            if ext is None:
                ext = extend_pressure(comp.micro, comp.eps, degree)
                ext_c = extend_pressure(coarse.micro, coarse.eps, degree) if coarse is not None else None
            a, b = _solid_target(spec.id, comp, literal_4a)
            p_ext_sq = float(np.sum(_sq(r) * w)) + ext.solid_l2_sq(a, b)
            alt[spec.id] = comp.eps**spec.scaling * comp.width_factor * math.sqrt(max(p_ext_sq, 0.0))
            if extension == "pressure":
                sq = p_ext_sq
                if diff_sq is not None:
                    diff_sq += float(sum((c1 - c2) ** 2 * s_.area
                                         for c1, c2, s_ in zip(ext.constants, ext_c.constants, incs)))
            scale_sq += float(sum(c * c * s_.area for c, s_ in zip(ext.constants, incs)))
        norm = comp.width_factor * math.sqrt(max(sq, 0.0))
        factor = comp.eps**spec.scaling
        values[spec.id] = norm
        scaled[spec.id] = factor * norm
        res_floor = residual * comp.width_factor * math.sqrt(max(scale_sq, 0.0))
        if diff_sq is not None:
            rich = comp.width_factor * math.sqrt(max(diff_sq, 0.0)) / (2.0**q - 1.0)
            floors[spec.id] = factor * max(rich, res_floor)
        else:
            floors[spec.id] = factor * res_floor
    meta = {
        "dofs": int(comp.micro.space.n_total),
        "exact_transfer": bool(comp.exact),
        "quad_degree": int(degree),
        "bl_band": comp.band,
        "literal_est4a": bool(literal_4a),
        "floor": "richardson" if coarse is not None else "residual",
        "extension": extension,
        "pressure_extension": alt,
    }
    return ErrorReport(shape_name, comp.eps, level, values, scaled, floors, sweep, meta).check()


def _field(est_id, f):
    """Micro field entering an estimate (velocity or pressure), for the
    residual-based floor."""
    return f["p"] if est_id in ("Est4", "Est4A") else f["v"]


def map_to_parent(fine, coarse, cells, x):
    """Coarse-level (cell, reference point) pairs of points in fine cells.

    Both meshes are tiled from block meshes where the fine block is one
    uniform refinement of the coarse block, so the parent of fine block
    cell s is coarse block cell s // 4 in the same block.
    """
    if fine.cell_block is None or coarse.cell_block is None:
        raise MeshError("parent mapping needs tiled meshes")
    if np.any(np.diff(coarse.cell_block) < 0):
        raise MeshError("coarse mesh blocks are not contiguous")
    bid = fine.cell_block[cells]
    starts = np.searchsorted(coarse.cell_block, np.arange(coarse.cell_block.max() + 2))
    pc = starts[bid] + fine.cell_source[cells] // 4
    if np.any(pc >= starts[bid + 1]):
        raise MeshError("fine mesh is not a refinement of the coarse mesh")
    refs, conv = kernels.invert_points(coarse.cell_nodes(pc), x)
    if not np.all(conv):
        raise LocationError("parent-cell inversion failed", x[~conv])
    return pc, refs


# ---------------------------------------------------------------------------
# rate fits and output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    eps_min: float
    eps_max: float
    n_points: int


def fit_rate(sweep, floor=None) -> RateFit:
    """Least-squares fit of log(value) against log(eps).

    ``sweep`` is a sequence of (eps, value). Points with value <= floor
    (a number or one value per point) are excluded.
    """
    data = np.array([(float(e), float(v)) for e, v in sweep], dtype=float).reshape(-1, 2)
    keep = np.isfinite(data).all(axis=1) & (data[:, 0] > 0) & (data[:, 1] > 0)
    if floor is not None:
        fl = np.broadcast_to(np.asarray(floor, dtype=float), (len(data),))
        keep &= data[:, 1] > fl
    if keep.sum() < 3:
        where = "" if floor is None else " above the numerical floor"
        raise ValueError(f">= 3 points required for a rate fit; {int(keep.sum())} usable{where}")
    le, lv = np.log(data[keep, 0]), np.log(data[keep, 1])
    slope, intercept = np.polyfit(le, lv, 1)
    pred = slope * le + intercept
    ss_res = float(np.sum((lv - pred) ** 2))
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), float(r2), float(data[keep, 0].min()), float(data[keep, 0].max()),
                   int(keep.sum()))


def _g(x):
    return format(float(x), ".17g")


def write_estimates_csv(reports, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["shape", "eps", "estimate_id", "raw_norm", "scaled_value"])
        for rep in sorted(reports, key=lambda r: (r.shape, -r.eps)):
            for est in ESTIMATE_IDS:
                if est in rep.values:
                    wr.writerow([rep.shape, _g(rep.eps), est, _g(rep.values[est]), _g(rep.scaled[est])])
    return path


def write_floors_csv(reports, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["shape", "eps", "estimate_id", "floor"])
        for rep in sorted(reports, key=lambda r: (r.shape, -r.eps)):
            for est in ESTIMATE_IDS:
                if est in rep.floors:
                    wr.writerow([rep.shape, _g(rep.eps), est, _g(rep.floors[est])])
    return path


def sweep_rates(reports, use_floor=True):
    """Rate fits per (shape, estimate); estimates with too few usable
    points are skipped and listed under 'skipped'."""
    fits, skipped = {}, {}
    shapes = sorted({r.shape for r in reports})
    for shape in shapes:
        reps = sorted((r for r in reports if r.shape == shape), key=lambda r: -r.eps)
        for est in ESTIMATE_IDS:
            pts = [(r.eps, r.scaled[est]) for r in reps if est in r.scaled]
            if not pts:
                continue
            floor = [r.floors.get(est, 0.0) for r in reps if est in r.scaled] if use_floor else None
            try:
                fits[(shape, est)] = fit_rate(pts, floor)
            except ValueError as exc:
                skipped[(shape, est)] = str(exc)
    return fits, skipped


def write_rates_csv(fits, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["shape", "estimate_id", "slope", "intercept", "r2", "eps_min", "eps_max"])
        for (shape, est) in sorted(fits, key=lambda k: (k[0], ESTIMATE_IDS.index(k[1]))):
            f = fits[(shape, est)]
            wr.writerow([shape, est, _g(f.slope), _g(f.intercept), _g(f.r_squared), _g(f.eps_min), _g(f.eps_max)])
    return path


def plot_estimates(reports, path, estimates=ESTIMATE_IDS, title=""):
    """Log-log SVG of the scaled estimates with reference slopes 1/2, 1, 3/2."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "porohomog"
    reps = sorted(reports, key=lambda r: -r.eps)
    eps = np.array([r.eps for r in reps])
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for est in estimates:
        vals = [r.scaled.get(est) for r in reps]
        if any(v is None for v in vals):
            continue
        label = est if _CATALOG[est][1] == 0 else f"eps^2 {est}"
        ax.loglog(eps, vals, "o-", label=label)
    if len(eps):
        for p, style in ((0.5, ":"), (1.0, "--"), (1.5, "-.")):
            ax.loglog(eps, (eps / eps[0]) ** p * 0.5, "k" + style, lw=0.8, label=f"eps^{p:g}")
    ax.set_xlabel("eps")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
