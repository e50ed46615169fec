"""Taylor-Hood finite elements on curved triangle meshes.

Unknowns are ordered as [u1 nodes | u2 nodes | pressure nodes]. The
discrete problem is the component-gradient Stokes form

    int grad u : grad phi - int p div phi - int q div u = int f . phi,

so a free tangential velocity component carries the natural condition
du_t/dn = 0. Dirichlet values are eliminated from the system; a mean-zero
pressure gauge is imposed with one Lagrange multiplier.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from . import reference as ref
from .errors import LocationError, SolverError, SpaceError
from .mesh import SUBDOMAINS, Mesh

log = logging.getLogger(__name__)

NO_GAUGE = ("none",)


def mean_zero(region=None):
    """Gauge: pressure integrates to zero over subdomain ``region`` (None = all)."""
    return ("mean", region)


def pin(node=0):
    return ("pin", node)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def map_points(nodes, ref_pts):
    """Physical coordinates of reference points: (M, 6, 2), (Q, 2) -> (M, Q, 2)."""
    phi = ref.shape_values(2, ref_pts)
    return np.einsum("qi,mic->mqc", phi, nodes)


def geometry_at(nodes, ref_pts):
    """Quadratic geometry map at reference points.

    Returns physical points (M, Q, 2), Jacobians (M, Q, 2, 2) with
    J[..., c, a] = d x_c / d xi_a, and determinants (M, Q).
    """
    phi = ref.shape_values(2, ref_pts)
    dphi = ref.shape_grads(2, ref_pts)
    x = np.einsum("qi,mic->mqc", phi, nodes)
    jac = np.einsum("qia,mic->mqca", dphi, nodes)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return x, jac, det


def _inv2(jac, det):
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / det
    inv[..., 1, 1] = jac[..., 0, 0] / det
    inv[..., 0, 1] = -jac[..., 0, 1] / det
    inv[..., 1, 0] = -jac[..., 1, 0] / det
    return inv


def physical_grads(degree, ref_pts, jac, det):
    """Basis gradients in physical coordinates, (M, Q, n_local, 2)."""
    g = ref.shape_grads(degree, ref_pts)
    inv = _inv2(jac, det)  # inv[..., a, c] = d xi_a / d x_c
    return np.einsum("qia,mqac->mqic", g, inv)


class Locator:
    """Background-grid point location on a curved mesh."""

    def __init__(self, mesh: Mesh, bins_per_side=None):
        nodes = mesh.cell_nodes()
        self.nodes = np.ascontiguousarray(nodes)
        lo = nodes.min(axis=1)
        hi = nodes.max(axis=1)
        pad = 0.1 * (hi - lo).max(axis=1, keepdims=True) + 1e-12
        lo, hi = lo - pad, hi + pad
        x0, x1, y0, y1 = mesh.bounds
        m = mesh.n_cells
        if bins_per_side is None:
            nb = max(1, int(np.sqrt(m / 2.0)))
            aspect = (y1 - y0) / (x1 - x0)
            nx = max(1, int(round(nb / np.sqrt(aspect))))
            ny = max(1, int(round(nb * np.sqrt(aspect))))
        else:
            nx = ny = bins_per_side
        self.origin = np.array([x0, y0])
        self.inv_size = np.array([nx / (x1 - x0), ny / (y1 - y0)])
        self.shape = (nx, ny)
        ix0 = np.clip(((lo[:, 0] - x0) * self.inv_size[0]).astype(int), 0, nx - 1)
        ix1 = np.clip(((hi[:, 0] - x0) * self.inv_size[0]).astype(int), 0, nx - 1)
        iy0 = np.clip(((lo[:, 1] - y0) * self.inv_size[1]).astype(int), 0, ny - 1)
        iy1 = np.clip(((hi[:, 1] - y0) * self.inv_size[1]).astype(int), 0, ny - 1)
        bins, cells = [], []
        for c in range(m):
            for iy in range(iy0[c], iy1[c] + 1):
                b = iy * nx + np.arange(ix0[c], ix1[c] + 1)
                bins.append(b)
                cells.append(np.full(len(b), c))
        bins = np.concatenate(bins)
        cells = np.concatenate(cells)
        order = np.lexsort((cells, bins))
        self.bin_cells = cells[order].astype(np.int64)
        self.bin_ptr = np.searchsorted(bins[order], np.arange(nx * ny + 1)).astype(np.int64)

    def restricted(self, mask):
        """Locator searching only cells where ``mask`` is true (ids kept)."""
        out = object.__new__(Locator)
        out.nodes, out.origin, out.inv_size, out.shape = self.nodes, self.origin, self.inv_size, self.shape
        keep = np.asarray(mask)[self.bin_cells]
        csum = np.concatenate([[0], np.cumsum(keep)])
        out.bin_cells = self.bin_cells[keep]
        out.bin_ptr = csum[self.bin_ptr].astype(np.int64)
        return out

    def locate(self, points, tol=1e-9, strict=True):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        cells, refs = kernels.locate_points(
            self.nodes, self.bin_ptr, self.bin_cells, self.origin, self.inv_size, self.shape, points, tol
        )
        if strict and np.any(cells < 0):
            bad = points[cells < 0]
            raise LocationError(f"{len(bad)} point(s) outside the meshed fluid region, first {bad[0]}", bad)
        return cells, refs


def locator(mesh: Mesh, tag=None) -> Locator:
    """Cached locator of ``mesh``, optionally restricted to one subdomain."""
    cache = mesh.__dict__.setdefault("_locators", {})
    if tag not in cache:
        cache[tag] = Locator(mesh) if tag is None else locator(mesh).restricted(mesh.cell_tags == tag)
    return cache[tag]


# ---------------------------------------------------------------------------
# spaces
# ---------------------------------------------------------------------------


def lagrange_numbering(mesh: Mesh, degree: int):
    """Global node index per (cell, local node) and node coordinates, before
    periodic identification."""
    cells = mesh.cells
    m = len(cells)
    corners = cells[:, :3]
    vids, vinv = np.unique(corners, return_inverse=True)
    vinv = vinv.reshape(m, 3)
    nv = len(vids)
    parts = [vinv]
    count = nv
    if degree >= 2:
        e_pairs = np.stack([corners[:, [a, b]] for a, b in ref.EDGES], axis=1)  # (m, 3, 2)
        keys = np.sort(e_pairs, axis=2).reshape(-1, 2)
        _, einv = np.unique(keys, axis=0, return_inverse=True)
        einv = einv.reshape(m, 3)
        ne = einv.max() + 1
        if degree == 2:
            parts.append(count + einv)
            count += ne
        else:
            forward = e_pairs[:, :, 0] < e_pairs[:, :, 1]
            first = np.where(forward, 2 * einv, 2 * einv + 1)
            second = np.where(forward, 2 * einv + 1, 2 * einv)
            edge_nodes = np.stack([first, second], axis=2).reshape(m, 6)
            parts.append(count + edge_nodes)
            count += 2 * ne
    if degree == 3:
        parts.append(count + np.arange(m)[:, None])
        count += m
    dofs = np.concatenate(parts, axis=1)
    coords = np.zeros((count, 2))
    phys = map_points(mesh.cell_nodes(), ref.node_coords(degree))
    coords[dofs.ravel()] = phys.reshape(-1, 2)
    return dofs, coords


def _identify_periodic(mesh: Mesh, coords, nodes_used):
    """Representative index for every node after periodic identification."""
    rep = np.arange(len(coords))

    def find(i):
        while rep[i] != i:
            rep[i] = rep[rep[i]]
            i = rep[i]
        return i

    x0, x1, y0, y1 = mesh.bounds
    sides = []
    if mesh.periodic_x:
        sides.append((0, x0, x1))
    if mesh.periodic_y:
        sides.append((1, y0, y1))
    for axis, lo, hi in sides:
        span = max(1.0, hi - lo)
        tol = 1e-10 * span
        c = coords[nodes_used]
        low = nodes_used[np.abs(c[:, axis] - lo) < tol]
        high = nodes_used[np.abs(c[:, axis] - hi) < tol]
        other = 1 - axis
        low = low[np.argsort(coords[low, other], kind="stable")]
        high = high[np.argsort(coords[high, other], kind="stable")]
        if len(low) != len(high) or not np.allclose(coords[low, other], coords[high, other], atol=tol, rtol=0):
            raise SpaceError("periodic sides carry incompatible finite-element nodes")
        for a, b in zip(low, high):
            ra, rb = find(a), find(b)
            if ra != rb:
                rep[max(ra, rb)] = min(ra, rb)
    return np.array([find(i) for i in range(len(rep))])


def _compress(dofs, coords, rep):
    used = np.unique(rep[dofs])
    newidx = -np.ones(len(coords), dtype=int)
    newidx[used] = np.arange(len(used))
    return newidx[rep[dofs]], coords[used]


@dataclass
class FeSpace:
    mesh: Mesh
    vel_degree: int
    pres_degree: int
    vel_dofs: np.ndarray  # (M, n_local_v) scalar velocity node per (cell, local node)
    pres_dofs: np.ndarray  # (M, n_local_p)
    vel_coords: np.ndarray
    pres_coords: np.ndarray
    constraints: dict = field(default_factory=dict)  # global unknown -> value
    gauge: tuple = NO_GAUGE
    periodic: bool = True

    @property
    def n_vel_nodes(self):
        return len(self.vel_coords)

    @property
    def n_vel(self):
        return 2 * self.n_vel_nodes

    @property
    def n_pres(self):
        return len(self.pres_coords)

    @property
    def n_total(self):
        return self.n_vel + self.n_pres

    def component(self, c):
        """Global unknown indices of velocity component c per (cell, node)."""
        return self.vel_dofs + c * self.n_vel_nodes

    def pressure_unknowns(self):
        return self.pres_dofs + self.n_vel


def _boundary_value(spec, x):
    if spec is None:
        return None
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(x), dtype=float), (len(x),))
    return np.full(len(x), float(spec))


def build_space(
    mesh: Mesh,
    vel_degree: int = 2,
    periodic: bool = True,
    dirichlet: dict | None = None,
    gauge: tuple = NO_GAUGE,
) -> FeSpace:
    """Taylor-Hood space with Dirichlet constraints.

    ``dirichlet`` maps a facet tag to a pair (data_u1, data_u2); each entry is
    None (component free), a constant, or a callable of (n, 2) points.
    """
    if vel_degree not in (2, 3):
        raise SpaceError("velocity degree must be 2 or 3")
    vdofs, vcoords = lagrange_numbering(mesh, vel_degree)
    pdofs, pcoords = lagrange_numbering(mesh, vel_degree - 1)
    if periodic and (mesh.periodic_x or mesh.periodic_y):
        vrep = _identify_periodic(mesh, vcoords, np.unique(vdofs))
        prep = _identify_periodic(mesh, pcoords, np.unique(pdofs))
    else:
        vrep = np.arange(len(vcoords))
        prep = np.arange(len(pcoords))
    vdofs, vcoords = _compress(vdofs, vcoords, vrep)
    pdofs, pcoords = _compress(pdofs, pcoords, prep)
    space = FeSpace(mesh, vel_degree, vel_degree - 1, vdofs, pdofs, vcoords, pcoords, {}, gauge, periodic)
    nvn = space.n_vel_nodes
    for tag, data in (dirichlet or {}).items():
        sel = mesh.facet_selection(tag)
        if len(sel) == 0:
            raise SpaceError(f"Dirichlet data references facet tag {tag} with no facets")
        if not isinstance(data, (tuple, list)) or len(data) != 2:
            raise SpaceError("Dirichlet data must be a pair (u1, u2)")
        local = np.array([ref.edge_local_nodes(vel_degree, e) for e in mesh.facet_edges[sel]])
        nodes = np.unique(vdofs[mesh.facet_cells[sel][:, None], local])
        x = vcoords[nodes]
        for c in range(2):
            vals = _boundary_value(data[c], x)
            if vals is None:
                continue
            for node, val in zip(nodes, vals):
                key = int(node + c * nvn)
                old = space.constraints.get(key)
                if old is not None and abs(old - val) > 1e-12 * max(1.0, abs(val)):
                    raise SpaceError(f"conflicting Dirichlet values {old} and {val} at unknown {key}")
                space.constraints[key] = float(val)
    if gauge[0] == "pin":
        space.constraints[space.n_vel + int(gauge[1])] = 0.0
    elif gauge[0] == "mean" and gauge[1] is not None and not np.any(mesh.cell_tags == gauge[1]):
        raise SpaceError(f"gauge region {gauge[1]} selects no cells")
    return space


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix  # reduced system (free unknowns [+ multiplier])
    rhs: np.ndarray
    space: FeSpace
    free: np.ndarray
    lift: np.ndarray  # full vector holding the Dirichlet values
    multiplier: bool
    full_matrix: sp.csr_matrix
    load: np.ndarray  # full load vector(s), before lifting
    velocity_stiffness: sp.csr_matrix
    gauge_vector: np.ndarray | None = None

    @property
    def size(self):
        return self.matrix.shape[0]


def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def _force_values(force, x, cell_tags):
    """Volume force at quadrature points x (M, Q, 2) -> (M, Q, 2)."""
    out = np.zeros_like(x)
    if force is None:
        return out
    if not isinstance(force, dict):
        force = {t: force for t in range(len(SUBDOMAINS))}
    for tag, f in force.items():
        sel = cell_tags == tag
        if not np.any(sel) or f is None:
            continue
        if callable(f):
            out[sel] = np.asarray(f(x[sel].reshape(-1, 2))).reshape(-1, 2).reshape(out[sel].shape)
        else:
            out[sel] = np.asarray(f, dtype=float)
    return out


def assemble_stokes(space: FeSpace, volume_force=None, traction=None, quad_degree=None) -> LinearSystem:
    """Saddle-point system of the component-gradient Stokes operator.

    ``volume_force`` is a vector (constant or callable) or a dict keyed by
    subdomain tag; it may also be a list of such specifications, giving one
    right-hand side column each. ``traction`` maps facet tags to surface
    tractions (constant vectors or callables).
    """
    mesh = space.mesh
    k = space.vel_degree
    q = quad_degree if quad_degree is not None else 2 * k
    pts, wts = ref.triangle_rule(q)
    x, jac, det = geometry_at(mesh.cell_nodes(), pts)
    if np.any(det <= 0):
        bad = int(np.flatnonzero((det <= 0).any(axis=1))[0])
        raise SpaceError(f"non-positive Jacobian in cell {bad}")
    wdet = det * wts
    grads = physical_grads(k, pts, jac, det)  # (M, Q, nv, 2)
    nv_vals = ref.shape_values(k, pts)  # (Q, nv)
    p_vals = ref.shape_values(k - 1, pts)  # (Q, np)
    kloc = np.einsum("mq,mqic,mqjc->mij", wdet, grads, grads)
    nvn, n_total = space.n_vel_nodes, space.n_total
    rows, cols, vals = [], [], []
    u1 = space.vel_dofs
    for c in range(2):
        uc = u1 + c * nvn
        rows.append(np.repeat(uc[:, :, None], uc.shape[1], axis=2))
        cols.append(np.repeat(uc[:, None, :], uc.shape[1], axis=1))
        vals.append(kloc)
    a_full = _coo(np.concatenate([r.ravel() for r in rows]), np.concatenate([c_.ravel() for c_ in cols]),
                  np.concatenate([v.ravel() for v in vals]), (space.n_vel, space.n_vel))
    pu = space.pressure_unknowns()
    brow, bcol, bval = [], [], []
    for c in range(2):
        bloc = -np.einsum("mq,qr,mqi->mri", wdet, p_vals, grads[..., c])
        uc = u1 + c * nvn
        brow.append(np.repeat(pu[:, :, None], uc.shape[1], axis=2))
        bcol.append(np.repeat(uc[:, None, :], pu.shape[1], axis=1))
        bval.append(bloc)
    brow = np.concatenate([b.ravel() for b in brow])
    bcol = np.concatenate([b.ravel() for b in bcol])
    bval = np.concatenate([b.ravel() for b in bval])
    allr = np.concatenate([rows_ for rows_ in [np.concatenate([r.ravel() for r in rows]), brow, bcol]])
    allc = np.concatenate([np.concatenate([c_.ravel() for c_ in cols]), bcol, brow])
    allv = np.concatenate([np.concatenate([v.ravel() for v in vals]), bval, bval])
    full = _coo(allr, allc, allv, (n_total, n_total))

    forces = volume_force if isinstance(volume_force, list) else [volume_force]
    loads = np.zeros((n_total, len(forces)))
    for col, force in enumerate(forces):
        fq = _force_values(force, x, mesh.cell_tags)
        for c in range(2):
            floc = np.einsum("mq,qi,mq->mi", wdet, nv_vals, fq[..., c])
            np.add.at(loads[:, col], (u1 + c * nvn).ravel(), floc.ravel())
    if traction:
        for tag, t in traction.items():
            _add_traction(space, loads, tag, t)

    lift = np.zeros(n_total)
    cons = np.array(sorted(space.constraints), dtype=int)
    if len(cons):
        lift[cons] = [space.constraints[i] for i in cons]
    free_mask = np.ones(n_total, dtype=bool)
    free_mask[cons] = False
    free = np.flatnonzero(free_mask)
    kff = full[free][:, free]
    rhs = loads[free] - (full[free] @ lift)[:, None]
    gauge_vec = None
    multiplier = space.gauge[0] == "mean"
    if multiplier:
        region = space.gauge[1]
        sel = np.ones(mesh.n_cells, dtype=bool) if region is None else mesh.cell_tags == region
        ploc = np.einsum("mq,qr->mr", wdet[sel], p_vals)
        gauge_vec = np.zeros(n_total)
        np.add.at(gauge_vec, pu[sel].ravel(), ploc.ravel())
        g = gauge_vec[free]
        nz = np.flatnonzero(g)
        col = sp.csr_matrix((g[nz], (nz, np.zeros(len(nz), dtype=int))), shape=(len(free), 1))
        kff = sp.bmat([[kff, col], [col.T, None]], format="csr")
        rhs = np.vstack([rhs, np.zeros((1, rhs.shape[1]))])
    elif space.gauge[0] == "none" and not traction and not _has_open_boundary(space):
        log.warning("pressure is determined only up to a constant: no gauge and no traction boundary")
    if rhs.shape[1] == 1:
        rhs = rhs[:, 0]
    return LinearSystem(kff.tocsr(), rhs, space, free, lift, multiplier, full, loads, a_full, gauge_vec)


def _has_open_boundary(space):
    """True if some boundary velocity normal component is unconstrained."""
    mesh = space.mesh
    nvn = space.n_vel_nodes
    for tag in (0, 1):
        sel = mesh.facet_selection(tag)
        if len(sel) == 0:
            continue
        local = np.array([ref.edge_local_nodes(space.vel_degree, e) for e in mesh.facet_edges[sel]])
        nodes = np.unique(space.vel_dofs[mesh.facet_cells[sel][:, None], local])
        if any(int(n + nvn) not in space.constraints for n in nodes):
            return True
    return False


def _add_traction(space, loads, tag, traction, degree=None):
    mesh = space.mesh
    sel = mesh.facet_selection(tag)
    if len(sel) == 0:
        raise SpaceError(f"traction data references facet tag {tag} with no facets")
    k = space.vel_degree
    t, w = ref.line_rule(degree or 2 * k + 2)
    for f, cell, edge in zip(sel, mesh.facet_cells[sel], mesh.facet_edges[sel]):
        rp = ref.edge_ref_points(edge, t)
        x, jac, _ = geometry_at(mesh.cell_nodes([cell]), rp)
        a, b = ref.EDGES[edge]
        tangent_ref = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
        dref = tangent_ref[b] - tangent_ref[a]
        ds = np.linalg.norm(jac[0] @ dref, axis=1)
        tv = np.asarray(traction(x[0]) if callable(traction) else np.broadcast_to(traction, (len(t), 2)), dtype=float)
        phi = ref.shape_values(k, rp)
        for c in range(2):
            contrib = np.einsum("q,qi,q->i", w * ds, phi, tv[:, c])
            np.add.at(loads[:, 0], space.vel_dofs[cell] + c * space.n_vel_nodes, contrib)


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------

SPARSE_DIRECT = "direct"
KRYLOV = "krylov"


@dataclass
class SolveReport:
    method: str
    residual: float
    size: int
    nnz: int
    factor_nnz: int = 0
    iterations: int = 0
    seconds: float = 0.0


class Factorization:
    """Reusable sparse LU of a system matrix.

    For a gauge-bordered Stokes system [[K, c], [c^T, 0]] whose block K is
    symmetric with the constant-pressure null vector n, the dense border is
    kept out of the factorization: with e a unit pressure vector,
    K + s e e^T is regular, lambda = n.b / n.c, and the gauge condition is
    met by a correction along n. This solves the bordered system exactly
    with the fill of a pinned one.
    """

    def __init__(self, system):
        if isinstance(system, LinearSystem):
            self.matrix = system.matrix.tocsc()
            self.null = self._null_vector(system)
        else:
            self.matrix = sp.csc_matrix(system)
            self.null = None
        if self.null is not None:
            k = self.matrix[:-1, :-1].tocsc()
            self.border = self.matrix[:-1, -1].toarray().ravel()
            e = int(np.flatnonzero(self.null)[0])
            diag = np.abs(k.diagonal())
            bump = sp.csc_matrix(([diag.max() if diag.max() > 0 else 1.0], ([e], [e])), shape=k.shape)
            target = k + bump
        else:
            target = self.matrix
        try:
            self.lu = spla.splu(target, permc_spec="COLAMD", options={"SymmetricMode": False})
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc

    @staticmethod
    def _null_vector(system):
        """Constant-pressure vector in reduced coordinates, if it spans the
        kernel direction removed by the gauge border."""
        if not system.multiplier:
            return None
        n_vel = system.space.n_vel
        k = system.matrix[:-1, :-1]
        n = (system.free >= n_vel).astype(float)
        if not n.any():
            return None
        scale = abs(k).max()
        if abs(k @ n).max() > 1e-10 * scale or abs(k - k.T).max() > 1e-12 * scale:
            return None
        return n

    @property
    def factor_nnz(self):
        return self.lu.L.nnz + self.lu.U.nnz

    def _apply(self, rhs):
        if self.null is None:
            return self.lu.solve(rhs)
        n, c = self.null, self.border
        b, last = rhs[:-1], rhs[-1]
        lam = (n @ b) / (n @ c)
        shift = np.multiply.outer(c, lam) if rhs.ndim > 1 else c * lam
        x0 = self.lu.solve(b - shift)
        alpha = (last - c @ x0) / (c @ n)
        x = x0 + (np.multiply.outer(n, alpha) if rhs.ndim > 1 else n * alpha)
        return np.concatenate([x, np.atleast_1d(lam)[None, :] if rhs.ndim > 1 else [lam]], axis=0)

    def solve(self, rhs, tol=1e-10, refine_steps=3):
        rhs = np.asarray(rhs, dtype=float)
        x = self._apply(rhs)
        scale = np.linalg.norm(rhs, axis=0)
        scale = np.where(scale > 0, scale, 1.0)

        def residual(x):
            r = rhs - self.matrix @ x
            return r, float(np.max(np.linalg.norm(r, axis=0) / scale))

        r, res = residual(x)
        for _ in range(refine_steps):
            if res <= tol * 1e-2:
                break
            x = x + self._apply(r)
            r, res = residual(x)
        if not np.all(np.isfinite(x)):
            raise SolverError("singular factorization: non-finite solution")
        if res > tol:
            raise SolverError(f"relative residual {res:.3e} exceeds {tol:.1e}", [res])
        return x, res


def solve(system: LinearSystem, method=SPARSE_DIRECT, tol=1e-10, maxiter=5000, factorization=None):
    """Solve and return the full unknown vector(s) plus a SolveReport.

    Returns (u, report) where u has shape (n_total,) or (n_total, n_rhs)
    with Dirichlet values filled in.
    """
    rhs = system.rhs
    if method == SPARSE_DIRECT:
        fac = factorization or Factorization(system)
        x, res = fac.solve(rhs, tol=tol)
        report = SolveReport(method, res, system.size, system.matrix.nnz, fac.factor_nnz)
    elif method == KRYLOV:
        x, report = _krylov(system, tol, maxiter)
    else:
        raise SolverError(f"unknown solver method {method!r}")
    return expand(system, x), report


def _krylov(system, tol, maxiter):
    a = system.matrix.tocsc()
    rhs = system.rhs if system.rhs.ndim > 1 else system.rhs[:, None]
    # shift the zero pressure block so ILU has pivots
    n = a.shape[0]
    ilu = spla.spilu(a + sp.identity(n, format="csc") * 1e-8, drop_tol=1e-5, fill_factor=20)
    prec = spla.LinearOperator(a.shape, ilu.solve)
    out = np.zeros_like(rhs)
    history = []
    iters = 0
    for j in range(rhs.shape[1]):
        b = rhs[:, j]
        count = [0]

        def cb(rk):
            count[0] += 1
            history.append(float(rk))

        xj, info = spla.gmres(a, b, M=prec, rtol=tol * 1e-1, restart=200, maxiter=maxiter, callback=cb,
                              callback_type="pr_norm")
        iters += count[0]
        res = np.linalg.norm(b - a @ xj) / max(np.linalg.norm(b), 1e-300)
        if info != 0 or res > tol:
            raise SolverError(f"Krylov solver did not converge (info={info}, residual={res:.3e})", history)
        out[:, j] = xj
    res = float(np.max(np.linalg.norm(rhs - a @ out, axis=0) / np.maximum(np.linalg.norm(rhs, axis=0), 1e-300)))
    report = SolveReport(KRYLOV, res, n, a.nnz, 0, iters)
    return (out if system.rhs.ndim > 1 else out[:, 0]), report


def expand(system: LinearSystem, x):
    """Full unknown vector(s) from a reduced solution."""
    nf = len(system.free)
    if x.ndim == 1:
        u = system.lift.copy()
        u[system.free] = x[:nf]
        return u
    u = np.repeat(system.lift[:, None], x.shape[1], axis=1)
    u[system.free] = x[:nf]
    return u


# ---------------------------------------------------------------------------
# solutions and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StokesSolution:
    space: FeSpace
    vel_coeffs: np.ndarray  # (n_vel,) [u1 nodes | u2 nodes]
    pres_coeffs: np.ndarray  # (n_pres,)
    report: SolveReport | None = None

    @classmethod
    def from_vector(cls, space, u, report=None):
        u = np.asarray(u, dtype=float)
        return cls(space, u[: space.n_vel].copy(), u[space.n_vel : space.n_total].copy(), report)

    @property
    def mesh(self):
        return self.space.mesh

    def local_coeffs(self, cells):
        s = self.space
        vd = s.vel_dofs[cells]
        v = np.stack([self.vel_coeffs[vd], self.vel_coeffs[vd + s.n_vel_nodes]], axis=-1)  # (n, nv, 2)
        p = self.pres_coeffs[s.pres_dofs[cells]]
        return v, p

    def on_cells(self, cells, ref_pts, gradients=False):
        """Fields at the same reference points on each cell in ``cells``.

        Returns dict with 'x' (n, Q, 2), 'v' (n, Q, 2), 'p' (n, Q) and, when
        requested, 'grad_v' (n, Q, 2, 2) with grad_v[..., c, d] = d v_c/d x_d.
        """
        cells = np.asarray(cells, dtype=int)
        s = self.space
        nodes = s.mesh.cell_nodes(cells)
        v, p = self.local_coeffs(cells)
        phi = ref.shape_values(s.vel_degree, ref_pts)
        psi = ref.shape_values(s.pres_degree, ref_pts)
        out = {
            "x": map_points(nodes, ref_pts),
            "v": np.einsum("qi,nic->nqc", phi, v),
            "p": np.einsum("qr,nr->nq", psi, p),
        }
        if gradients:
            _, jac, det = geometry_at(nodes, ref_pts)
            g = physical_grads(s.vel_degree, ref_pts, jac, det)
            out["grad_v"] = np.einsum("nqid,nic->nqcd", g, v)
        return out

    def at(self, cells, refs, gradients=False):
        """Fields at per-point (cell, reference coordinate) pairs."""
        cells = np.asarray(cells, dtype=int)
        refs = np.asarray(refs, dtype=float)
        s = self.space
        nodes = s.mesh.cell_nodes(cells)
        v, p = self.local_coeffs(cells)
        phi = ref.shape_values(s.vel_degree, refs)  # (n, nv)
        psi = ref.shape_values(s.pres_degree, refs)
        out = {
            "x": np.einsum("ni,nic->nc", ref.shape_values(2, refs), nodes),
            "v": np.einsum("ni,nic->nc", phi, v),
            "p": np.einsum("nr,nr->n", psi, p),
        }
        if gradients:
            dphi = ref.shape_grads(s.vel_degree, refs)  # (n, nv, 2)
            dgeo = ref.shape_grads(2, refs)
            jac = np.einsum("nia,nic->nca", dgeo, nodes)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            inv = _inv2(jac, det)
            g = np.einsum("nia,nac->nic", dphi, inv)
            out["grad_v"] = np.einsum("nid,nic->ncd", g, v)
        return out


def evaluate(solution: StokesSolution, points, gradients=True, tol=1e-9):
    """Velocity, pressure and velocity gradient at arbitrary fluid points.

    Points within ``tol`` (barycentric) of an element boundary resolve to
    the lowest-numbered adjacent cell.
    """
    cells, refs = locator(solution.mesh).locate(points, tol=tol)
    out = solution.at(cells, refs, gradients=gradients)
    out["cells"] = cells
    out["ref"] = refs
    return out


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cells:
    """Region made of cells: a subdomain tag, a boolean mask, or all (None)."""

    tag: int | None = None
    mask: np.ndarray | None = None

    def select(self, mesh):
        sel = np.ones(mesh.n_cells, dtype=bool)
        if self.tag is not None:
            sel &= mesh.cell_tags == self.tag
        if self.mask is not None:
            sel &= self.mask
        return np.flatnonzero(sel)


@dataclass(frozen=True)
class Facets:
    tag: int


@dataclass(frozen=True)
class HLine:
    """Horizontal line y = height; along element edges the cell on ``side``
    ('+' above, '-' below) is used."""

    height: float
    side: str = "+"
    x_range: tuple | None = None


@dataclass(frozen=True)
class Box:
    """Cells of subdomain ``tag`` (None = all) clipped to ylo <= y <= yhi."""

    ylo: float
    yhi: float
    tag: int | None = None


def _clip_polygon(poly, vals, lo, hi):
    """Clip a reference polygon on which y is linear (values ``vals`` at
    the vertices) to lo <= y <= hi."""
    for bound, sign in ((lo, 1.0), (hi, -1.0)):
        if len(poly) == 0:
            break
        out, out_v = [], []
        m = len(poly)
        for k in range(m):
            p, q = poly[k], poly[(k + 1) % m]
            fp, fq = sign * (vals[k] - bound), sign * (vals[(k + 1) % m] - bound)
            if fp >= 0:
                out.append(p)
                out_v.append(vals[k])
            if (fp >= 0) != (fq >= 0):
                t = fp / (fp - fq)
                out.append(p + t * (q - p))
                out_v.append(vals[k] + t * (vals[(k + 1) % m] - vals[k]))
        poly, vals = out, out_v
    return poly


_SUB = np.array(
    [
        [[0, 0], [0.5, 0], [0, 0.5]],
        [[0.5, 0], [1, 0], [0.5, 0.5]],
        [[0, 0.5], [0.5, 0.5], [0, 1]],
        [[0.5, 0.5], [0, 0.5], [0.5, 0]],
    ]
)


def _triangles_in_band(nodes, tri, lo, hi, depth, straight):
    """Reference sub-triangles of one cell inside lo <= y <= hi."""
    probe = ref.node_coords(3)
    pts = tri[0] + probe[:, :1] * (tri[1] - tri[0]) + probe[:, 1:] * (tri[2] - tri[0])
    y = map_points(nodes[None], pts)[0, :, 1]
    if y.min() >= lo and y.max() <= hi:
        return [tri]
    if y.max() < lo or y.min() > hi:
        return []
    if straight or depth == 0:
        vy = map_points(nodes[None], tri)[0, :, 1]
        poly = _clip_polygon(list(tri), list(vy), lo, hi)
        return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]
    out = []
    for child in _SUB:
        sub = tri[0] + child[:, :1] * (tri[1] - tri[0]) + child[:, 1:] * (tri[2] - tri[0])
        out += _triangles_in_band(nodes, sub, lo, hi, depth - 1, straight)
    return out


def box_quadrature(mesh: Mesh, region: Box, degree, depth=4):
    """Quadrature over cells clipped to a horizontal band.

    Returns (cells (n,), ref points (n, 2), weights (n,)) with weights
    including the Jacobian. Straight cells are clipped exactly; curved ones
    are subdivided ``depth`` times before the final linear clip.
    """
    pts, wts = ref.triangle_rule(degree)
    nodes = mesh.cell_nodes()
    sel = np.ones(mesh.n_cells, dtype=bool) if region.tag is None else mesh.cell_tags == region.tag
    probe = ref.node_coords(3)
    y = map_points(nodes, probe)[..., 1]
    inside = sel & (y.min(axis=1) >= region.ylo) & (y.max(axis=1) <= region.yhi)
    cut = sel & ~inside & (y.max(axis=1) > region.ylo) & (y.min(axis=1) < region.yhi)
    full = np.flatnonzero(inside)
    cells = [np.repeat(full, len(wts))]
    refs = [np.tile(pts, (len(full), 1))]
    base_w = [np.tile(wts, len(full))]
    for c in np.flatnonzero(cut):
        nd = nodes[c]
        chord = 0.5 * (nd[[0, 1, 2]] + nd[[1, 2, 0]])
        straight = np.abs(nd[3:] - chord).max() <= 1e-13 * max(1.0, np.abs(nd).max())
        base = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        for tri in _triangles_in_band(nd, base, region.ylo, region.yhi, depth, straight):
            e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
            area2 = abs(e1[0] * e2[1] - e1[1] * e2[0])  # relative to the reference area 1/2
            if area2 <= 0:
                continue
            cells.append(np.full(len(wts), c))
            refs.append(tri[0] + pts[:, :1] * e1 + pts[:, 1:] * e2)
            base_w.append(wts * area2)
    cells = np.concatenate(cells)
    if len(cells) == 0:
        raise ValueError(f"band {region.ylo} <= y <= {region.yhi} selects no cells")
    refs = np.concatenate(refs)
    base_w = np.concatenate(base_w)
    nd = nodes[cells]
    dgeo = ref.shape_grads(2, refs)
    jac = np.einsum("nia,nic->nca", dgeo, nd)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    return cells, refs, base_w * det


def cell_quadrature(mesh: Mesh, cells, degree):
    pts, wts = ref.triangle_rule(degree)
    x, _, det = geometry_at(mesh.cell_nodes(cells), pts)
    return pts, x, det * wts


def facet_quadrature(mesh: Mesh, facets, degree):
    """(cells, ref points (n, Q, 2), x (n, Q, 2), weights (n, Q)) on facets."""
    t, w = ref.line_rule(degree)
    cells = mesh.facet_cells[facets]
    edges = mesh.facet_edges[facets]
    rp = np.stack([ref.edge_ref_points(e, t) for e in range(3)])[edges]  # (n, Q, 2)
    nodes = mesh.cell_nodes(cells)
    dgeo = ref.shape_grads(2, rp)
    jac = np.einsum("nqia,nic->nqca", dgeo, nodes)
    verts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    dref = np.stack([verts[b] - verts[a] for a, b in ref.EDGES])[edges]  # (n, 2)
    ds = np.linalg.norm(np.einsum("nqca,na->nqc", jac, dref), axis=-1)
    x = np.einsum("nqi,nic->nqc", ref.shape_values(2, rp), nodes)
    return cells, rp, x, ds * w


def _edge_quadratic_roots(ya, ym, yb, c):
    """Parameters t in [0, 1] where the quadratic through (0, ya), (1/2, ym),
    (1, yb) equals c; returns (n, 2) with NaN for missing roots."""
    a2 = 2 * ya - 4 * ym + 2 * yb
    a1 = -3 * ya + 4 * ym - yb
    a0 = ya - c
    roots = np.full((len(ya), 2), np.nan)
    lin = np.abs(a2) < 1e-14 * (np.abs(a1) + 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = -a0 / a1
        disc = a1 * a1 - 4 * a2 * a0
        sq = np.sqrt(np.maximum(disc, 0))
        q = -0.5 * (a1 + np.copysign(sq, a1))
        r1 = q / a2
        r2 = a0 / q
    roots[:, 0] = np.where(lin, t_lin, np.where(disc >= 0, r1, np.nan))
    roots[:, 1] = np.where(lin, np.nan, np.where(disc >= 0, r2, np.nan))
    tol = 1e-12
    roots[(roots < -tol) | (roots > 1 + tol)] = np.nan
    return np.clip(roots, 0.0, 1.0)


def line_quadrature(mesh: Mesh, line: HLine, degree):
    """Quadrature for integrals of dx1 along the fluid part of a horizontal line.

    Returns (cells (n,), ref points (n, 2), x (n, 2), weights (n,)).
    """
    c = line.height
    nodes = mesh.cell_nodes()
    ymin = nodes[:, :, 1].min(axis=1)
    ymax = nodes[:, :, 1].max(axis=1)
    span = max(mesh.height, mesh.width)
    tol = 1e-11 * span
    pad = 0.05 * (ymax - ymin)
    cand = np.flatnonzero((ymin - pad <= c + tol) & (ymax + pad >= c - tol))
    t, w = ref.line_rule(degree)
    out_cells, out_ref, out_w = [], [], []
    # cells with an edge on the line
    on_edge_cells, on_edge_edges = [], []
    crossing = []
    for cell in cand:
        nd = nodes[cell]
        hit = None
        for e, (a, b) in enumerate(ref.EDGES):
            m = 3 + e
            if abs(nd[a, 1] - c) < tol and abs(nd[b, 1] - c) < tol and abs(nd[m, 1] - c) < tol:
                hit = e
                break
        if hit is not None:
            centroid = nd[:3, 1].mean()
            if (centroid > c) == (line.side == "+"):
                on_edge_cells.append(cell)
                on_edge_edges.append(hit)
        else:
            crossing.append(cell)
    if on_edge_cells:
        on_edge_cells = np.array(on_edge_cells)
        edges = np.array(on_edge_edges)
        rp = np.stack([ref.edge_ref_points(e, t) for e in range(3)])[edges]
        nd = nodes[on_edge_cells]
        dgeo = ref.shape_grads(2, rp)
        jac = np.einsum("nqia,nic->nqca", dgeo, nd)
        verts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
        dref = np.stack([verts[b] - verts[a] for a, b in ref.EDGES])[edges]
        dx1 = np.abs(np.einsum("nqa,na->nq", jac[:, :, 0, :], dref))
        out_cells.append(np.repeat(on_edge_cells, len(t)))
        out_ref.append(rp.reshape(-1, 2))
        out_w.append((dx1 * w).ravel())
    if crossing:
        crossing = np.array(crossing)
        nd = nodes[crossing]
        xs = []
        for e, (a, b) in enumerate(ref.EDGES):
            m = 3 + e
            roots = _edge_quadratic_roots(nd[:, a, 1], nd[:, m, 1], nd[:, b, 1], c)
            for k in range(2):
                tt = roots[:, k]
                # x along the quadratic edge
                xa, xm, xb = nd[:, a, 0], nd[:, m, 0], nd[:, b, 0]
                xq = xa * (1 - tt) * (1 - 2 * tt) + 4 * xm * tt * (1 - tt) + xb * tt * (2 * tt - 1)
                xs.append(xq)
        xs = np.stack(xs, axis=1)
        lo = np.nanmin(np.where(np.isnan(xs), np.inf, xs), axis=1)
        hi = np.nanmax(np.where(np.isnan(xs), -np.inf, xs), axis=1)
        ok = np.isfinite(lo) & np.isfinite(hi) & (hi - lo > tol)
        crossing, lo, hi = crossing[ok], lo[ok], hi[ok]
        if len(crossing):
            xq = lo[:, None] + (hi - lo)[:, None] * t[None, :]
            pts = np.stack([xq.ravel(), np.full(xq.size, c)], axis=1)
            cells_rep = np.repeat(crossing, len(t))
            rp, conv = kernels.invert_points(nodes[cells_rep], pts)
            if not np.all(conv):
                raise LocationError("line quadrature: map inversion failed", pts[~conv])
            out_cells.append(cells_rep)
            out_ref.append(rp)
            out_w.append(((hi - lo)[:, None] * w[None, :]).ravel())
    if not out_cells:
        raise LocationError(f"horizontal line y = {c} intersects no fluid cells")
    cells = np.concatenate(out_cells)
    rp = np.concatenate(out_ref)
    wts = np.concatenate(out_w)
    x = np.einsum("ni,nic->nc", ref.shape_values(2, rp), nodes[cells])
    if line.x_range is not None:
        keep = (x[:, 0] >= line.x_range[0]) & (x[:, 0] <= line.x_range[1])
        cells, rp, x, wts = cells[keep], rp[keep], x[keep], wts[keep]
    return cells, rp, x, wts


def quadrature(mesh: Mesh, region=None, degree=6):
    """Flattened quadrature over a region.

    Returns (cells (n,), ref points (n, 2), x (n, 2), weights (n,)).
    """
    region = region if region is not None else Cells()
    if isinstance(region, Cells):
        cells = region.select(mesh)
        if len(cells) == 0:
            raise ValueError("integration region selects no cells")
        pts, wts = ref.triangle_rule(degree)
        x, _, det = geometry_at(mesh.cell_nodes(cells), pts)
        return np.repeat(cells, len(wts)), np.tile(pts, (len(cells), 1)), x.reshape(-1, 2), (det * wts).ravel()
    if isinstance(region, Facets):
        sel = mesh.facet_selection(region.tag)
        if len(sel) == 0:
            raise ValueError(f"facet tag {region.tag} selects no facets")
        cells, rp, x, w = facet_quadrature(mesh, sel, degree)
        return np.repeat(cells, rp.shape[1]), rp.reshape(-1, 2), x.reshape(-1, 2), w.ravel()
    if isinstance(region, HLine):
        return line_quadrature(mesh, region, degree)
    if isinstance(region, Box):
        cells, refs, w = box_quadrature(mesh, region, degree)
        x = np.einsum("ni,nic->nc", ref.shape_values(2, refs), mesh.cell_nodes(cells))
        return cells, refs, x, w
    raise TypeError(f"unsupported region {region!r}")


def integrate(target, expr, region=None, quad_degree=None):
    """Integrate ``expr`` over a region of cells, a tagged facet set or a
    horizontal line.

    ``target`` is a Mesh, FeSpace or StokesSolution. ``expr(x, fields)``
    receives physical points (n, 2) and, for a solution, a dict of fields
    ('v', 'p', 'grad_v') evaluated at those points; it returns (n,) values.
    """
    solution = target if isinstance(target, StokesSolution) else None
    if solution is not None:
        mesh = solution.mesh
        k = solution.space.vel_degree
    elif isinstance(target, FeSpace):
        mesh, k = target.mesh, target.vel_degree
    else:
        mesh, k = target, 2
    degree = quad_degree if quad_degree is not None else 2 * k + 2
    cells_rep, refs, xw, w = quadrature(mesh, region, degree)
    fields = solution.at(cells_rep, refs, gradients=True) if solution is not None else {}
    vals = np.asarray(expr(xw, fields), dtype=float)
    return float(np.sum(vals * w))
