"""Curved 6-node triangle meshes of block domains.

A block (unit square, optionally with one inclusion) is triangulated once:
boundary vertices by arc-length sampling, graded offset layers around the
inclusion, a hexagonal lattice in the bulk, Delaunay triangulation with
encroaching points removed so that every boundary segment is a Delaunay
edge, and a few rounds of Laplacian smoothing. Domains are then tiled from
scaled copies of the block meshes, so every pore cell of a strip is an
exact translate of the unit-cell mesh.

Node numbering: ``points`` holds all geometric nodes; ``cells[:, :3]`` are
the corners (counterclockwise) and ``cells[:, 3:]`` the nodes on edges
(0,1), (1,2), (2,0). Edge nodes on inclusion boundaries lie on the exact
curve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from . import reference as ref
from .errors import MeshError
from .geometry import UNIT_CELL, Domain, DomainSpec, InclusionShape, build_domain

FACET_TAGS = ("Bottom", "Top", "InterfaceSigma", "PeriodicLeft", "PeriodicRight", "ObstacleWall")
SUBDOMAINS = ("PoreFluid", "FreeFluid")
PORE, FREE = 0, 1
BOTTOM, TOP, INTERFACE, LEFT, RIGHT, WALL = range(6)


@dataclass
class Mesh:
    points: np.ndarray  # (N, 2) geometric nodes
    cells: np.ndarray  # (M, 6)
    cell_tags: np.ndarray  # (M,) PORE or FREE
    facets: np.ndarray  # (F, 3) start, end, edge node
    facet_tags: np.ndarray  # (F,)
    facet_cells: np.ndarray  # (F,) owning cell (upper cell for interior facets)
    facet_edges: np.ndarray  # (F,) local edge index in the owning cell
    facet_curves: np.ndarray  # (F,) index into ``curves`` or -1
    curves: list = field(default_factory=list)
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    periodic_x: bool = True
    periodic_y: bool = False
    cell_block: np.ndarray | None = None
    cell_source: np.ndarray | None = None
    parent: np.ndarray | None = None
    level: int = 0

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def vertices(self):
        return self.points[np.unique(self.cells[:, :3])]

    @property
    def width(self):
        return self.bounds[1] - self.bounds[0]

    @property
    def height(self):
        return self.bounds[3] - self.bounds[2]

    def cell_nodes(self, cells=None):
        """Geometry node coordinates, shape (M, 6, 2)."""
        idx = self.cells if cells is None else self.cells[cells]
        return self.points[idx]

    @property
    def periodic_pairs(self):
        """(left, right) node pairs across x = x0 and x = x1."""
        return _side_pairs(self.points, np.unique(self.cells), 0, self.bounds[0], self.bounds[1])

    @property
    def periodic_pairs_y(self):
        return _side_pairs(self.points, np.unique(self.cells), 1, self.bounds[2], self.bounds[3])

    def facet_selection(self, tag):
        return np.flatnonzero(self.facet_tags == tag)

    def area(self, tag=None, degree=6):
        from .femcore import geometry_at

        pts, wts = ref.triangle_rule(degree)
        sel = slice(None) if tag is None else self.cell_tags == tag
        _, _, det = geometry_at(self.cell_nodes()[sel], pts)
        return float(np.sum(det * wts))

    def min_jacobian(self, degree=6):
        from .femcore import geometry_at

        pts, _ = ref.triangle_rule(degree)
        pts = np.concatenate([pts, ref.node_coords(2)])
        _, _, det = geometry_at(self.cell_nodes(), pts)
        return det.min(axis=1)


def _side_pairs(points, nodes, axis, lo, hi, tol=1e-12):
    span = hi - lo
    p = points[nodes]
    low = nodes[np.abs(p[:, axis] - lo) <= tol * max(1.0, span)]
    high = nodes[np.abs(p[:, axis] - hi) <= tol * max(1.0, span)]
    other = 1 - axis
    low = low[np.argsort(points[low, other], kind="stable")]
    high = high[np.argsort(points[high, other], kind="stable")]
    if len(low) != len(high) or not np.allclose(
        points[low, other], points[high, other], rtol=0.0, atol=tol * max(1.0, span)
    ):
        raise MeshError("periodic sides are not node-wise compatible")
    return np.stack([low, high], axis=1)


# ---------------------------------------------------------------------------
# block triangulation
# ---------------------------------------------------------------------------


def _grid(n):
    return np.arange(n + 1) / n


def _unique_rows_exact(pts):
    _, idx = np.unique(np.round(pts, 13), axis=0, return_index=True)
    return np.sort(idx)


def _block_point_set(shape, n, grading, xr):
    """Boundary points/segments and interior points for [0, xr] x [0, 1]."""
    h = 1.0 / n
    g = _grid(n)
    half = xr < 1.0
    bpts = []
    segs = []

    def add_chain(chain, closed=False):
        start = sum(len(c) for c in bpts)
        bpts.append(np.asarray(chain, dtype=float))
        m = len(chain)
        for k in range(m - 1 + closed):
            segs.append((start + k, start + (k + 1) % m))

    nx = n // 2 if half else n
    gx = g[: nx + 1] if half else g
    add_chain(np.stack([gx, np.zeros_like(gx)], 1))
    add_chain(np.stack([gx, np.ones_like(gx)], 1))
    add_chain(np.stack([np.zeros_like(g), g], 1))
    if not half:
        add_chain(np.stack([np.ones_like(g), g], 1))

    interior = []
    sizes = []
    d_fill = 0.0
    if shape is not None:
        s0 = h / grading
        nb = max(16, int(np.ceil(shape.perimeter() / s0 / 4.0)) * 4)
        curve = shape.sample(nb)
        if half:
            keep = curve[:, 0] <= 0.5 + 1e-14
            curve = curve[keep]
            curve[np.abs(curve[:, 0] - 0.5) < 1e-14, 0] = 0.5
            # order along the arc from the top axis point to the bottom one
            ang = np.arctan2(curve[:, 1] - shape.center[1], curve[:, 0] - shape.center[0])
            ang = np.where(ang < 0, ang + 2 * np.pi, ang)
            curve = curve[np.argsort(ang)]
            add_chain(curve)
        else:
            add_chain(curve, closed=True)
        s, d = s0, 0.0
        while True:
            s_next = min(h, s * 1.3)
            d += 0.5 * (s + s_next) * 0.866
            s = s_next
            m = max(16, int(np.ceil(shape.perimeter(d) / s / 4.0)) * 4)
            layer = shape.sample(m, offset=d)
            interior.append(layer)
            sizes.append(np.full(len(layer), s))
            if s >= h:
                break
        d_fill = d + 0.75 * h
    # hexagonal lattice, symmetric about x = 1/2
    dy = h * np.sqrt(3.0) / 2.0
    rows = np.arange(0.5 * dy, 1.0, dy)
    rows = rows + 0.5 * (1.0 - rows[-1] - rows[0])
    lat = []
    for r, y in enumerate(rows):
        shift = 0.0 if r % 2 == 0 else 0.5 * h
        x = 0.5 + shift + h * np.arange(-n - 1, n + 2)
        lat.append(np.stack([x, np.full_like(x, y)], 1))
    lat = np.concatenate(lat)
    if shape is not None:
        lat = lat[shape.signed_distance(lat) > d_fill]
    interior.append(lat)
    sizes.append(np.full(len(lat), h))

    bpts = np.concatenate(bpts)
    ipts = np.concatenate(interior)
    isz = np.concatenate(sizes)
    # inside the (half) block with a margin
    margin = 0.45 * isz
    inside = (
        (ipts[:, 0] > margin)
        & (ipts[:, 1] > margin)
        & (ipts[:, 1] < 1.0 - margin)
        & (ipts[:, 0] < xr - (margin if not half else 0.3 * isz))
    )
    ipts, isz = ipts[inside], isz[inside]

    if half:
        # axis points on x = 1/2 inside the fluid
        ay = g[(g > 0) & (g < 1)]
        axis = np.stack([np.full_like(ay, 0.5), ay], 1)
        if shape is not None:
            axis = axis[shape.signed_distance(axis) > 0.5 * h / grading]
        on_curve = bpts[np.abs(bpts[:, 0] - 0.5) < 1e-14]
        axis_all = np.concatenate([axis, on_curve])
        axis_all = axis_all[_unique_rows_exact(axis_all)]
        order = np.argsort(axis_all[:, 1])
        axis_all = axis_all[order]
        # map to indices in the boundary list (append the new ones)
        keys = {tuple(np.round(p, 13)): k for k, p in enumerate(bpts)}
        idx = []
        new = []
        for p in axis_all:
            key = tuple(np.round(p, 13))
            if key not in keys:
                keys[key] = len(bpts) + len(new)
                new.append(p)
            idx.append(keys[key])
        if new:
            bpts = np.concatenate([bpts, np.array(new)])
        for a, b in zip(idx[:-1], idx[1:]):
            mid = 0.5 * (bpts[a] + bpts[b])
            if shape is None or not shape.contains(mid[None])[0]:
                segs.append((a, b))
    segs = np.array(segs, dtype=int)
    # de-duplicate boundary points (square corners appear in several chains)
    key_pts = np.round(bpts, 13)
    uniq, inv = np.unique(key_pts, axis=0, return_inverse=True)
    inv = inv.ravel()
    first = np.full(len(uniq), -1)
    for k in range(len(bpts)):
        if first[inv[k]] < 0:
            first[inv[k]] = k
    order = np.argsort(first)
    remap = np.empty(len(uniq), dtype=int)
    remap[order] = np.arange(len(uniq))
    bpts = bpts[first[order]]
    segs = remap[inv[segs]]
    segs = segs[segs[:, 0] != segs[:, 1]]
    segs = np.unique(np.sort(segs, axis=1), axis=0)
    return bpts, segs, ipts, isz


def _drop_close(ipts, isz, bpts, factor=0.55):
    """Greedy removal of interior points closer than factor * local size."""
    tree_b = cKDTree(bpts)
    dist_b, _ = tree_b.query(ipts)
    keep = dist_b > factor * isz
    ipts, isz = ipts[keep], isz[keep]
    order = np.argsort(isz, kind="stable")
    ipts, isz = ipts[order], isz[order]
    tree = cKDTree(ipts)
    alive = np.ones(len(ipts), dtype=bool)
    for k in range(len(ipts)):
        if not alive[k]:
            continue
        for j in tree.query_ball_point(ipts[k], factor * isz[k]):
            if j > k:
                alive[j] = False
    return ipts[alive], isz[alive]


def _encroaching(ipts, bpts, segs):
    mid = 0.5 * (bpts[segs[:, 0]] + bpts[segs[:, 1]])
    rad = 0.5 * np.linalg.norm(bpts[segs[:, 0]] - bpts[segs[:, 1]], axis=1)
    tree = cKDTree(ipts)
    bad = np.zeros(len(ipts), dtype=bool)
    for m, r in zip(mid, rad):
        for j in tree.query_ball_point(m, 1.02 * r):
            bad[j] = True
    return bad


def _in_region(points, shape, xr):
    ok = (points[:, 0] < xr) & (points[:, 0] > 0) & (points[:, 1] > 0) & (points[:, 1] < 1)
    if shape is not None:
        ok &= ~shape.contains(points)
    return ok


def _triangulate(pts, shape, xr):
    tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12")
    simp = tri.simplices
    cen = pts[simp].mean(axis=1)
    simp = simp[_in_region(cen, shape, xr)]
    a, b, c = pts[simp[:, 0]], pts[simp[:, 1]], pts[simp[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    simp = np.where((cross < 0)[:, None], simp[:, [0, 2, 1]], simp)
    return simp


def _smooth(pts, simp, n_fixed, iterations):
    for _ in range(iterations):
        edges = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
        edges = np.concatenate([edges, edges[:, ::-1]])
        acc = np.zeros_like(pts)
        cnt = np.zeros(len(pts))
        np.add.at(acc, edges[:, 0], pts[edges[:, 1]])
        np.add.at(cnt, edges[:, 0], 1.0)
        new = pts.copy()
        free = np.arange(n_fixed, len(pts))
        free = free[cnt[free] > 0]
        new[free] = acc[free] / cnt[free, None]
        pts = new
    return pts


def _quality(pts, simp):
    a, b, c = pts[simp[:, 0]], pts[simp[:, 1]], pts[simp[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    return 4.0 * np.sqrt(3.0) * area / (la**2 + lb**2 + lc**2)


def _mesh_region(shape, n, grading, xr, smoothing):
    bpts, segs, ipts, isz = _block_point_set(shape, n, grading, xr)
    ipts, isz = _drop_close(ipts, isz, bpts)
    bad = _encroaching(ipts, bpts, segs)
    ipts, isz = ipts[~bad], isz[~bad]
    nb = len(bpts)
    pts = np.concatenate([bpts, ipts])
    for _ in range(smoothing):
        simp = _triangulate(pts, shape, xr)
        moved = _smooth(pts, simp, nb, 2)
        inner = moved[nb:]
        ok = _in_region(inner, shape, xr) & ~_encroaching(inner, bpts, segs)
        inner = np.where(ok[:, None], inner, pts[nb:])
        pts = np.concatenate([bpts, inner])
    simp = _triangulate(pts, shape, xr)
    # every boundary segment must be an edge of the triangulation
    edges = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
    have = set(map(tuple, np.sort(edges, axis=1)))
    missing = [tuple(s) for s in segs if tuple(s) not in have]
    if missing:
        raise MeshError(f"{len(missing)} boundary segments not recovered by the triangulation")
    used = np.unique(simp)
    remap = -np.ones(len(pts), dtype=int)
    remap[used] = np.arange(len(used))
    return pts[used], remap[simp]


def _mirror(pts, simp):
    mpts = pts.copy()
    mpts[:, 0] = 1.0 - mpts[:, 0]
    on_axis = np.abs(pts[:, 0] - 0.5) < 1e-14
    idx = np.arange(len(pts))
    new = ~on_axis
    mirror_index = idx.copy()
    mirror_index[new] = len(pts) + np.arange(new.sum())
    allpts = np.concatenate([pts, mpts[new]])
    msimp = mirror_index[simp][:, [0, 2, 1]]
    return allpts, np.concatenate([simp, msimp])


def _p2_from_linear(vpts, simp, curves, curve_of_vertex):
    """Attach edge nodes; edges joining two vertices of the same curve that
    are neighbours on it get their node projected onto the curve."""
    edges = np.concatenate([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (vpts[uniq[:, 0]] + vpts[uniq[:, 1]])
    ca = curve_of_vertex[uniq[:, 0]]
    cb = curve_of_vertex[uniq[:, 1]]
    # count triangles per edge: boundary edges belong to one triangle
    count = np.bincount(inv, minlength=len(uniq))
    on_curve = (ca >= 0) & (ca == cb) & (count == 1)
    edge_curve = np.where(on_curve, ca, -1)
    for c in np.unique(edge_curve[edge_curve >= 0]):
        sel = edge_curve == c
        mids[sel] = curves[c].project(mids[sel])
    nv = len(vpts)
    points = np.concatenate([vpts, mids])
    m = len(simp)
    cells = np.concatenate([simp, nv + inv.reshape(3, m).T], axis=1)
    return points, cells, edge_curve


def mesh_block(shape: InclusionShape | None, n: int, grading: float = 1.0, symmetric: bool = False, smoothing: int = 3) -> Mesh:
    """Triangulate the unit square (minus ``shape``) with ``n`` edge
    subdivisions on every side."""
    if n < 2:
        raise MeshError("at least two subdivisions per side are required")
    if grading < 1.0:
        raise MeshError("grading must be >= 1")
    if symmetric:
        if n % 2:
            raise MeshError("a mirror-symmetric block needs an even number of subdivisions")
        if shape is not None and not shape.is_mirror_symmetric():
            raise MeshError("mirror-symmetric meshing requested for a non-symmetric inclusion")
        vpts, simp = _mesh_region(shape, n, grading, 0.5, smoothing)
        vpts, simp = _mirror(vpts, simp)
    else:
        vpts, simp = _mesh_region(shape, n, grading, 1.0, smoothing)
    curves = [shape] if shape is not None else []
    cov = -np.ones(len(vpts), dtype=int)
    if shape is not None:
        cov[np.abs(shape.level(vpts) - 1.0) < 1e-9] = 0
    points, cells, edge_curve = _p2_from_linear(vpts, simp, curves, cov)
    mesh = _finish(points, cells, np.full(len(cells), PORE if shape is not None else FREE), curves, (0.0, 1.0, 0.0, 1.0))
    return mesh


def _boundary_facets(points, cells, bounds, curves, interface=None):
    """Boundary (and interface) facets with tags, owning cell and local edge."""
    x0, x1, y0, y1 = bounds
    loc = [(0, 1, 3), (1, 2, 4), (2, 0, 5)]
    all_e = np.concatenate([cells[:, [a, b, m]] for a, b, m in loc])
    owner = np.tile(np.arange(len(cells)), 3)
    ledge = np.repeat(np.arange(3), len(cells))
    key = np.sort(all_e[:, :2], axis=1)
    uniq, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    bnd = cnt[inv] == 1
    tol = 1e-12 * max(1.0, y1 - y0, x1 - x0)
    facets, tags, fcells, fedges, fcurves = [], [], [], [], []
    pa = points[all_e[:, 0]]
    pb = points[all_e[:, 1]]
    pm = points[all_e[:, 2]]

    def on(axis, val):
        return (np.abs(pa[:, axis] - val) < tol) & (np.abs(pb[:, axis] - val) < tol)

    bottom, top = on(1, y0), on(1, y1)
    left, right = on(0, x0), on(0, x1)
    for mask, tag in ((bottom, BOTTOM), (top, TOP), (left, LEFT), (right, RIGHT)):
        sel = np.flatnonzero(mask & bnd)
        facets.append(all_e[sel])
        tags.append(np.full(len(sel), tag))
        fcells.append(owner[sel])
        fedges.append(ledge[sel])
        fcurves.append(np.full(len(sel), -1))
    wall = bnd & ~(bottom | top | left | right)
    sel = np.flatnonzero(wall)
    curve_idx = np.full(len(sel), -1)
    for c, shape in enumerate(curves):
        hit = np.abs(shape.level(pm[sel]) - 1.0) < 1e-8
        curve_idx[hit & (curve_idx < 0)] = c
    if np.any(curve_idx < 0):
        raise MeshError("boundary facet matches no outer side and no inclusion", cell=int(owner[sel[curve_idx < 0][0]]))
    facets.append(all_e[sel])
    tags.append(np.full(len(sel), WALL))
    fcells.append(owner[sel])
    fedges.append(ledge[sel])
    fcurves.append(curve_idx)
    if interface is not None:
        inter = on(1, interface) & ~bnd
        # owner is the cell above the line
        cen = points[cells[owner, :3]].mean(axis=1)
        sel = np.flatnonzero(inter & (cen[:, 1] > interface))
        facets.append(all_e[sel])
        tags.append(np.full(len(sel), INTERFACE))
        fcells.append(owner[sel])
        fedges.append(ledge[sel])
        fcurves.append(np.full(len(sel), -1))
    return (
        np.concatenate(facets).astype(int),
        np.concatenate(tags).astype(int),
        np.concatenate(fcells).astype(int),
        np.concatenate(fedges).astype(int),
        np.concatenate(fcurves).astype(int),
    )


def _finish(points, cells, cell_tags, curves, bounds, interface=None, **extra):
    facets, tags, fcells, fedges, fcurves = _boundary_facets(points, cells, bounds, curves, interface)
    return Mesh(points, cells, np.asarray(cell_tags), facets, tags, fcells, fedges, fcurves, list(curves), bounds, **extra)


def structured_square_mesh(n: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """n x n grid of squares, each split along its diagonal."""
    x0, x1, y0, y1 = bounds
    xs = x0 + (x1 - x0) * _grid(n)
    ys = y0 + (y1 - y0) * _grid(n)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vpts = np.stack([X.ravel(), Y.ravel()], 1)
    k = lambda i, j: j * (n + 1) + i  # noqa: E731
    simp = []
    for j in range(n):
        for i in range(n):
            simp.append((k(i, j), k(i + 1, j), k(i + 1, j + 1)))
            simp.append((k(i, j), k(i + 1, j + 1), k(i, j + 1)))
    points, cells, _ = _p2_from_linear(vpts, np.array(simp), [], -np.ones(len(vpts), dtype=int))
    return _finish(points, cells, np.full(len(cells), FREE), [], bounds)


# ---------------------------------------------------------------------------
# tiling, refinement, validation
# ---------------------------------------------------------------------------


def tile(domain: Domain, pore_block: Mesh | None, free_block: Mesh) -> Mesh:
    """Assemble a domain mesh from scaled, translated block meshes."""
    s = domain.scale
    pts, cells, tags, blk, src = [], [], [], [], []
    offset = 0
    for b_id, b in enumerate(domain.blocks):
        block = pore_block if b.porous else free_block
        if block is None:
            raise MeshError("pore block mesh required for a porous domain")
        p = block.points.copy()
        p[:, 0] = s * (p[:, 0] + b.i)
        p[:, 1] = s * (p[:, 1] + b.j)
        pts.append(p)
        cells.append(block.cells + offset)
        below = domain.spec.kind != UNIT_CELL and b.j < 0
        tags.append(np.full(block.n_cells, PORE) if below else block.cell_tags)
        blk.append(np.full(block.n_cells, b_id))
        src.append(np.arange(block.n_cells))
        offset += len(p)
    pts = np.concatenate(pts)
    cells = np.concatenate(cells)
    # merge coincident nodes on shared block sides
    scale_key = max(domain.bounds[1] - domain.bounds[0], domain.bounds[3] - domain.bounds[2])
    key = np.round(pts / scale_key, 11)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    order = np.argsort(first)
    remap = np.empty(len(first), dtype=int)
    remap[order] = np.arange(len(first))
    pts = pts[first[order]]
    cells = remap[inv[cells]]
    curves = list(domain.inclusions)
    mesh = _finish(
        pts,
        cells,
        np.concatenate(tags),
        curves,
        domain.bounds,
        interface=domain.interface if domain.spec.kind != UNIT_CELL else None,
        periodic_y=domain.periodic_y,
        cell_block=np.concatenate(blk),
        cell_source=np.concatenate(src),
        level=free_block.level,
    )
    return mesh


def triangulate(domain: Domain, h_target: float, grading: float = 1.0, symmetric: bool = False) -> Mesh:
    """Mesh the fluid region of ``domain`` with edge length about ``h_target``
    measured in block units."""
    if not h_target > 0:
        raise MeshError("h_target must be positive")
    n = max(2, int(round(1.0 / h_target)))
    if symmetric and n % 2:
        n += 1
    shape = domain.spec.shape
    pore = mesh_block(shape, n, grading, symmetric) if any(b.porous for b in domain.blocks) else None
    free = mesh_block(None, n, 1.0, symmetric)
    return tile(domain, pore, free)


def refine(mesh: Mesh) -> Mesh:
    """Split every triangle into four; edge nodes on inclusion boundaries
    are re-projected onto the exact curve."""
    from .femcore import map_points

    m = mesh.n_cells
    nodes = mesh.cell_nodes()
    # children in reference coordinates (corners of each child)
    child_ref = np.array(
        [
            [[0, 0], [0.5, 0], [0, 0.5]],
            [[0.5, 0], [1, 0], [0.5, 0.5]],
            [[0, 0.5], [0.5, 0.5], [0, 1]],
            [[0.5, 0.5], [0, 0.5], [0.5, 0]],
        ]
    )
    mids = np.array([[0, 1], [1, 2], [2, 0]])
    child_mid_ref = 0.5 * (child_ref[:, mids[:, 0]] + child_ref[:, mids[:, 1]])  # (4, 3, 2)
    # new corner indices: old geometric nodes
    corner_map = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [4, 5, 3]])
    new_corners = mesh.cells[:, corner_map].reshape(4 * m, 3)
    mid_phys = map_points(nodes, child_mid_ref.reshape(12, 2)).reshape(m, 4, 3, 2).reshape(4 * m, 3, 2)
    edge_keys = np.sort(np.stack([new_corners[:, [0, 1]], new_corners[:, [1, 2]], new_corners[:, [2, 0]]], 1), axis=2)
    flat_keys = edge_keys.reshape(-1, 2)
    uniq, first, inv = np.unique(flat_keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    new_pts = mid_phys.reshape(-1, 2)[first]
    # boundary facets split into two; their new edge nodes go on the curve
    nf = len(mesh.facets)
    f_a, f_b, f_m = mesh.facets.T
    sub_keys = np.concatenate([np.sort(np.stack([f_a, f_m], 1), 1), np.sort(np.stack([f_m, f_b], 1), 1)])
    lookup = {tuple(k): i for i, k in enumerate(uniq)}
    sub_idx = np.array([lookup[tuple(k)] for k in sub_keys], dtype=int)
    sub_curve = np.concatenate([mesh.facet_curves, mesh.facet_curves])
    for c, shape in enumerate(mesh.curves):
        sel = sub_idx[sub_curve == c]
        new_pts[sel] = shape.project(new_pts[sel])
    n_old = len(mesh.points)
    points = np.concatenate([mesh.points, new_pts])
    cells = np.concatenate([new_corners, n_old + inv.reshape(4 * m, 3)], axis=1)
    # facets
    ends_a = np.concatenate([f_a, f_m])
    ends_b = np.concatenate([f_m, f_b])
    # owner: child of the parent cell that contains both ends
    parent_cells = np.concatenate([mesh.facet_cells, mesh.facet_cells])
    f_cells = np.empty(2 * nf, dtype=int)
    f_edges = np.empty(2 * nf, dtype=int)
    for k in range(2 * nf):
        for c in range(4):
            cid = 4 * parent_cells[k] + c
            row = cells[cid, :3]
            if ends_a[k] in row and ends_b[k] in row:
                ia = int(np.flatnonzero(row == ends_a[k])[0])
                ib = int(np.flatnonzero(row == ends_b[k])[0])
                f_cells[k] = cid
                f_edges[k] = {(0, 1): 0, (1, 0): 0, (1, 2): 1, (2, 1): 1, (2, 0): 2, (0, 2): 2}[(ia, ib)]
                break
        else:
            raise MeshError("refined facet has no owning child", cell=int(parent_cells[k]))
    facets = np.stack([ends_a, ends_b, n_old + sub_idx], 1)
    order = np.argsort(np.concatenate([2 * np.arange(nf), 2 * np.arange(nf) + 1]), kind="stable")
    return Mesh(
        points,
        cells,
        np.repeat(mesh.cell_tags, 4),
        facets[order],
        np.concatenate([mesh.facet_tags, mesh.facet_tags])[order],
        f_cells[order],
        f_edges[order],
        sub_curve[order],
        list(mesh.curves),
        mesh.bounds,
        mesh.periodic_x,
        mesh.periodic_y,
        None if mesh.cell_block is None else np.repeat(mesh.cell_block, 4),
        None if mesh.cell_source is None else (4 * np.repeat(mesh.cell_source, 4) + np.tile(np.arange(4), m)),
        np.repeat(np.arange(m), 4),
        mesh.level + 1,
    )


def validate(mesh: Mesh, analytic_area: float | None = None, area_tol: float | None = None) -> Mesh:
    """Check Jacobian positivity, periodic compatibility and fluid area."""
    mj = mesh.min_jacobian()
    if np.any(mj <= 0):
        raise MeshError("non-positive Jacobian", cell=int(np.flatnonzero(mj <= 0)[0]))
    if mesh.periodic_x:
        mesh.periodic_pairs
    if mesh.periodic_y:
        mesh.periodic_pairs_y
    if analytic_area is not None:
        tol = area_tol if area_tol is not None else 1e-3 * analytic_area
        area = mesh.area()
        if abs(area - analytic_area) > tol:
            raise MeshError(f"fluid area {area:.12g} differs from analytic {analytic_area:.12g}")
    return mesh


@dataclass(frozen=True)
class MeshParams:
    """Block mesh resolution: ``n`` subdivisions per block side, grading
    towards the inclusion, mirror symmetry and uniform refinement levels."""

    n: int = 16
    grading: float = 2.0
    symmetric: bool = False
    levels: int = 0

    def to_dict(self):
        return {"n": self.n, "grading": self.grading, "symmetric": self.symmetric, "levels": self.levels}


def block_pair(shape: InclusionShape | None, params: MeshParams):
    """Pore and free block meshes with matching side node distributions."""
    pore = mesh_block(shape, params.n, params.grading, params.symmetric) if shape is not None else None
    free = mesh_block(None, params.n, 1.0, params.symmetric)
    for _ in range(params.levels):
        pore = refine(pore) if pore is not None else None
        free = refine(free)
    return pore, free


def domain_mesh(spec: DomainSpec, params: MeshParams, blocks=None) -> Mesh:
    """Mesh of a block domain, tiled from (possibly cached) block meshes."""
    domain = build_domain(spec)
    pore, free = blocks if blocks is not None else block_pair(spec.shape, params)
    return tile(domain, pore, free)


def unit_cell_mesh(shape: InclusionShape | None, h_target: float, grading: float = 1.0, symmetric: bool = False, levels: int = 0) -> Mesh:
    """Convenience: the periodic unit cell, optionally refined ``levels`` times."""
    domain = build_domain(DomainSpec(UNIT_CELL, shape))
    mesh = triangulate(domain, h_target, grading, symmetric)
    for _ in range(levels):
        mesh = refine(mesh)
    return mesh
