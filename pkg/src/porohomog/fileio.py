"""Plain-text mesh format, legacy-VTK export and coefficient files.

Mesh text format (all numbers written with 17 significant digits)::

    porohomog-mesh 1
    bounds x0 x1 y0 y1
    periodic px py
    level L
    nodes N
    x y                      (N lines)
    cells M
    n0 n1 n2 n3 n4 n5 tag    (M lines; corners then edge nodes)
    facets F
    a b m tag cell edge curve  (F lines)
    curves C
    <json dict>              (C lines, one inclusion shape each)
    blocks M | blocks 0
    block source parent     (M lines, -1 where undefined)

Node, cell and facet indices are zero-based.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import MeshError
from .geometry import InclusionShape
from .mesh import Mesh

FMT = "%.17g"
VTK_QUADRATIC_TRIANGLE = 22


def _num(x):
    return format(float(x), ".17g")


def write_mesh(mesh: Mesh, path):
    path = Path(path)
    lines = ["porohomog-mesh 1"]
    lines.append("bounds " + " ".join(_num(b) for b in mesh.bounds))
    lines.append(f"periodic {int(mesh.periodic_x)} {int(mesh.periodic_y)}")
    lines.append(f"level {mesh.level}")
    lines.append(f"nodes {len(mesh.points)}")
    lines += [f"{_num(x)} {_num(y)}" for x, y in mesh.points]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(map(str, c)) + f" {t}" for c, t in zip(mesh.cells, mesh.cell_tags)]
    lines.append(f"facets {len(mesh.facets)}")
    for f, t, c, e, cv in zip(mesh.facets, mesh.facet_tags, mesh.facet_cells, mesh.facet_edges, mesh.facet_curves):
        lines.append(f"{f[0]} {f[1]} {f[2]} {t} {c} {e} {cv}")
    lines.append(f"curves {len(mesh.curves)}")
    lines += [json.dumps(s.to_dict(), sort_keys=True) for s in mesh.curves]
    if mesh.cell_block is not None:
        lines.append(f"blocks {mesh.n_cells}")
        par = mesh.parent if mesh.parent is not None else -np.ones(mesh.n_cells, dtype=int)
        src = mesh.cell_source if mesh.cell_source is not None else -np.ones(mesh.n_cells, dtype=int)
        lines += [f"{b} {s} {p}" for b, s, p in zip(mesh.cell_block, src, par)]
    else:
        lines.append("blocks 0")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_mesh(path) -> Mesh:
    rows = Path(path).read_text().splitlines()
    it = iter(rows)

    def expect(key):
        line = next(it).split()
        if not line or line[0] != key:
            raise MeshError(f"mesh file: expected section {key!r}, found {' '.join(line)!r}")
        return line[1:]

    if expect("porohomog-mesh") != ["1"]:
        raise MeshError("unsupported mesh file version")
    bounds = tuple(float(v) for v in expect("bounds"))
    px, py = (bool(int(v)) for v in expect("periodic"))
    level = int(expect("level")[0])
    n = int(expect("nodes")[0])
    points = np.array([[float(v) for v in next(it).split()] for _ in range(n)]).reshape(n, 2)
    m = int(expect("cells")[0])
    ct = np.array([[int(v) for v in next(it).split()] for _ in range(m)], dtype=int).reshape(m, 7)
    nf = int(expect("facets")[0])
    ft = np.array([[int(v) for v in next(it).split()] for _ in range(nf)], dtype=int).reshape(nf, 7)
    nc = int(expect("curves")[0])
    curves = [InclusionShape.from_dict(json.loads(next(it))) for _ in range(nc)]
    nb = int(expect("blocks")[0])
    block = source = parent = None
    if nb:
        bt = np.array([[int(v) for v in next(it).split()] for _ in range(nb)], dtype=int)
        block = bt[:, 0]
        source = None if np.all(bt[:, 1] < 0) else bt[:, 1]
        parent = None if np.all(bt[:, 2] < 0) else bt[:, 2]
    return Mesh(
        points, ct[:, :6], ct[:, 6], ft[:, :3], ft[:, 3], ft[:, 4], ft[:, 5], ft[:, 6], curves, bounds,
        px, py, block, source, parent, level,
    )


def write_vtk(mesh: Mesh, path, point_data=None, title="porohomog"):
    """Legacy ASCII VTK with quadratic triangles.

    ``point_data`` maps names to arrays over the geometric nodes: shape (N,)
    for scalars, (N, 2) for vectors.
    """
    path = Path(path)
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {len(mesh.points)} double")
    out += [f"{_num(x)} {_num(y)} 0" for x, y in mesh.points]
    m = mesh.n_cells
    out.append(f"CELLS {m} {7 * m}")
    out += ["6 " + " ".join(map(str, c)) for c in mesh.cells]
    out.append(f"CELL_TYPES {m}")
    out += [str(VTK_QUADRATIC_TRIANGLE)] * m
    out.append(f"CELL_DATA {m}")
    out += ["SCALARS subdomain int 1", "LOOKUP_TABLE default"]
    out += [str(int(t)) for t in mesh.cell_tags]
    if point_data:
        out.append(f"POINT_DATA {len(mesh.points)}")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [_num(v) for v in arr]
            else:
                out.append(f"VECTORS {name} double")
                out += [f"{_num(a)} {_num(b)} 0" for a, b in arr]
    path.write_text("\n".join(out) + "\n")
    return path


def solution_point_data(solution):
    """Velocity and pressure at the geometric nodes of the solution's mesh."""
    mesh = solution.mesh
    geo_ref = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float)
    vals = solution.on_cells(np.arange(mesh.n_cells), geo_ref)
    vel = np.zeros((len(mesh.points), 2))
    pres = np.zeros(len(mesh.points))
    vel[mesh.cells.ravel()] = vals["v"].reshape(-1, 2)
    pres[mesh.cells.ravel()] = vals["p"].ravel()
    return {"velocity": vel, "pressure": pres}


def write_solution_vtk(solution, path, title="porohomog"):
    return write_vtk(solution.mesh, path, solution_point_data(solution), title)


def save_arrays(path, **arrays):
    """Write arrays to an uncompressed .npz file.

    Entries are written in sorted order with a fixed timestamp so equal
    arrays give byte-identical files.
    """
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def load_arrays(path):
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
