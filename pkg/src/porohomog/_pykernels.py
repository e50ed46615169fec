"""Pure numpy implementations of the point-location kernels.

Same signatures as the compiled ``_ckernels`` module; used when the
extension is not built or when POROHOMOG_PURE_PYTHON is set.
"""
import numpy as np

_REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])


def _p2_basis(xi, eta):
    l0 = 1.0 - xi - eta
    val = np.stack(
        [l0 * (2 * l0 - 1), xi * (2 * xi - 1), eta * (2 * eta - 1), 4 * l0 * xi, 4 * xi * eta, 4 * eta * l0],
        axis=-1,
    )
    dxi = np.stack(
        [-(4 * l0 - 1), 4 * xi - 1, np.zeros_like(xi), 4 * (l0 - xi), 4 * eta, -4 * eta],
        axis=-1,
    )
    deta = np.stack(
        [-(4 * l0 - 1), np.zeros_like(xi), 4 * eta - 1, -4 * xi, 4 * xi, 4 * (l0 - eta)],
        axis=-1,
    )
    return val, dxi, deta


def invert_points(nodes, points, max_iter=30, tol=1e-14):
    """Reference coordinates of ``points[k]`` under the quadratic map of
    ``nodes[k]`` (k-th 6-node triangle). Returns (ref (n, 2), converged (n,))."""
    nodes = np.asarray(nodes, dtype=float)
    points = np.asarray(points, dtype=float)
    a = nodes[:, 0]
    e1 = nodes[:, 1] - a
    e2 = nodes[:, 2] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    d = points - a
    xi = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
    eta = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
    done = np.zeros(len(points), dtype=bool)
    for _ in range(max_iter):
        val, dxi, deta = _p2_basis(xi, eta)
        x = np.einsum("ni,nic->nc", val, nodes)
        jx = np.einsum("ni,nic->nc", dxi, nodes)
        je = np.einsum("ni,nic->nc", deta, nodes)
        r = x - points
        jd = jx[:, 0] * je[:, 1] - jx[:, 1] * je[:, 0]
        jd = np.where(np.abs(jd) > 1e-300, jd, 1e-300)
        sxi = (r[:, 0] * je[:, 1] - r[:, 1] * je[:, 0]) / jd
        seta = (jx[:, 0] * r[:, 1] - jx[:, 1] * r[:, 0]) / jd
        xi = xi - sxi
        eta = eta - seta
        step = np.abs(sxi) + np.abs(seta)
        done = step < tol
        if np.all(done):
            break
    ok = np.isfinite(xi) & np.isfinite(eta) & (done | (step < 1e-10))
    return np.stack([xi, eta], axis=1), ok


def locate_points(nodes, bin_ptr, bin_cells, origin, inv_size, shape, points, tol):
    """First cell (lowest id) containing each point within ``tol`` in
    barycentric coordinates; -1 where none does."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    nx, ny = int(shape[0]), int(shape[1])
    ix = np.clip(((points[:, 0] - origin[0]) * inv_size[0]).astype(np.int64), 0, nx - 1)
    iy = np.clip(((points[:, 1] - origin[1]) * inv_size[1]).astype(np.int64), 0, ny - 1)
    b = iy * nx + ix
    starts = bin_ptr[b]
    counts = bin_ptr[b + 1] - starts
    pid = np.repeat(np.arange(n), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cid = bin_cells[np.repeat(starts, counts) + offs]
    cells = -np.ones(n, dtype=np.int64)
    refs = np.zeros((n, 2))
    if len(pid) == 0:
        return cells, refs
    r, ok = invert_points(nodes[cid], points[pid])
    lam0 = 1.0 - r[:, 0] - r[:, 1]
    inside = ok & (r[:, 0] >= -tol) & (r[:, 1] >= -tol) & (lam0 >= -tol)
    pid, cid, r = pid[inside], cid[inside], r[inside]
    order = np.lexsort((cid, pid))
    pid, cid, r = pid[order], cid[order], r[order]
    first = np.ones(len(pid), dtype=bool)
    first[1:] = pid[1:] != pid[:-1]
    cells[pid[first]] = cid[first]
    refs[pid[first]] = r[first]
    return cells, refs
