# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled point-location kernels (quadratic-map inversion)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()


cdef inline void _p2(double xi, double eta, double* v, double* dx, double* de) noexcept nogil:
    cdef double l0 = 1.0 - xi - eta
    v[0] = l0 * (2 * l0 - 1); v[1] = xi * (2 * xi - 1); v[2] = eta * (2 * eta - 1)
    v[3] = 4 * l0 * xi; v[4] = 4 * xi * eta; v[5] = 4 * eta * l0
    dx[0] = -(4 * l0 - 1); dx[1] = 4 * xi - 1; dx[2] = 0.0
    dx[3] = 4 * (l0 - xi); dx[4] = 4 * eta; dx[5] = -4 * eta
    de[0] = -(4 * l0 - 1); de[1] = 0.0; de[2] = 4 * eta - 1
    de[3] = -4 * xi; de[4] = 4 * xi; de[5] = 4 * (l0 - eta)


cdef inline bint _invert(const double[:, :, ::1] nodes, Py_ssize_t c, double px, double py,
                         int max_iter, double tol, double* out) noexcept nogil:
    cdef double ax = nodes[c, 0, 0], ay = nodes[c, 0, 1]
    cdef double e1x = nodes[c, 1, 0] - ax, e1y = nodes[c, 1, 1] - ay
    cdef double e2x = nodes[c, 2, 0] - ax, e2y = nodes[c, 2, 1] - ay
    cdef double det = e1x * e2y - e1y * e2x
    cdef double dxp = px - ax, dyp = py - ay
    cdef double xi = (dxp * e2y - dyp * e2x) / det
    cdef double eta = (e1x * dyp - e1y * dxp) / det
    cdef double v[6]
    cdef double dx[6]
    cdef double de[6]
    cdef double x, y, jxx, jxy, jex, jey, rx, ry, jd, sxi, seta, step = 1.0
    cdef int it, i
    for it in range(max_iter):
        _p2(xi, eta, v, dx, de)
        x = 0; y = 0; jxx = 0; jxy = 0; jex = 0; jey = 0
        for i in range(6):
            x += v[i] * nodes[c, i, 0]
            y += v[i] * nodes[c, i, 1]
            jxx += dx[i] * nodes[c, i, 0]
            jxy += dx[i] * nodes[c, i, 1]
            jex += de[i] * nodes[c, i, 0]
            jey += de[i] * nodes[c, i, 1]
        rx = x - px
        ry = y - py
        jd = jxx * jey - jxy * jex
        if fabs(jd) < 1e-300:
            jd = 1e-300
        sxi = (rx * jey - ry * jex) / jd
        seta = (jxx * ry - jxy * rx) / jd
        xi -= sxi
        eta -= seta
        step = fabs(sxi) + fabs(seta)
        if step < tol:
            break
    out[0] = xi
    out[1] = eta
    return isfinite(xi) and isfinite(eta) and step < 1e-10


def invert_points(nodes, points, int max_iter=30, double tol=1e-14):
    cdef const double[:, :, ::1] nv = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pv.shape[0], k
    ref = np.empty((n, 2))
    ok = np.empty(n, dtype=bool)
    cdef double[:, ::1] rv = ref
    cdef cnp.npy_bool[::1] okv = ok
    cdef double out[2]
    with nogil:
        for k in range(n):
            okv[k] = _invert(nv, k, pv[k, 0], pv[k, 1], max_iter, tol, out)
            rv[k, 0] = out[0]
            rv[k, 1] = out[1]
    return ref, ok


def locate_points(nodes, bin_ptr, bin_cells, origin, inv_size, shape, points, double tol):
    cdef const double[:, :, ::1] nv = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef const long long[::1] ptr = np.ascontiguousarray(bin_ptr, dtype=np.int64)
    cdef const long long[::1] bc = np.ascontiguousarray(bin_cells, dtype=np.int64)
    cdef const double[:, ::1] pv = np.ascontiguousarray(points, dtype=np.float64)
    cdef double ox = origin[0], oy = origin[1], sx = inv_size[0], sy = inv_size[1]
    cdef long long nx = shape[0], ny = shape[1], ix, iy, b, j
    cdef Py_ssize_t n = pv.shape[0], k
    cells = np.full(n, -1, dtype=np.int64)
    refs = np.zeros((n, 2))
    cdef long long[::1] cv = cells
    cdef double[:, ::1] rv = refs
    cdef double out[2]
    cdef bint ok
    with nogil:
        for k in range(n):
            ix = <long long>((pv[k, 0] - ox) * sx)
            iy = <long long>((pv[k, 1] - oy) * sy)
            if ix < 0: ix = 0
            if ix > nx - 1: ix = nx - 1
            if iy < 0: iy = 0
            if iy > ny - 1: iy = ny - 1
            b = iy * nx + ix
            for j in range(ptr[b], ptr[b + 1]):
                ok = _invert(nv, bc[j], pv[k, 0], pv[k, 1], 30, 1e-14, out)
                if ok and out[0] >= -tol and out[1] >= -tol and 1.0 - out[0] - out[1] >= -tol:
                    cv[k] = bc[j]
                    rv[k, 0] = out[0]
                    rv[k, 1] = out[1]
                    break
    return cells, refs
