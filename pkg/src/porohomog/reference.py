"""Lagrange bases and quadrature rules on the reference triangle.

The reference triangle has vertices (0, 0), (1, 0), (0, 1). Every basis
function of degree 1, 2 or 3 is written as a product of affine factors in
the barycentric coordinates, which gives values and gradients with one
generic routine.

Local node ordering follows the usual convention: vertices first, then
edge nodes for the edges (0,1), (1,2), (2,0), then interior nodes. For
degree 3 the two nodes on edge (a, b) are listed starting from the one
closest to ``a``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

EDGES = ((0, 1), (1, 2), (2, 0))

# d(lambda_k)/d(xi, eta)
_DLAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _factors(degree):
    """Return the basis as a list of (coefficient, [(k, a, b), ...]) meaning
    coefficient * prod(a * lambda_k + b)."""
    if degree == 1:
        return [(1.0, [(i, 1.0, 0.0)]) for i in range(3)]
    if degree == 2:
        basis = [(1.0, [(i, 1.0, 0.0), (i, 2.0, -1.0)]) for i in range(3)]
        basis += [(4.0, [(a, 1.0, 0.0), (b, 1.0, 0.0)]) for a, b in EDGES]
        return basis
    if degree == 3:
        basis = [(0.5, [(i, 1.0, 0.0), (i, 3.0, -1.0), (i, 3.0, -2.0)]) for i in range(3)]
        for a, b in EDGES:
            basis.append((4.5, [(a, 1.0, 0.0), (b, 1.0, 0.0), (a, 3.0, -1.0)]))
            basis.append((4.5, [(a, 1.0, 0.0), (b, 1.0, 0.0), (b, 3.0, -1.0)]))
        basis.append((27.0, [(0, 1.0, 0.0), (1, 1.0, 0.0), (2, 1.0, 0.0)]))
        return basis
    raise ValueError(f"unsupported Lagrange degree {degree}")


def n_local(degree):
    return (degree + 1) * (degree + 2) // 2


@lru_cache(maxsize=None)
def node_coords(degree):
    """Reference coordinates of the Lagrange nodes, shape (n_local, 2)."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = list(verts)
    if degree >= 2:
        for a, b in EDGES:
            if degree == 2:
                nodes.append(0.5 * (verts[a] + verts[b]))
            else:
                nodes.append((2 * verts[a] + verts[b]) / 3)
                nodes.append((verts[a] + 2 * verts[b]) / 3)
    if degree == 3:
        nodes.append(verts.mean(axis=0))
    out = np.array(nodes)
    out.setflags(write=False)
    return out


def _barycentric(ref):
    ref = np.asarray(ref, dtype=float)
    return np.stack([1.0 - ref[..., 0] - ref[..., 1], ref[..., 0], ref[..., 1]], axis=-1)


def shape_values(degree, ref):
    """Basis values at reference points ``ref`` (..., 2) -> (..., n_local)."""
    lam = _barycentric(ref)
    out = []
    for coef, factors in _factors(degree):
        val = np.full(lam.shape[:-1], coef)
        for k, a, b in factors:
            val = val * (a * lam[..., k] + b)
        out.append(val)
    return np.stack(out, axis=-1)


def shape_grads(degree, ref):
    """Reference gradients at ``ref`` (..., 2) -> (..., n_local, 2)."""
    lam = _barycentric(ref)
    out = []
    for coef, factors in _factors(degree):
        terms = [a * lam[..., k] + b for k, a, b in factors]
        dlam = np.zeros(lam.shape[:-1] + (3,))
        for m, (k, a, _) in enumerate(factors):
            prod = np.full(lam.shape[:-1], coef * a)
            for n, t in enumerate(terms):
                if n != m:
                    prod = prod * t
            dlam[..., k] += prod
        out.append(dlam @ _DLAMBDA)
    return np.stack(out, axis=-2)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Collapsed Gauss-Jacobi rule exact for polynomials of total ``degree``.

    Returns (points (nq, 2), weights (nq,)); weights sum to 1/2.
    """
    n = max(1, int(np.ceil((degree + 1) / 2)))
    xu, wu = roots_jacobi(n, 1.0, 0.0)
    xv, wv = roots_legendre(n)
    u = 0.5 * (xu + 1.0)
    v = 0.5 * (xv + 1.0)
    wu = wu / 4.0  # (1-x)/2 factor and dx = 2 du
    wv = wv / 2.0
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.stack([uu.ravel(), (vv * (1.0 - uu)).ravel()], axis=-1)
    wts = np.outer(wu, wv).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=None)
def line_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact for ``degree``."""
    n = max(1, int(np.ceil((degree + 1) / 2)))
    x, w = roots_legendre(n)
    t = 0.5 * (x + 1.0)
    w = 0.5 * w
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def edge_ref_points(edge, t):
    """Map parameters ``t`` in [0, 1] to reference coords on local edge ``edge``."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    a, b = EDGES[edge]
    t = np.asarray(t, dtype=float)[..., None]
    return (1.0 - t) * verts[a] + t * verts[b]


def edge_local_nodes(degree, edge):
    """Local node indices lying on ``edge``, ordered from its first vertex."""
    a, b = EDGES[edge]
    if degree == 1:
        return [a, b]
    if degree == 2:
        return [a, 3 + edge, b]
    return [a, 3 + 2 * edge, 4 + 2 * edge, b]
