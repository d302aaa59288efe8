"""Quadrature rules on the tetrahedron in barycentric form.

Each rule is ``(points, weights)`` with ``points`` of shape (q, 4) holding
barycentric coordinates and ``weights`` summing to 1 (multiply by the element
volume to integrate).
"""
from itertools import permutations

import numpy as np


def _orbit(*coords):
    return np.array(sorted(set(permutations(coords))), dtype=float)


def _rule_1():
    return np.full((1, 4), 0.25), np.array([1.0])


def _rule_4():
    a, b = 0.5854101966249685, 0.1381966011250105
    return _orbit(a, b, b, b), np.full(4, 0.25)


def _rule_11():
    # Keast, degree 4; the centroid weight is negative
    pts = [np.full((1, 4), 0.25),
           _orbit(0.7857142857142857, 0.0714285714285714, 0.0714285714285714, 0.0714285714285714),
           _orbit(0.3994035761667992, 0.3994035761667992, 0.1005964238332008, 0.1005964238332008)]
    w = np.concatenate([[-74.0 / 5625.0], np.full(4, 343.0 / 45000.0), np.full(6, 56.0 / 2250.0)])
    return np.vstack(pts), w * 6.0


RULES = {1: _rule_1, 2: _rule_4, 4: _rule_11}


def tet_rule(order):
    """Rule exact for polynomials up to ``order`` (1, 2 or 4)."""
    try:
        pts, w = RULES[order]()
    except KeyError:
        raise ValueError(f"no tetrahedron rule of order {order}; choose from {sorted(RULES)}") from None
    return pts, w


def _subdivide(tets):
    """Split barycentric tets (t, 4, 4) into 8 children each (Bey's rule, volume-exact)."""
    v = tets
    m = lambda i, j: 0.5 * (v[:, i] + v[:, j])  # noqa: E731
    x0, x1, x2, x3 = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
    x01, x02, x03, x12, x13, x23 = m(0, 1), m(0, 2), m(0, 3), m(1, 2), m(1, 3), m(2, 3)
    kids = [
        (x0, x01, x02, x03), (x01, x1, x12, x13), (x02, x12, x2, x23), (x03, x13, x23, x3),
        (x01, x02, x03, x13), (x01, x02, x12, x13), (x02, x03, x13, x23), (x02, x12, x13, x23),
    ]
    return np.concatenate([np.stack(k, axis=1) for k in kids], axis=0)


def composite_rule(order=4, levels=0):
    """Apply ``tet_rule(order)`` on each child of ``levels`` uniform subdivisions."""
    pts, w = tet_rule(order)
    if levels == 0:
        return pts, w
    tets = np.eye(4)[None]
    for _ in range(levels):
        tets = _subdivide(tets)
    # each child carries 1/8**levels of the parent volume
    allpts = np.einsum("qa,tab->tqb", pts, tets).reshape(-1, 4)
    allw = np.tile(w, len(tets)) / len(tets)
    return allpts, allw
