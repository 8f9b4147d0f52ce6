"""Quadrature rules on reference simplices.

Rules are returned as barycentric coordinates plus weights normalized to
sum to one, so integrals are `measure * sum(w_q * f(x_q))`.  Triangle
rules are the symmetric Dunavant rules of degree 2, 4 and 6; interval
rules are Gauss-Legendre.
"""

import numpy as np


def _perm3(a):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)]


def _perm6(a, b):
    c = 1.0 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


# degree 2: edge midpoints
_TRI2_PTS = np.array([(0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.5, 0.0, 0.5)])
_TRI2_W = np.full(3, 1.0 / 3.0)

# degree 4, 6 points (Dunavant 1985)
_TRI4_PTS = np.array(
    _perm3(0.445948490915965) + _perm3(0.091576213509771)
)
_TRI4_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

# degree 6, 12 points
_TRI6_PTS = np.array(
    _perm3(0.249286745170910)
    + _perm3(0.063089014491502)
    + _perm6(0.310352451033785, 0.053145049844816)
)
_TRI6_W = np.array(
    [0.116786275726379] * 3
    + [0.050844906370207] * 3
    + [0.082851075618374] * 6
)


def interval_rule(degree):
    """Gauss-Legendre rule on the reference interval, barycentric form."""
    npts = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(npts)
    t = 0.5 * (x + 1.0)
    bary = np.column_stack([1.0 - t, t])
    return bary, 0.5 * w


def triangle_rule(degree):
    if degree <= 2:
        return _TRI2_PTS.copy(), _TRI2_W.copy()
    if degree <= 4:
        return _TRI4_PTS.copy(), _TRI4_W.copy()
    if degree <= 6:
        return _TRI6_PTS.copy(), _TRI6_W.copy()
    raise ValueError(f"no triangle rule of degree {degree}")


def simplex_rule(dim, degree):
    """Rule of at least the given degree on the reference dim-simplex.

    Returns (bary, weights) with bary of shape (nq, dim+1) and weights
    summing to 1.
    """
    if dim == 1:
        return interval_rule(degree)
    if dim == 2:
        return triangle_rule(degree)
    raise ValueError(f"unsupported dimension {dim}")


def cell_points(vertices, cells, bary):
    """Physical coordinates of rule points on every cell, shape (nc, nq, dim)."""
    return np.einsum("qi,cid->cqd", bary, vertices[cells])
