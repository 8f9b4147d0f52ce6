"""Hot per-cell kernels, compiled with numba when available.

Every kernel has a vectorized numpy twin (`*_np`) and an njit loop
(`*_nb`); the public names dispatch on :data:`twopressure._accel.HAVE_NUMBA`.
Both paths emit values in identical cell/entry order so assembled
operators agree to rounding regardless of backend.

Conventions: `verts` is (nv, dim) float64, `cells` is (nc, dim+1) int64
with positive orientation, nodal fields are (nv,) float64.
"""

import numpy as np

from ._accel import HAVE_NUMBA, njit

# --------------------------------------------------------------------------
# geometry: cell measures and P1 shape-function gradients
# --------------------------------------------------------------------------


def _tri_geometry_np(verts, cells):
    p0 = verts[cells[:, 0]]
    p1 = verts[cells[:, 1]]
    p2 = verts[cells[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    grads = np.empty((len(cells), 3, 2))
    # grad of the hat at vertex i is the rotated opposite edge / (2 area)
    for i, (j, k) in enumerate(((1, 2), (2, 0), (0, 1))):
        e = verts[cells[:, k]] - verts[cells[:, j]]
        grads[:, i, 0] = -e[:, 1] / det
        grads[:, i, 1] = e[:, 0] / det
    return area, grads


@njit(cache=True)
def _tri_geometry_nb(verts, cells):
    nc = cells.shape[0]
    area = np.empty(nc)
    grads = np.empty((nc, 3, 2))
    for c in range(nc):
        a0, a1, a2 = cells[c, 0], cells[c, 1], cells[c, 2]
        d1x = verts[a1, 0] - verts[a0, 0]
        d1y = verts[a1, 1] - verts[a0, 1]
        d2x = verts[a2, 0] - verts[a0, 0]
        d2y = verts[a2, 1] - verts[a0, 1]
        det = d1x * d2y - d1y * d2x
        area[c] = 0.5 * det
        for i in range(3):
            j = (i + 1) % 3
            k = (i + 2) % 3
            ex = verts[cells[c, k], 0] - verts[cells[c, j], 0]
            ey = verts[cells[c, k], 1] - verts[cells[c, j], 1]
            grads[c, i, 0] = -ey / det
            grads[c, i, 1] = ex / det
    return area, grads


def _seg_geometry_np(verts, cells):
    x0 = verts[cells[:, 0], 0]
    x1 = verts[cells[:, 1], 0]
    length = x1 - x0
    grads = np.empty((len(cells), 2, 1))
    grads[:, 0, 0] = -1.0 / length
    grads[:, 1, 0] = 1.0 / length
    return length, grads


@njit(cache=True)
def _seg_geometry_nb(verts, cells):
    nc = cells.shape[0]
    length = np.empty(nc)
    grads = np.empty((nc, 2, 1))
    for c in range(nc):
        ell = verts[cells[c, 1], 0] - verts[cells[c, 0], 0]
        length[c] = ell
        grads[c, 0, 0] = -1.0 / ell
        grads[c, 1, 0] = 1.0 / ell
    return length, grads


# --------------------------------------------------------------------------
# local matrices
# --------------------------------------------------------------------------


def _stiffness_values_np(grads, measures, coeff):
    return coeff * measures[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)


@njit(cache=True)
def _stiffness_values_nb(grads, measures, coeff):
    nc, nloc, dim = grads.shape
    out = np.empty((nc, nloc, nloc))
    for c in range(nc):
        for i in range(nloc):
            for j in range(nloc):
                s = 0.0
                for d in range(dim):
                    s += grads[c, i, d] * grads[c, j, d]
                out[c, i, j] = coeff * measures[c] * s
    return out


# exact P1 mass pattern: measure/12 * (1 + delta_ij) on triangles,
# measure/6 * (1 + delta_ij) on segments
def _mass_values_np(measures, nloc):
    pattern = (np.ones((nloc, nloc)) + np.eye(nloc)) / (6.0 if nloc == 2 else 12.0)
    return measures[:, None, None] * pattern


@njit(cache=True)
def _mass_values_nb(measures, nloc):
    nc = measures.shape[0]
    denom = 6.0 if nloc == 2 else 12.0
    out = np.empty((nc, nloc, nloc))
    for c in range(nc):
        for i in range(nloc):
            for j in range(nloc):
                base = 2.0 if i == j else 1.0
                out[c, i, j] = measures[c] * base / denom
    return out


# --------------------------------------------------------------------------
# field evaluation
# --------------------------------------------------------------------------


def _cell_gradients_np(cells, grads, u):
    return np.einsum("ci,cid->cd", u[cells], grads)


@njit(cache=True)
def _cell_gradients_nb(cells, grads, u):
    nc, nloc, dim = grads.shape
    out = np.zeros((nc, dim))
    for c in range(nc):
        for i in range(nloc):
            ui = u[cells[c, i]]
            for d in range(dim):
                out[c, d] += ui * grads[c, i, d]
    return out


def _eval_p1_np(cells, u, basis):
    # basis is (nq, nloc): reference shape values at quadrature points
    return u[cells] @ basis.T


@njit(cache=True)
def _eval_p1_nb(cells, u, basis):
    nc, nloc = cells.shape
    nq = basis.shape[0]
    out = np.zeros((nc, nq))
    for c in range(nc):
        for q in range(nq):
            s = 0.0
            for i in range(nloc):
                s += u[cells[c, i]] * basis[q, i]
            out[c, q] = s
    return out


# --------------------------------------------------------------------------
# point location (first containing cell in index order)
# --------------------------------------------------------------------------


def _locate_np(verts, cells, pts, tol):
    npts = pts.shape[0]
    nc, nloc = cells.shape
    idx = np.full(npts, -1, dtype=np.int64)
    bary = np.zeros((npts, nloc))
    if nloc == 2:
        a = verts[cells[:, 0], 0]
        b = verts[cells[:, 1], 0]
        for start in range(0, npts, 512):
            sl = slice(start, min(start + 512, npts))
            t = (pts[sl, 0][:, None] - a[None, :]) / (b - a)[None, :]
            inside = (t >= -tol) & (t <= 1.0 + tol)
            hit = inside.any(axis=1)
            first = np.argmax(inside, axis=1)
            idx[sl] = np.where(hit, first, -1)
            rows = np.nonzero(hit)[0]
            tv = t[rows, first[rows]]
            off = start
            bary[off + rows, 0] = 1.0 - tv
            bary[off + rows, 1] = tv
        return idx, bary
    a0 = verts[cells[:, 0]]
    d1 = verts[cells[:, 1]] - a0
    d2 = verts[cells[:, 2]] - a0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    for start in range(0, npts, 512):
        sl = slice(start, min(start + 512, npts))
        rx = pts[sl, 0][:, None] - a0[None, :, 0]
        ry = pts[sl, 1][:, None] - a0[None, :, 1]
        l1 = (rx * d2[None, :, 1] - ry * d2[None, :, 0]) / det[None, :]
        l2 = (d1[None, :, 0] * ry - d1[None, :, 1] * rx) / det[None, :]
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        hit = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        idx[sl] = np.where(hit, first, -1)
        rows = np.nonzero(hit)[0]
        off = start
        bary[off + rows, 0] = l0[rows, first[rows]]
        bary[off + rows, 1] = l1[rows, first[rows]]
        bary[off + rows, 2] = l2[rows, first[rows]]
    return idx, bary


@njit(cache=True)
def _locate_nb(verts, cells, pts, tol):
    npts = pts.shape[0]
    nc, nloc = cells.shape
    idx = np.full(npts, -1, dtype=np.int64)
    bary = np.zeros((npts, nloc))
    for p in range(npts):
        if nloc == 2:
            x = pts[p, 0]
            for c in range(nc):
                a = verts[cells[c, 0], 0]
                b = verts[cells[c, 1], 0]
                t = (x - a) / (b - a)
                if -tol <= t <= 1.0 + tol:
                    idx[p] = c
                    bary[p, 0] = 1.0 - t
                    bary[p, 1] = t
                    break
        else:
            x = pts[p, 0]
            y = pts[p, 1]
            for c in range(nc):
                a0x = verts[cells[c, 0], 0]
                a0y = verts[cells[c, 0], 1]
                d1x = verts[cells[c, 1], 0] - a0x
                d1y = verts[cells[c, 1], 1] - a0y
                d2x = verts[cells[c, 2], 0] - a0x
                d2y = verts[cells[c, 2], 1] - a0y
                det = d1x * d2y - d1y * d2x
                rx = x - a0x
                ry = y - a0y
                l1 = (rx * d2y - ry * d2x) / det
                l2 = (d1x * ry - d1y * rx) / det
                l0 = 1.0 - l1 - l2
                if l0 >= -tol and l1 >= -tol and l2 >= -tol:
                    idx[p] = c
                    bary[p, 0] = l0
                    bary[p, 1] = l1
                    bary[p, 2] = l2
                    break
    return idx, bary


if HAVE_NUMBA:
    tri_geometry = _tri_geometry_nb
    seg_geometry = _seg_geometry_nb
    stiffness_values = _stiffness_values_nb
    mass_values = _mass_values_nb
    cell_gradients = _cell_gradients_nb
    eval_p1 = _eval_p1_nb
    locate = _locate_nb
else:
    tri_geometry = _tri_geometry_np
    seg_geometry = _seg_geometry_np
    stiffness_values = _stiffness_values_np
    mass_values = _mass_values_np
    cell_gradients = _cell_gradients_np
    eval_p1 = _eval_p1_np
    locate = _locate_np
