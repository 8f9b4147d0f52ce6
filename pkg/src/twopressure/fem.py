"""P1 finite elements: spaces, assembly, projections, and linear solves.

All operators are scipy CSR matrices assembled from exact closed-form
local matrices (P1 mass and stiffness are polynomial, so no quadrature
error enters the bilinear forms).  Dirichlet conditions are imposed by
zeroing rows and columns and placing a unit diagonal.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels, quadrature
from .mesh import Mark, SimplexMesh


class SolverError(RuntimeError):
    """Linear or fixed-point solve failed; message carries diagnostics."""


@dataclass
class P1Space:
    """Vertex-indexed continuous P1 space on a simplicial mesh.

    dof i is the nodal value at vertex i; `dirichlet_mask[i]` is True for
    vertices lying on Dirichlet-marked boundary facets.
    """

    mesh: SimplexMesh
    dirichlet_mask: np.ndarray
    dof_of_vertex: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dof_of_vertex is None:
            self.dof_of_vertex = np.arange(self.mesh.n_vertices)

    @property
    def n_dofs(self):
        return self.mesh.n_vertices


def make_space(mesh, dirichlet_marks=(Mark.DIRICHLET,)):
    """P1 space with essential conditions on the given boundary markers.

    Pass an empty tuple for a space without essential conditions (the
    cell-problem space, where the boundary enters weakly).
    """
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    for mark in dirichlet_marks:
        for f in mesh.boundary_facets(mark):
            mask[mesh.facets[f]] = True
    return P1Space(mesh, mask)


# -- assembly ----------------------------------------------------------------


def _scatter(cells, local, n):
    nloc = cells.shape[1]
    rows = np.repeat(cells, nloc, axis=1).ravel()
    cols = np.tile(cells, (1, nloc)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    return A.tocsr()


def assemble_stiffness(space, coeff=1.0):
    """coeff * integral of grad(phi_i) . grad(phi_j)."""
    mesh = space.mesh
    local = _kernels.stiffness_values(
        mesh.shape_gradients, mesh.cell_measures, float(coeff)
    )
    return _scatter(mesh.cells, local, space.n_dofs)


def assemble_mass(space):
    """integral of phi_i * phi_j (exact for P1)."""
    mesh = space.mesh
    local = _kernels.mass_values(mesh.cell_measures, mesh.cells.shape[1])
    return _scatter(mesh.cells, local, space.n_dofs)


def assemble_boundary_mass(space, mark=Mark.ROBIN):
    """Boundary mass matrix and load on facets with the given marker.

    Returns (G, g) with G_kl the facet integral of phi_k phi_l and g_k the
    facet integral of phi_k.  In 1D the marked facets are points and the
    integrals are point evaluations (counting measure).
    """
    mesh = space.mesh
    facets = mesh.boundary_facets(mark)
    if len(facets) == 0:
        raise ValueError(f"mesh has no boundary facets marked {Mark(mark).name}")
    n = space.n_dofs
    g = np.zeros(n)
    if mesh.dim == 1:
        vids = mesh.facets[facets, 0]
        G = sp.coo_matrix((np.ones(len(vids)), (vids, vids)), shape=(n, n)).tocsr()
        np.add.at(g, vids, 1.0)
        return G, g
    ell = mesh.facet_measures[facets]
    pairs = mesh.facets[facets]
    local = ell[:, None, None] * (np.ones((2, 2)) + np.eye(2)) / 6.0
    G = _scatter(pairs, local, n)
    np.add.at(g, pairs[:, 0], ell / 2.0)
    np.add.at(g, pairs[:, 1], ell / 2.0)
    return G, g


def load_vector(space, f=None, degree=2):
    """integral of f * phi_i by quadrature (f None means f == 1)."""
    mesh = space.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    out = np.zeros(space.n_dofs)
    if f is None:
        vals = np.ones((mesh.n_cells, len(w)))
    else:
        pts = quadrature.cell_points(mesh.vertices, mesh.cells, bary)
        vals = np.asarray(f(pts.reshape(-1, mesh.dim))).reshape(mesh.n_cells, len(w))
    contrib = mesh.cell_measures[:, None] * (vals * w[None, :]) @ bary
    for i in range(mesh.cells.shape[1]):
        np.add.at(out, mesh.cells[:, i], contrib[:, i])
    return out


def apply_dirichlet(A, mask):
    """Zero masked rows and columns and put 1 on the masked diagonal."""
    keep = sp.diags((~mask).astype(np.float64))
    return (keep @ A @ keep + sp.diags(mask.astype(np.float64))).tocsr()


def is_symmetric(A, tol=1e-12):
    d = abs(A - A.T)
    top = d.max() if d.nnz else 0.0
    scale = max(1.0, abs(A).max())
    return top <= tol * scale


# -- linear solve ------------------------------------------------------------


def solve_spd(A, b, mask=None, tol=1e-10):
    """Direct solve of a symmetric positive definite sparse system.

    Masked dofs are eliminated first and forced to exactly zero in the
    result.  Raises SolverError with residual diagnostics when the
    factorization fails, the system is detectably non-SPD, or the
    relative residual exceeds `tol`.
    """
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        A = apply_dirichlet(A, mask)
        b = np.where(mask, 0.0, b)
    if not is_symmetric(A, 1e-12):
        raise SolverError("operator is not symmetric")
    if A.diagonal().min() <= 0.0:
        raise SolverError("operator has a non-positive diagonal entry; not SPD")
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    try:
        x = spla.splu(A.tocsc()).solve(b)
    except RuntimeError as err:  # singular factorization
        raise SolverError(f"sparse factorization failed: {err}") from err
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite entries")
    if b @ x <= 0.0:
        raise SolverError("b.x <= 0 for nonzero b; operator is not positive definite")
    res = np.linalg.norm(A @ x - b) / nb
    if res > tol:
        raise SolverError(f"relative residual {res:.3e} exceeds {tol:.1e}")
    if mask is not None:
        x[mask] = 0.0
    return x


# -- field evaluation helpers -------------------------------------------------


def eval_on_cells(space, coeffs, bary):
    """Field values at per-cell quadrature points, shape (nc, nq).

    For P1 the shape functions in barycentric coordinates are the
    coordinates themselves, so `bary` doubles as the basis value table.
    """
    return _kernels.eval_p1(space.mesh.cells, np.asarray(coeffs, float), bary)


def cell_gradients(space, coeffs):
    """Piecewise-constant gradient of a P1 field, shape (nc, dim)."""
    mesh = space.mesh
    return _kernels.cell_gradients(
        mesh.cells, mesh.shape_gradients, np.asarray(coeffs, float)
    )


def l2_norm(space, coeffs):
    M = assemble_mass(space)
    c = np.asarray(coeffs, float)
    return float(np.sqrt(max(c @ (M @ c), 0.0)))


def prolong(fine_mesh, coeffs):
    """Nodal interpolation of a coarse P1 field onto a mesh refined from it.

    Exact because refined meshes are nested: new vertices are midpoints of
    parent edges recorded in `vertex_parents`.
    """
    vp = fine_mesh.vertex_parents
    c = np.asarray(coeffs, float)
    return 0.5 * (c[vp[:, 0]] + c[vp[:, 1]])


# -- projections ---------------------------------------------------------------


def _fd_gradient(u, pts, h=1e-6):
    g = np.empty_like(pts)
    for d in range(pts.shape[1]):
        dp = pts.copy()
        dm = pts.copy()
        dp[:, d] += h
        dm[:, d] -= h
        g[:, d] = (np.asarray(u(dp)) - np.asarray(u(dm))) / (2 * h)
    return g


def ritz_project(space, u, grad=None, coeff=1.0, degree=4):
    """Energy-norm best approximation of the field `u` in the space.

    With Dirichlet dofs present this minimizes the coeff-weighted energy
    distance with the boundary values clamped to zero; without them the
    full H1 inner product is used so the minimizer is unique.  `grad` is
    the gradient callable; omitted, it is approximated by central
    differences (adequate for smooth closed-form fields).
    """
    mesh = space.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    pts = quadrature.cell_points(mesh.vertices, mesh.cells, bary).reshape(-1, mesh.dim)
    gu = grad(pts) if grad is not None else _fd_gradient(u, pts)
    gu = np.asarray(gu, float).reshape(mesh.n_cells, len(w), mesh.dim)
    # rhs_i = coeff * sum_B |B| sum_q w_q grad u . grad phi_i
    wg = coeff * mesh.cell_measures[:, None, None] * (w[None, :, None] * gu)
    contrib = np.einsum("cqd,cid->ci", wg, mesh.shape_gradients)
    rhs = np.zeros(space.n_dofs)
    for i in range(mesh.cells.shape[1]):
        np.add.at(rhs, mesh.cells[:, i], contrib[:, i])
    A = assemble_stiffness(space, coeff)
    if space.dirichlet_mask.any():
        return solve_spd(A, rhs, mask=space.dirichlet_mask)
    uv = np.asarray(u(pts), float).reshape(mesh.n_cells, len(w))
    contrib = mesh.cell_measures[:, None] * (uv * w[None, :]) @ bary
    for i in range(mesh.cells.shape[1]):
        np.add.at(rhs, mesh.cells[:, i], contrib[:, i])
    return solve_spd(A + assemble_mass(space), rhs)


def quasi_interpolate(space, u, degree=2):
    """Clement-style averaging: nodal value = patch mean of u.

    The coefficient at vertex x is the integral of u over the cells
    touching x divided by the patch measure; exact for constants, and for
    affine u at vertices whose patch is point-symmetric.
    """
    mesh = space.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    pts = quadrature.cell_points(mesh.vertices, mesh.cells, bary)
    vals = np.asarray(u(pts.reshape(-1, mesh.dim))).reshape(mesh.n_cells, len(w))
    cell_int = mesh.cell_measures * (vals @ w)
    acc = np.zeros(space.n_dofs)
    meas = np.zeros(space.n_dofs)
    for i in range(mesh.cells.shape[1]):
        np.add.at(acc, mesh.cells[:, i], cell_int)
        np.add.at(meas, mesh.cells[:, i], mesh.cell_measures)
    return acc / meas


def field_error(space, coeffs, exact, exact_grad, degree=4):
    """L2 and H1-seminorm errors of a P1 field against a smooth exact field."""
    mesh = space.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    pts = quadrature.cell_points(mesh.vertices, mesh.cells, bary)
    uh = eval_on_cells(space, coeffs, bary)
    ue = np.asarray(exact(pts.reshape(-1, mesh.dim))).reshape(uh.shape)
    l2sq = float(np.sum(mesh.cell_measures[:, None] * w[None, :] * (ue - uh) ** 2))
    gh = cell_gradients(space, coeffs)
    ge = np.asarray(exact_grad(pts.reshape(-1, mesh.dim))).reshape(
        mesh.n_cells, len(w), mesh.dim
    )
    diff = ge - gh[:, None, :]
    h1sq = float(
        np.sum(mesh.cell_measures[:, None] * w[None, :] * (diff ** 2).sum(axis=2))
    )
    return np.sqrt(l2sq), np.sqrt(h1sq)
