"""Residual error estimator and the adaptive refinement loop.

For P1 pressure fields the elementwise Laplacian vanishes, so the strong
element residual reduces to the reaction term plus any explicit volume
source, and the edge residual is the jump of the A-weighted normal flux.
Local indicators combine both with the standard diameter weights:

    eta_B^2 = H_B^2 ||R_B||_B^2 + sum_E beta_E |E| ||R_E||_E^2

with beta_E = 1/2 on interior edges (each edge is shared) and 1 on
boundary edges, where the residual is zero anyway.  Cells with
refinement indicator lambda_B > 1 form the marked set.
"""

from dataclasses import dataclass

import numpy as np

from . import fem, quadrature
from .system import reduced_field


def element_residual(state, ops, reaction, cell, source=None):
    """Strong residual on one cell, as a function of barycentric coordinates.

    Returns a callable mapping an (nq, nloc) barycentric array to residual
    samples.  `source` is an optional volume forcing evaluated at physical
    points.
    """
    mesh = ops.macro.mesh
    vids = mesh.cells[cell]
    a_loc = state.alpha[vids]
    r_loc = reduced_field(ops, reaction.reduction, state.beta)[vids]
    corners = mesh.vertices[vids]

    def residual(bary):
        bary = np.asarray(bary, float)
        vals = reaction.f(bary @ a_loc, bary @ r_loc)
        if source is not None:
            vals = vals + source(bary @ corners)
        return vals

    return residual


def _element_samples(state, ops, reaction, source, degree):
    mesh = ops.macro.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    s = fem.eval_on_cells(ops.macro, state.alpha, bary)
    rr = fem.eval_on_cells(
        ops.macro, reduced_field(ops, reaction.reduction, state.beta), bary
    )
    vals = reaction.f(s, rr)
    if source is not None:
        pts = quadrature.cell_points(mesh.vertices, mesh.cells, bary)
        vals = vals + source(pts.reshape(-1, mesh.dim)).reshape(vals.shape)
    return vals, w


def edge_jumps(state, ops):
    """Signed edge residuals R_E, constant per facet; zero on the boundary."""
    mesh = ops.macro.mesh
    grads = fem.cell_gradients(ops.macro, state.alpha)
    n = mesh.facet_normals()
    fc = mesh.facet_cells
    interior = fc[:, 1] >= 0
    re = np.zeros(len(mesh.facets))
    g0 = (grads[fc[interior, 0]] * n[interior]).sum(axis=1)
    g1 = (grads[fc[interior, 1]] * n[interior]).sum(axis=1)
    re[interior] = -ops.params.A * (g0 - g1)
    return re


def edge_residual(state, ops, facet):
    """Edge norm ||R_E||_E of the flux-jump residual of one facet."""
    mesh = ops.macro.mesh
    re = edge_jumps(state, ops)[facet]
    return abs(re) * np.sqrt(mesh.facet_measures[facet])


@dataclass
class EstimatorReport:
    """Per-cell indicators, refinement variables, and the marked set."""

    eta_B: np.ndarray          # local indicators, unsquared
    eta_sq_B: np.ndarray
    eta_global: float
    lambda_B: np.ndarray
    marked: np.ndarray         # cell ids with lambda_B > 1
    l2_pi: float
    eta_bar: float


def refinement_indicators(eta_sq_B, l2_pi, eta_bar):
    """Per-cell refinement variables lambda_B and the marked cell set.

    lambda_B scales the local squared indicator by the cell count against
    eta_bar times (|pi|_L2 + eta_R^2); cells with lambda_B > 1 are marked.
    """
    eta_sq_B = np.asarray(eta_sq_B, float)
    denom = eta_bar * (l2_pi + float(eta_sq_B.sum()))
    if denom > 0:
        lam = len(eta_sq_B) * eta_sq_B / denom
    else:
        lam = np.zeros(len(eta_sq_B))
    return lam, np.nonzero(lam > 1.0)[0]


def estimate(state, ops, reaction, eta_bar, source=None, degree=2):
    """Assemble the residual estimator report for the current state."""
    if not eta_bar > 0:
        raise ValueError("eta_bar must be positive")
    mesh = ops.macro.mesh
    vals, w = _element_samples(state, ops, reaction, source, degree)
    vol_sq = mesh.cell_measures * (vals ** 2 @ w)
    eta_sq = mesh.cell_diameters ** 2 * vol_sq

    re = edge_jumps(state, ops)
    fc = mesh.facet_cells
    interior = fc[:, 1] >= 0
    # half of |E| * ||R_E||_E^2 lands on each incident cell
    contrib = 0.5 * mesh.facet_measures ** 2 * re ** 2
    np.add.at(eta_sq, fc[interior, 0], contrib[interior])
    np.add.at(eta_sq, fc[interior, 1], contrib[interior])

    eta_total_sq = float(eta_sq.sum())
    l2_pi = float(np.sqrt(state.alpha @ (ops.Mx @ state.alpha)))
    lam, marked = refinement_indicators(eta_sq, l2_pi, eta_bar)
    return EstimatorReport(
        eta_B=np.sqrt(eta_sq),
        eta_sq_B=eta_sq,
        eta_global=float(np.sqrt(eta_total_sq)),
        lambda_B=lam,
        marked=marked,
        l2_pi=l2_pi,
        eta_bar=float(eta_bar),
    )


# -- residual functional ------------------------------------------------------


def residual_pairing(state, ops, reaction, phi_space, phi, source=None):
    """The residual functional applied to a test function phi.

    phi lives either on the macro mesh itself or on a nested refinement
    of it.  On the macro mesh the quadrature matches the solver's load
    assembly, so a Galerkin-exact state pairs to zero against discrete
    test functions vanishing on the Dirichlet boundary.  On a refined
    mesh the volume rule is applied per fine cell and edge integrals are
    split at the fine vertices, which keeps the piecewise structure of
    phi exact.
    """
    mesh = ops.macro.mesh
    if phi_space.mesh is mesh:
        return _pairing_matched(state, ops, reaction, phi_space, phi, source)
    return _pairing_fine(state, ops, reaction, phi_space, phi, source)


def _edge_gauss():
    t, w = np.polynomial.legendre.leggauss(2)
    return 0.5 * (t + 1.0), 0.5 * w


def _pairing_matched(state, ops, reaction, phi_space, phi, source):
    mesh = ops.macro.mesh
    vals, w = _element_samples(state, ops, reaction, source, degree=2)
    bary, _ = quadrature.simplex_rule(mesh.dim, 2)
    phi_q = fem.eval_on_cells(phi_space, phi, bary)
    total = float(np.sum(mesh.cell_measures * ((vals * phi_q) @ w)))

    re = edge_jumps(state, ops)
    fc = mesh.facet_cells
    interior = np.nonzero(fc[:, 1] >= 0)[0]
    if mesh.dim == 1:
        verts = mesh.facets[interior, 0]
        total += float(np.sum(re[interior] * phi[verts]))
        return total
    tg, wg = _edge_gauss()
    a = mesh.vertices[mesh.facets[interior, 0]]
    b = mesh.vertices[mesh.facets[interior, 1]]
    pts = a[:, None, :] + tg[None, :, None] * (b - a)[:, None, :]
    pvals = _eval_at_points(phi_space, phi, pts.reshape(-1, mesh.dim))
    pvals = pvals.reshape(len(interior), len(tg))
    total += float(
        np.sum(re[interior] * mesh.facet_measures[interior] * (pvals @ wg))
    )
    return total


def _eval_at_points(space, coeffs, pts):
    idx, bary = space.mesh.locate(pts)
    if (idx < 0).any():
        raise ValueError("test-function evaluation point outside its mesh")
    return np.einsum("pi,pi->p", bary, coeffs[space.mesh.cells[idx]])


def _pairing_fine(state, ops, reaction, phi_space, phi, source):
    coarse = ops.macro.mesh
    fine = phi_space.mesh
    bary, w = quadrature.simplex_rule(fine.dim, 2)
    pts = quadrature.cell_points(fine.vertices, fine.cells, bary)
    flat = pts.reshape(-1, fine.dim)
    cidx, cbary = coarse.locate(flat)
    if (cidx < 0).any():
        raise ValueError("refined mesh extends outside the macro domain")
    r_nodal = reduced_field(ops, reaction.reduction, state.beta)
    cverts = coarse.cells[cidx]
    s = np.einsum("pi,pi->p", cbary, state.alpha[cverts])
    rr = np.einsum("pi,pi->p", cbary, r_nodal[cverts])
    vals = reaction.f(s, rr)
    if source is not None:
        vals = vals + source(flat)
    vals = vals.reshape(fine.n_cells, len(w))
    phi_q = fem.eval_on_cells(phi_space, phi, bary)
    total = float(np.sum(fine.cell_measures * ((vals * phi_q) @ w)))

    re = edge_jumps(state, ops)
    fc = coarse.facet_cells
    interior = np.nonzero(fc[:, 1] >= 0)[0]
    if coarse.dim == 1:
        xpts = coarse.vertices[coarse.facets[interior, 0]]
        pvals = _eval_at_points(phi_space, phi, xpts)
        return total + float(np.sum(re[interior] * pvals))

    breaks = _edge_breakpoints(coarse, fine, interior)
    tg, wg = _edge_gauss()
    rows, t0s, t1s = [], [], []
    for row in range(len(interior)):
        ts = np.concatenate([[0.0], breaks[row], [1.0]])
        rows.append(np.full(len(ts) - 1, row))
        t0s.append(ts[:-1])
        t1s.append(ts[1:])
    rows = np.concatenate(rows)
    t0, t1 = np.concatenate(t0s), np.concatenate(t1s)
    va = coarse.vertices[coarse.facets[interior[rows], 0]]
    vb = coarse.vertices[coarse.facets[interior[rows], 1]]
    tq = t0[:, None] + (t1 - t0)[:, None] * tg[None, :]
    pts_e = va[:, None, :] + tq[..., None] * (vb - va)[:, None, :]
    pvals = _eval_at_points(phi_space, phi, pts_e.reshape(-1, 2))
    seg = (t1 - t0) * (pvals.reshape(-1, len(tg)) @ wg)
    per_edge = np.bincount(rows, weights=seg, minlength=len(interior))
    total += float(
        np.sum(re[interior] * coarse.facet_measures[interior] * per_edge)
    )
    return total


def _edge_breakpoints(coarse, fine, interior, tol=1e-9):
    """Sorted interior split parameters of fine vertices on coarse facets."""
    cidx, cbary = coarse.locate(fine.vertices)
    if (cidx < 0).any():
        raise ValueError("refined mesh extends outside the macro domain")
    row_of = {int(f): i for i, f in enumerate(interior)}
    found = [[] for _ in interior]
    onedge = np.nonzero((cbary < tol).any(axis=1))[0]
    for v in onedge:
        c = cidx[v]
        for j in range(3):
            if cbary[v, j] < tol:
                f = int(coarse.cell_facets[c, (j + 1) % 3])
                row = row_of.get(f)
                if row is None:
                    continue
                va, vb = coarse.vertices[coarse.facets[f]]
                d = vb - va
                t = float((fine.vertices[v] - va) @ d / (d @ d))
                if tol < t < 1.0 - tol:
                    found[row].append(t)
    return [np.sort(np.unique(ts)) for ts in found]


# -- adaptive loop ------------------------------------------------------------


@dataclass
class AdaptRound:
    mesh: object
    state: object
    report: EstimatorReport


@dataclass
class AdaptResult:
    rounds: list
    converged: bool

    @property
    def eta_trace(self):
        return [r.report.eta_global for r in self.rounds]

    @property
    def final(self):
        return self.rounds[-1]


def adapt_loop(solve, mesh0, eta_bar, max_rounds=12):
    """Drive solve -> estimate -> mark -> refine until eta_R < eta_bar.

    `solve` maps a mesh to (state, ops, reaction, source).  Stops early
    with converged=False when the marked set is empty while the estimate
    still exceeds the tolerance, or when max_rounds is exhausted; the
    per-round history carries the eta_R trace either way.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    mesh = mesh0
    rounds = []
    for _ in range(max_rounds):
        state, ops, reaction, source = solve(mesh)
        report = estimate(state, ops, reaction, eta_bar, source=source)
        rounds.append(AdaptRound(mesh, state, report))
        if report.eta_global < eta_bar:
            return AdaptResult(rounds, True)
        if len(report.marked) == 0:
            return AdaptResult(rounds, False)
        mesh = mesh.refine(report.marked)
    return AdaptResult(rounds, False)


def write_adapt_csv(result, path, h1_errors=None):
    """Per-round CSV table of the adaptive history."""
    lines = ["round,n_cells,eta_R,l2_pi,n_marked"
             + (",h1_error" if h1_errors is not None else "")]
    for k, r in enumerate(result.rounds):
        row = "%d,%d,%.17g,%.17g,%d" % (
            k, r.mesh.n_cells, r.report.eta_global, r.report.l2_pi,
            len(r.report.marked),
        )
        if h1_errors is not None:
            row += ",%.17g" % h1_errors[k]
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
