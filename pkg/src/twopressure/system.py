"""The coupled two-scale system: operators, solves, and time stepping.

The macroscopic pressure satisfies a semilinear elliptic equation whose
right-hand side samples the microscopic concentration through a
reduction (cell average or Robin-boundary trace average).  Each macro
dof carries an independent parabolic cell problem on the shared micro
mesh, coupled back through a Robin condition on the marked part of the
cell boundary.

Semidiscrete form, with `B` the (n_macro, n_micro) coefficient matrix:

    P a = F(a, B)
    My db_i/dt + Ky b_i = kappa (a_i + p_F) g + w_i(t),   Ky = D Sy + kappa R Gy

where b_i is row i of B and w_i collects optional forcing.  The macro
mass matrix cancels row-wise because the Robin load factors through it,
so the micro step is a single factorized solve for all rows at once.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, quadrature
from .fem import SolverError
from .mesh import Mark

MICRO_EXACT_MAX_DOFS = 512


class AssumptionError(ValueError):
    """A model assumption is violated; `assumption` names which one."""

    def __init__(self, assumption, message):
        super().__init__(f"{assumption}: {message}")
        self.assumption = assumption


@dataclass
class ModelParams:
    """Physical constants of the coupled model.

    A        macro diffusivity
    D        micro diffusivity
    kappa    Robin exchange coefficient
    R        Henry-type proportionality in the Robin law
    p_F      constant forcing pressure in the Robin law
    theta    reaction cutoff threshold
    T        time horizon
    """

    A: float = 2.0
    D: float = 1.0
    kappa: float = 1.0
    R: float = 1.0
    p_F: float = 1.0
    theta: float = 4.0
    T: float = 1.0

    def validate(self, c_pi=0.0, c_rho=0.0):
        for name in ("A", "D", "kappa", "R", "p_F", "theta", "T"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise AssumptionError(
                    "parameter positivity",
                    f"{name} must be strictly positive and finite, got {v!r}",
                )
        if self.A <= max(c_pi, c_rho):
            raise AssumptionError(
                "macro diffusion dominance",
                f"A={self.A} must exceed the reaction Lipschitz bounds "
                f"c_pi={c_pi}, c_rho={c_rho}",
            )
        return self


@dataclass
class ReactionTerm:
    """Reaction coupling the macro pressure to the reduced micro state.

    f(s, r) must vanish at s <= 0 and s >= theta and be a contraction in
    s; c_pi and c_rho are the declared Lipschitz bounds in s and r.  The
    reduction picks how the micro state enters: "y_mean" averages the
    cell solution over the cell domain, "trace_mean" over the Robin part
    of its boundary.
    """

    f: callable
    c_pi: float
    c_rho: float
    reduction: str = "y_mean"
    df_ds: callable = None
    df_dr: callable = None

    def __post_init__(self):
        if self.reduction not in ("y_mean", "trace_mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def validate(self, theta, rng=None, samples=200):
        rng = rng or np.random.default_rng(0)
        if not self.c_pi < 1.0:
            raise AssumptionError(
                "reaction contraction",
                f"declared Lipschitz bound in s must be < 1, got c_pi={self.c_pi}",
            )
        r = rng.uniform(-3.0, 3.0, samples)
        if np.abs(self.f(np.zeros(samples), r)).max() > 1e-14:
            raise AssumptionError("reaction vanishes at zero", "f(0, r) != 0")
        s_above = rng.uniform(theta, 2 * theta, samples)
        if np.abs(self.f(s_above, r)).max() > 1e-14:
            raise AssumptionError(
                "reaction cutoff", f"f(s, r) != 0 for s above theta={theta}"
            )
        s1 = rng.uniform(-0.5, 1.5 * theta, samples)
        s2 = rng.uniform(-0.5, 1.5 * theta, samples)
        ds = np.abs(self.f(s1, r) - self.f(s2, r)) - self.c_pi * np.abs(s1 - s2)
        if ds.max() > 1e-10 * max(1.0, self.c_pi):
            raise AssumptionError(
                "reaction Lipschitz bound", "|f(s1,r)-f(s2,r)| exceeds c_pi |s1-s2|"
            )
        r2 = rng.uniform(-3.0, 3.0, samples)
        dr = np.abs(self.f(s1, r) - self.f(s1, r2)) - self.c_rho * np.abs(r - r2)
        if dr.max() > 1e-10 * max(1.0, self.c_rho):
            raise AssumptionError(
                "reaction Lipschitz bound", "|f(s,r1)-f(s,r2)| exceeds c_rho |r1-r2|"
            )
        return self


def default_reaction(c_f=0.5, theta=4.0, reduction="y_mean"):
    """Logistic-type production with smooth cutoff, gated by the micro state.

    f(s, r) = c_f s (1 - s/theta)^2 [0 <= s <= theta] (1 + tanh r)/2.
    The s-derivative is c_f (1-u)(1-3u) with u = s/theta, maximal at u=0,
    so c_pi = c_f; the r-derivative peaks at u = 1/3 giving
    c_rho = 2 c_f theta / 27.
    """

    def f(s, r):
        s = np.asarray(s, float)
        u = s / theta
        gate = 0.5 * (1.0 + np.tanh(np.asarray(r, float)))
        return np.where((s >= 0.0) & (s <= theta), c_f * s * (1.0 - u) ** 2, 0.0) * gate

    def df_ds(s, r):
        s = np.asarray(s, float)
        u = s / theta
        gate = 0.5 * (1.0 + np.tanh(np.asarray(r, float)))
        return np.where((s >= 0.0) & (s <= theta),
                        c_f * (1.0 - u) * (1.0 - 3.0 * u), 0.0) * gate

    def df_dr(s, r):
        s = np.asarray(s, float)
        u = s / theta
        core = np.where((s >= 0.0) & (s <= theta), c_f * s * (1.0 - u) ** 2, 0.0)
        return core * 0.5 / np.cosh(np.asarray(r, float)) ** 2

    return ReactionTerm(f=f, c_pi=c_f, c_rho=2.0 * c_f * theta / 27.0,
                        reduction=reduction, df_ds=df_ds, df_dr=df_dr)


def zero_reaction(reduction="y_mean"):
    def f(s, r):
        return np.zeros(np.broadcast(np.asarray(s), np.asarray(r)).shape)

    return ReactionTerm(f=f, c_pi=0.0, c_rho=0.0, reduction=reduction)


# -- operators ---------------------------------------------------------------


@dataclass
class SystemOperators:
    """All assembled operators of the semidiscrete system."""

    macro: fem.P1Space
    micro: fem.P1Space
    params: ModelParams
    P: sp.csr_matrix          # A-weighted macro stiffness, Dirichlet-eliminated
    Mx: sp.csr_matrix         # macro mass
    Sy: sp.csr_matrix         # micro stiffness (unweighted)
    My: sp.csr_matrix         # micro mass
    Gy: sp.csr_matrix         # Robin boundary mass
    Ky: sp.csr_matrix         # D Sy + kappa R Gy
    g: np.ndarray             # Robin boundary load
    m: np.ndarray             # macro load of 1
    mY: np.ndarray            # micro load of 1
    y_measure: float
    robin_measure: float

    @property
    def n_macro(self):
        return self.macro.n_dofs

    @property
    def n_micro(self):
        return self.micro.n_dofs

    @property
    def mask(self):
        return self.macro.dirichlet_mask


def assemble_system(macro, micro, params):
    """Assemble every operator of the coupled system.

    `macro` must carry Dirichlet dofs; `micro` must carry none and its
    mesh must have Robin-marked boundary facets.  kappa = 0 is accepted
    (it decouples the scales), other parameters must be positive.
    """
    if not macro.dirichlet_mask.any():
        raise AssumptionError(
            "macro boundary condition", "macro space has no Dirichlet dofs"
        )
    if micro.dirichlet_mask.any():
        raise AssumptionError(
            "micro boundary condition",
            "cell-problem space must not carry Dirichlet dofs",
        )
    if params.kappa < 0 or params.D <= 0 or params.R <= 0:
        raise AssumptionError(
            "parameter positivity", "need D > 0, R > 0, kappa >= 0"
        )
    P = fem.apply_dirichlet(
        fem.assemble_stiffness(macro, params.A), macro.dirichlet_mask
    )
    Mx = fem.assemble_mass(macro)
    Sy = fem.assemble_stiffness(micro)
    My = fem.assemble_mass(micro)
    Gy, g = fem.assemble_boundary_mass(micro, Mark.ROBIN)
    Ky = (params.D * Sy + params.kappa * params.R * Gy).tocsr()
    m = fem.load_vector(macro)
    mY = fem.load_vector(micro)
    return SystemOperators(
        macro=macro, micro=micro, params=params, P=P, Mx=Mx, Sy=Sy, My=My,
        Gy=Gy, Ky=Ky, g=g, m=m, mY=mY,
        y_measure=micro.mesh.total_measure,
        robin_measure=float(g.sum()),
    )


def coupling_matrix(ops):
    """Kronecker form of the micro coupling tensor: kron(Mx, Ky)."""
    return sp.kron(ops.Mx, ops.Ky, format="csr")


def poincare_scale(mesh):
    """Coarse Poincare-constant estimate diam(domain)/pi used in validation."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return float(np.linalg.norm(hi - lo)) / np.pi


def validate_problem(ops, reaction):
    """Model-level checks tying parameters, reaction, and mesh together."""
    ops.params.validate(reaction.c_pi, reaction.c_rho)
    reaction.validate(ops.params.theta)
    cp = poincare_scale(ops.macro.mesh)
    bound = reaction.c_pi * cp * cp / ops.params.A
    if bound >= 1.0:
        raise AssumptionError(
            "macro diffusion dominance",
            f"estimated fixed-point factor c_pi*(diam/pi)^2/A = {bound:.3f} >= 1",
        )
    return bound


# -- state -------------------------------------------------------------------


@dataclass
class CoupledState:
    """Solution snapshot: macro coefficients and per-dof micro rows."""

    t: float
    alpha: np.ndarray         # (n_macro,)
    beta: np.ndarray          # (n_macro, n_micro)

    def copy(self):
        return CoupledState(self.t, self.alpha.copy(), self.beta.copy())


def save_state(state, path):
    """Text checkpoint; %.17g round-trips float64 exactly."""
    with open(path, "w") as fh:
        fh.write("%.17g %d %d\n" % (state.t, len(state.alpha),
                                    state.beta.shape[1]))
        fh.write(" ".join("%.17g" % v for v in state.alpha) + "\n")
        for row in state.beta:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_state(path):
    with open(path) as fh:
        head = fh.readline().split()
        t, n_macro, n_micro = float(head[0]), int(head[1]), int(head[2])
        alpha = np.array([float(v) for v in fh.readline().split()])
        beta = np.array(
            [[float(v) for v in fh.readline().split()] for _ in range(n_macro)]
        )
    if alpha.shape != (n_macro,) or beta.shape != (n_macro, n_micro):
        raise ValueError("checkpoint shape mismatch")
    return CoupledState(t, alpha, beta)


# -- reaction coupling ---------------------------------------------------------


def reduced_field(ops, reduction, beta):
    """Nodal macro field of the micro reduction; exact for tensor P1 states."""
    if reduction == "y_mean":
        return (beta @ ops.mY) / ops.y_measure
    if reduction == "trace_mean":
        return (beta @ ops.g) / ops.robin_measure
    raise ValueError(f"unknown reduction {reduction!r}")


def reaction_load(ops, reaction, alpha, beta, degree=2):
    """Load vector of f(pressure, reduced micro state) against the macro basis."""
    mesh = ops.macro.mesh
    bary, w = quadrature.simplex_rule(mesh.dim, degree)
    s = fem.eval_on_cells(ops.macro, alpha, bary)
    r = fem.eval_on_cells(
        ops.macro, reduced_field(ops, reaction.reduction, beta), bary
    )
    vals = reaction.f(s, r)
    contrib = mesh.cell_measures[:, None] * (vals * w[None, :]) @ bary
    F = np.zeros(ops.n_macro)
    for i in range(mesh.cells.shape[1]):
        np.add.at(F, mesh.cells[:, i], contrib[:, i])
    return F


@dataclass
class FixedPointResult:
    iterations: int
    update_norms: list
    contraction: float
    converged: bool


def elliptic_solve(ops, reaction, beta, alpha0=None, extra_load=None,
                   tol=1e-10, max_iter=200):
    """Banach fixed-point solve of P a = F(a, B) (+ extra load).

    Returns (alpha, FixedPointResult).  Raises SolverError when the
    iteration fails to contract within `max_iter`.
    """
    alpha = np.zeros(ops.n_macro) if alpha0 is None else np.asarray(alpha0, float)
    mask = ops.mask
    updates = []
    for it in range(1, max_iter + 1):
        rhs = reaction_load(ops, reaction, alpha, beta)
        if extra_load is not None:
            rhs = rhs + extra_load
        rhs[mask] = 0.0
        alpha_new = solve_macro(ops, rhs)
        delta = np.linalg.norm(alpha_new - alpha)
        updates.append(delta)
        alpha = alpha_new
        if delta <= tol * max(np.linalg.norm(alpha_new), 1.0):
            ratios = [
                updates[k + 1] / updates[k]
                for k in range(len(updates) - 1)
                if updates[k] > 1e-14
            ]
            contraction = max(ratios) if ratios else 0.0
            return alpha, FixedPointResult(it, updates, contraction, True)
    raise SolverError(
        "macro fixed point did not converge in "
        f"{max_iter} iterations; last updates {updates[-3:]}"
    )


def solve_macro(ops, rhs):
    if not hasattr(ops, "_P_lu"):
        ops._P_lu = spla.splu(ops.P.tocsc())
    x = ops._P_lu.solve(np.asarray(rhs, float))
    if not np.all(np.isfinite(x)):
        raise SolverError("macro solve produced non-finite values")
    x[ops.mask] = 0.0
    return x


# -- initial data ---------------------------------------------------------------


def tensor_load(macro, micro, rho, degree=2):
    """Tensor load R_ik = integral of rho(x,y) phi_i(x) eta_k(y).

    `rho` is called with x of shape (nx, d1) and y of shape (ny, d2) and
    must return the (nx, ny) value table.
    """
    bx, wx = quadrature.simplex_rule(macro.mesh.dim, degree)
    by, wy = quadrature.simplex_rule(micro.mesh.dim, degree)
    X = quadrature.cell_points(macro.mesh.vertices, macro.mesh.cells, bx)
    Y = quadrature.cell_points(micro.mesh.vertices, micro.mesh.cells, by)
    WX = (macro.mesh.cell_measures[:, None] * wx[None, :]).ravel()
    WY = (micro.mesh.cell_measures[:, None] * wy[None, :]).ravel()
    S = np.asarray(rho(X.reshape(-1, macro.mesh.dim), Y.reshape(-1, micro.mesh.dim)))
    BX = basis_matrix(macro, bx)
    BY = basis_matrix(micro, by)
    return BX.T @ (WX[:, None] * S * WY[None, :]) @ BY


def basis_matrix(space, bary):
    """Sparse (n_cells*n_q, n_dofs) matrix of basis values at rule points."""
    mesh = space.mesh
    nq, nloc = bary.shape
    nc = mesh.n_cells
    rows = np.repeat(np.arange(nc * nq), nloc)
    cols = np.repeat(mesh.cells, nq, axis=0).ravel()
    vals = np.tile(bary, (nc, 1)).ravel()
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(nc * nq, space.n_dofs)).tocsr()


def gradient_matrix(space, nq, axis):
    """Sparse (n_cells*n_q, n_dofs) matrix of one basis-gradient component.

    P1 gradients are constant per cell, so the value is repeated over the
    nq rule points of each cell.
    """
    mesh = space.mesh
    nc, nloc = mesh.cells.shape
    rows = np.repeat(np.arange(nc * nq), nloc)
    cols = np.repeat(mesh.cells, nq, axis=0).ravel()
    vals = np.repeat(mesh.shape_gradients[:, :, axis], nq, axis=0).ravel()
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(nc * nq, space.n_dofs)).tocsr()


def boundary_quad(space, mark, degree=2):
    """Quadrature points, weights, basis values, and outward normals on
    marked boundary facets.

    Weights carry the facet measures, so integrals over the marked
    boundary part are plain weighted sums.  1D facets are vertices with
    unit counting weight.
    """
    mesh = space.mesh
    facets = mesh.boundary_facets(mark)
    if len(facets) == 0:
        raise ValueError(f"mesh has no boundary facets marked {mark!r}")
    normals = mesh.facet_normals()[facets]
    if mesh.dim == 1:
        vids = mesh.facets[facets, 0]
        pts = mesh.vertices[vids]
        wts = np.ones(len(facets))
        basis = sp.coo_matrix(
            (np.ones(len(facets)), (np.arange(len(facets)), vids)),
            shape=(len(facets), space.n_dofs),
        ).tocsr()
        return pts, wts, basis, normals
    t, tw = np.polynomial.legendre.leggauss(max(1, (degree + 1) // 2))
    t = 0.5 * (t + 1.0)
    tw = 0.5 * tw
    va = mesh.vertices[mesh.facets[facets, 0]]
    vb = mesh.vertices[mesh.facets[facets, 1]]
    pts = (va[:, None, :] + t[None, :, None] * (vb - va)[:, None, :])
    nq = len(t)
    wts = (mesh.facet_measures[facets][:, None] * tw[None, :]).ravel()
    rows = np.repeat(np.arange(len(facets) * nq), 2)
    cols = np.repeat(mesh.facets[facets], nq, axis=0).ravel()
    vals = np.tile(np.column_stack([1.0 - t, t]), (len(facets), 1)).ravel()
    basis = sp.coo_matrix((vals, (rows, cols)),
                          shape=(len(facets) * nq, space.n_dofs)).tocsr()
    return pts.reshape(-1, mesh.dim), wts, basis, np.repeat(normals, nq,
                                                            axis=0)


def initial_beta(ops, rho_I):
    """Two-scale L2 projection of the initial micro profile."""
    R = tensor_load(ops.macro, ops.micro, rho_I)
    mx = spla.splu(ops.Mx.tocsc())
    my = spla.splu(ops.My.tocsc())
    return my.solve(mx.solve(R).T).T


def initial_state(ops, reaction, rho_I, extra_load=None):
    """Initial coupled state: projected micro rows, stationary macro solve."""
    beta0 = initial_beta(ops, rho_I)
    alpha0, _ = elliptic_solve(ops, reaction, beta0, extra_load=extra_load)
    return CoupledState(0.0, alpha0, beta0)


# -- micro dynamics -------------------------------------------------------------


def micro_row_exact(beta0_row, alpha_i, t, ops, extra_rhs=None):
    """Exact solution of one frozen-pressure cell problem at time t.

    Dense matrix-exponential evaluation of My b' + Ky b = rhs with
    rhs = kappa (alpha_i + p_F) g (+ extra_rhs); the integral term uses an
    augmented exponential so a singular Ky (kappa = 0) needs no special
    case.  Guarded to small cell spaces.
    """
    n = ops.n_micro
    if n > MICRO_EXACT_MAX_DOFS:
        raise ValueError(
            f"micro space has {n} dofs; exact propagator is limited to "
            f"{MICRO_EXACT_MAX_DOFS}"
        )
    My = ops.My.toarray()
    Ky = ops.Ky.toarray()
    G = np.linalg.solve(My, Ky)
    rhs = ops.params.kappa * (alpha_i + ops.params.p_F) * ops.g
    if extra_rhs is not None:
        rhs = rhs + extra_rhs
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = -G
    aug[:n, n:] = np.eye(n)
    E = scipy.linalg.expm(aug * t)
    return E[:n, :n] @ beta0_row + E[:n, n:] @ np.linalg.solve(My, rhs)


def steady_micro_row(ops, alpha_i):
    """Stationary cell state under frozen pressure: (alpha_i + p_F)/R."""
    if ops.params.kappa <= 0:
        raise ValueError("steady state requires kappa > 0")
    return np.full(ops.n_micro, (alpha_i + ops.params.p_F) / ops.params.R)


# -- time stepping ---------------------------------------------------------------


SCHEMES = ("implicit_euler", "crank_nicolson")
MODES = ("segregated", "iterated")


class StepWorkspace:
    """Caches factorizations shared across steps of equal size."""

    def __init__(self, ops):
        self.ops = ops
        self._micro = {}
        self._mx = None

    def micro_lu(self, dt, scheme):
        key = (float(dt), scheme)
        if key not in self._micro:
            My, Ky = self.ops.My, self.ops.Ky
            w = dt if scheme == "implicit_euler" else 0.5 * dt
            self._micro[key] = spla.splu((My + w * Ky).tocsc())
        return self._micro[key]

    def mx_lu(self):
        if self._mx is None:
            self._mx = spla.splu(self.ops.Mx.tocsc())
        return self._mx


def _micro_forcing(ops, alpha, w_src):
    """Per-row Robin forcing kappa (alpha_i + p_F) g plus optional sources."""
    rows = ops.params.kappa * (alpha + ops.params.p_F)
    rhs = rows[:, None] * ops.g[None, :]
    if w_src is not None:
        rhs = rhs + w_src
    return rhs


def step(state, dt, ops, reaction, mode="iterated", scheme="implicit_euler",
         sources=None, workspace=None, coupling_tol=1e-9, max_outer=50):
    """Advance the coupled state by one time step.

    mode "segregated" performs one micro sweep with the current pressure
    followed by one macro solve; "iterated" repeats the sweep until the
    combined relative update drops below `coupling_tol`.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    ws = workspace or StepWorkspace(ops)
    t0, t1 = state.t, state.t + dt
    lu = ws.micro_lu(dt, scheme)

    w0 = w1 = None
    macro_load_t1 = None
    if sources is not None:
        r1 = sources.micro_load(t1)
        if r1 is not None:
            w1 = ws.mx_lu().solve(r1)
        if scheme == "crank_nicolson":
            r0 = sources.micro_load(t0)
            if r0 is not None:
                w0 = ws.mx_lu().solve(r0)
        macro_load_t1 = sources.macro_load(t1)

    My, Ky = ops.My, ops.Ky

    def micro_sweep(alpha_new):
        if scheme == "implicit_euler":
            rhs = My @ state.beta.T + dt * _micro_forcing(ops, alpha_new, w1).T
        else:
            f0 = _micro_forcing(ops, state.alpha, w0)
            f1 = _micro_forcing(ops, alpha_new, w1)
            rhs = (My - 0.5 * dt * Ky) @ state.beta.T + 0.5 * dt * (f0 + f1).T
        return lu.solve(rhs).T

    if mode == "segregated":
        beta_new = micro_sweep(state.alpha)
        alpha_new, _ = elliptic_solve(
            ops, reaction, beta_new, alpha0=state.alpha, extra_load=macro_load_t1
        )
        return CoupledState(t1, alpha_new, beta_new)

    alpha = state.alpha
    beta = state.beta
    for _ in range(max_outer):
        beta_new = micro_sweep(alpha)
        alpha_new, _ = elliptic_solve(
            ops, reaction, beta_new, alpha0=alpha, extra_load=macro_load_t1
        )
        da = np.linalg.norm(alpha_new - alpha) / max(np.linalg.norm(alpha_new), 1.0)
        db = np.linalg.norm(beta_new - beta) / max(np.linalg.norm(beta_new), 1.0)
        alpha, beta = alpha_new, beta_new
        if max(da, db) < coupling_tol:
            return CoupledState(t1, alpha, beta)
    raise SolverError(
        f"outer coupling iteration did not reach {coupling_tol:.1e} "
        f"in {max_outer} sweeps at t={t1:.6g}"
    )


# -- point evaluation -------------------------------------------------------------


def reconstruct(state, ops, x, y):
    """Pressure and concentration at physical points (x_j, y_j).

    Raises ValueError when any x is outside the macro domain or any y is
    outside the cell domain.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    cx, bx = ops.macro.mesh.locate(x)
    if (cx < 0).any():
        raise ValueError(f"macro point {x[int(np.argmin(cx))]} outside the domain")
    cy, by = ops.micro.mesh.locate(y)
    if (cy < 0).any():
        raise ValueError(f"micro point {y[int(np.argmin(cy))]} outside the cell domain")
    mv = ops.macro.mesh.cells[cx]
    pi = np.einsum("pi,pi->p", bx, state.alpha[mv])
    nv = ops.micro.mesh.cells[cy]
    block = state.beta[mv[:, :, None], nv[:, None, :]]
    rho = np.einsum("pi,pik,pk->p", bx, block, by)
    return pi, rho
