"""Manufactured problems, error norms, and convergence/effectivity studies.

A manufactured pair (pressure, concentration) is made an exact solution
of the extended system by injecting the forcing its defect defines: a
macro volume source, a micro volume source, and micro boundary defects
on the Robin and Neumann parts.  The sources are written out by hand per
problem and never trusted: `source_consistency` re-derives them with
finite differences at sampled points.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import estimator, fem, quadrature, system
from .estimator import estimate
from .fem import make_space
from .mesh import Mark, build_uniform
from .system import (
    CoupledState, ModelParams, StepWorkspace, assemble_system, basis_matrix,
    boundary_quad, coupling_matrix, default_reaction, elliptic_solve,
    gradient_matrix, initial_beta, micro_row_exact, step, tensor_load,
    zero_reaction,
)


def robin_left(mid):
    """Default micro boundary rule: exchange on the left end, sealed right."""
    return Mark.ROBIN if mid[0] < 0.5 else Mark.NEUMANN


@dataclass
class ManufacturedProblem:
    """Exact solution pair plus the forcing that makes it solve the system.

    Callables are vectorized with t scalar, X of shape (nx, dim_x) and Y
    of shape (ny, dim_y); two-scale fields return (nx, ny) tables, with
    gradient variants appending component axes.  `reduced` must evaluate
    the same reduction of the exact concentration that the reaction uses.
    """

    params: ModelParams
    reaction: object
    pi: callable
    grad_pi: callable
    lap_pi: callable
    rho: callable
    dt_rho: callable
    dy_rho: callable          # (t, X, Y) -> (nx, ny, dim_y)
    lapy_rho: callable
    reduced: callable         # (t, X) -> (nx,)
    dx_rho: callable = None   # (t, X, Y) -> (nx, ny, dim_x)
    dxdy_rho: callable = None  # (t, X, Y) -> (nx, ny, dim_x, dim_y)
    x_bounds: tuple = ((0.0, 1.0), (0.0, 1.0))
    y_bounds: tuple = ((0.0, 1.0),)
    micro_marker: callable = robin_left
    neumann_flux: bool = False
    name: str = "manufactured"

    def macro_source(self, t, X):
        p = self.params
        return (-p.A * self.lap_pi(t, X)
                - self.reaction.f(self.pi(t, X), self.reduced(t, X)))

    def micro_source(self, t, X, Y):
        return self.dt_rho(t, X, Y) - self.params.D * self.lapy_rho(t, X, Y)

    def boundary_flux(self, t, X, Yb, normals):
        return self.params.D * np.einsum(
            "xyd,yd->xy", self.dy_rho(t, X, Yb), normals)

    def robin_source(self, t, X, Yb, normals):
        p = self.params
        exchange = p.kappa * (
            self.pi(t, X)[:, None] + p.p_F - p.R * self.rho(t, X, Yb))
        return self.boundary_flux(t, X, Yb, normals) - exchange

    def neumann_source(self, t, X, Yb, normals):
        return self.boundary_flux(t, X, Yb, normals)


def default_problem(params=None, reduction="y_mean", c_f=0.5):
    """Smooth pair on the unit square with a one-dimensional cell domain.

    pressure sin(pi x0) sin(pi x1) (1 + t/T); concentration
    e^-t (1 + x0/2)(1 + cos^2(pi y)), whose end fluxes vanish so only the
    Robin exchange defect needs a boundary source.
    """
    params = params or ModelParams()
    reaction = default_reaction(c_f=c_f, theta=params.theta,
                                reduction=reduction)
    T = params.T

    def shape(X):
        return np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1])

    def pi(t, X):
        return shape(X) * (1.0 + t / T)

    def grad_pi(t, X):
        s0, c0 = np.sin(np.pi * X[:, 0]), np.cos(np.pi * X[:, 0])
        s1, c1 = np.sin(np.pi * X[:, 1]), np.cos(np.pi * X[:, 1])
        return np.pi * (1.0 + t / T) * np.column_stack([c0 * s1, s0 * c1])

    def lap_pi(t, X):
        return -2.0 * np.pi ** 2 * shape(X) * (1.0 + t / T)

    def a(X):
        return 1.0 + 0.5 * X[:, 0]

    def profile(Y):
        return 1.0 + np.cos(np.pi * Y[:, 0]) ** 2

    def rho(t, X, Y):
        return np.exp(-t) * np.outer(a(X), profile(Y))

    def dt_rho(t, X, Y):
        return -rho(t, X, Y)

    def dy_rho(t, X, Y):
        return (np.exp(-t)
                * np.outer(a(X), -np.pi * np.sin(2.0 * np.pi * Y[:, 0]))
                )[:, :, None]

    def lapy_rho(t, X, Y):
        return np.exp(-t) * np.outer(
            a(X), -2.0 * np.pi ** 2 * np.cos(2.0 * np.pi * Y[:, 0]))

    def dx_rho(t, X, Y):
        out = np.zeros((len(X), len(Y), 2))
        out[:, :, 0] = np.exp(-t) * 0.5 * profile(Y)[None, :]
        return out

    def dxdy_rho(t, X, Y):
        out = np.zeros((len(X), len(Y), 2, 1))
        out[:, :, 0, 0] = (np.exp(-t) * 0.5
                           * (-np.pi * np.sin(2.0 * np.pi * Y[:, 0]))[None, :])
        return out

    # cell means: int (1 + cos^2) = 3/2; trace at the exchange end: 2
    factor = 1.5 if reduction == "y_mean" else 2.0

    def reduced(t, X):
        return factor * np.exp(-t) * a(X)

    return ManufacturedProblem(
        params=params, reaction=reaction, pi=pi, grad_pi=grad_pi,
        lap_pi=lap_pi, rho=rho, dt_rho=dt_rho, dy_rho=dy_rho,
        lapy_rho=lapy_rho, reduced=reduced, dx_rho=dx_rho,
        dxdy_rho=dxdy_rho, name="default",
    )


def bilinear_problem(params=None, reduction="y_mean"):
    """Time-constant pair that lives in every tensor P1 space.

    Zero pressure and concentration (1 + x0)(1 + y/2): the discrete
    solution must reproduce it to solver precision on any mesh, which
    exercises the Robin and Neumann defect plumbing end to end.
    """
    params = params or ModelParams()
    reaction = zero_reaction(reduction=reduction)
    zero_x = lambda t, X: np.zeros(len(X))

    def a(X):
        return 1.0 + X[:, 0]

    def rho(t, X, Y):
        return np.outer(a(X), 1.0 + 0.5 * Y[:, 0])

    def dy_rho(t, X, Y):
        return np.broadcast_to(
            (0.5 * a(X))[:, None, None], (len(X), len(Y), 1)).copy()

    def zero_xy(t, X, Y):
        return np.zeros((len(X), len(Y)))

    def dx_rho(t, X, Y):
        out = np.zeros((len(X), len(Y), 2))
        out[:, :, 0] = (1.0 + 0.5 * Y[:, 0])[None, :]
        return out

    def dxdy_rho(t, X, Y):
        out = np.zeros((len(X), len(Y), 2, 1))
        out[:, :, 0, 0] = 0.5
        return out

    factor = 1.25 if reduction == "y_mean" else 1.0

    def reduced(t, X):
        return factor * a(X)

    return ManufacturedProblem(
        params=params, reaction=reaction, pi=zero_x,
        grad_pi=lambda t, X: np.zeros((len(X), 2)), lap_pi=zero_x,
        rho=rho, dt_rho=zero_xy, dy_rho=dy_rho, lapy_rho=zero_xy,
        reduced=reduced, dx_rho=dx_rho, dxdy_rho=dxdy_rho,
        neumann_flux=True, name="bilinear",
    )


# -- localized source for the adaptive loop -----------------------------------

SPIKE_CENTER = (0.7, 0.7)
SPIKE_BBOX = (0.39, 1.0, 0.39, 1.0)  # where the source exceeds 1% of its peak


def spike_source(X):
    d2 = (X[:, 0] - SPIKE_CENTER[0]) ** 2 + (X[:, 1] - SPIKE_CENTER[1]) ** 2
    return 40.0 * np.exp(-d2 / 0.02)


def stationary_solver(micro_n=2, params=None, source=spike_source):
    """Per-mesh solve callback for the adaptive loop: a pressure equation
    with an explicit source and decoupled (zero) cell state."""
    params = params or ModelParams()

    def solve(mesh):
        macro = make_space(mesh)
        micro = make_space(build_uniform([(0, 1)], micro_n, marker=robin_left),
                           dirichlet_marks=())
        ops = assemble_system(macro, micro, params)
        reaction = zero_reaction()
        load = fem.load_vector(macro, source)
        load[ops.mask] = 0.0
        alpha = system.solve_macro(ops, load)
        st = CoupledState(0.0, alpha, np.zeros((ops.n_macro, ops.n_micro)))
        return st, ops, reaction, source

    return solve


# -- source assembly -----------------------------------------------------------


class ManufacturedSources:
    """Forcing loads of a manufactured problem on concrete spaces.

    Scatter matrices and quadrature tables are precomputed once; each
    call only evaluates the source fields at the stored points.
    """

    def __init__(self, problem, macro, micro, degree=4):
        self.problem = problem
        mm, ym = macro.mesh, micro.mesh
        bx, wx = quadrature.simplex_rule(mm.dim, degree)
        self.X = quadrature.cell_points(mm.vertices, mm.cells,
                                        bx).reshape(-1, mm.dim)
        self.WX = (mm.cell_measures[:, None] * wx[None, :]).ravel()
        self.BX = basis_matrix(macro, bx)
        by, wy = quadrature.simplex_rule(ym.dim, degree)
        self.Y = quadrature.cell_points(ym.vertices, ym.cells,
                                        by).reshape(-1, ym.dim)
        self.WY = (ym.cell_measures[:, None] * wy[None, :]).ravel()
        self.BY = basis_matrix(micro, by)
        self.Yr, self.Wr, self.Br, self.Nr = boundary_quad(
            micro, Mark.ROBIN, degree)
        if problem.neumann_flux:
            self.Yn, self.Wn, self.Bn, self.Nn = boundary_quad(
                micro, Mark.NEUMANN, degree)

    def macro_load(self, t):
        vals = self.problem.macro_source(t, self.X)
        return self.BX.T @ (self.WX * vals)

    def micro_load(self, t):
        p = self.problem
        S = p.micro_source(t, self.X, self.Y)
        R = self.BX.T @ (self.WX[:, None] * S * self.WY[None, :]) @ self.BY
        Sr = p.robin_source(t, self.X, self.Yr, self.Nr)
        R += self.BX.T @ (self.WX[:, None] * Sr * self.Wr[None, :]) @ self.Br
        if p.neumann_flux:
            Sn = p.neumann_source(t, self.X, self.Yn, self.Nn)
            R += self.BX.T @ (
                self.WX[:, None] * Sn * self.Wn[None, :]) @ self.Bn
        return R


def source_consistency(problem, t=0.37, n_pts=24, seed=0, h=1e-3):
    """Finite-difference residuals of the exact pair under its own sources.

    Fourth-order stencils keep truncation and roundoff each below ~1e-7,
    so a correctly derived problem clears the 1e-6 gate with margin.
    The exact-field callables must tolerate evaluation a couple of
    stencil widths outside the closed domain.
    """
    rng = np.random.default_rng(seed)
    (x0, x1), (z0, z1) = problem.x_bounds
    (y0, y1), = problem.y_bounds
    X = np.column_stack([rng.uniform(x0 + 0.05, x1 - 0.05, n_pts),
                         rng.uniform(z0 + 0.05, z1 - 0.05, n_pts)])
    Y = rng.uniform(y0 + 0.05, y1 - 0.05, n_pts)[:, None]
    p = problem.params
    out = {}

    def d1(g):
        return (-g(2 * h) + 8 * g(h) - 8 * g(-h) + g(-2 * h)) / (12 * h)

    def d2(g):
        return (-g(2 * h) + 16 * g(h) - 30 * g(0.0) + 16 * g(-h)
                - g(-2 * h)) / (12 * h ** 2)

    def shift(Z, d, s):
        W = Z.copy()
        W[:, d] += s
        return W

    lap_fd = sum(d2(lambda s, d=d: problem.pi(t, shift(X, d, s)))
                 for d in range(X.shape[1]))
    macro_res = (-p.A * lap_fd
                 - problem.reaction.f(problem.pi(t, X), problem.reduced(t, X))
                 - problem.macro_source(t, X))
    out["macro"] = float(np.abs(macro_res).max())

    pair = lambda f: np.diagonal(f)  # X[i] with Y[i]
    dt_fd = d1(lambda s: problem.rho(t + s, X, Y))
    yy_fd = d2(lambda s: problem.rho(t, X, Y + s))
    micro_res = pair(dt_fd - p.D * yy_fd - problem.micro_source(t, X, Y))
    out["micro"] = float(np.abs(micro_res).max())

    for name, yb, normal in (("robin", y0, -1.0), ("neumann", y1, 1.0)):
        Yb = np.array([[yb]])
        nb = np.array([[normal]])
        flux_fd = normal * d1(lambda s: problem.rho(t, X, Yb + s))
        if name == "robin":
            src = problem.robin_source(t, X, Yb, nb)
            res = (p.D * flux_fd
                   - p.kappa * (problem.pi(t, X)[:, None] + p.p_F
                                - p.R * problem.rho(t, X, Yb))
                   - src)
        else:
            res = p.D * flux_fd - (problem.neumann_source(t, X, Yb, nb)
                                   if problem.neumann_flux
                                   else np.zeros((len(X), 1)))
        out[name] = float(np.abs(res).max())

    gx, gw = np.polynomial.legendre.leggauss(24)
    yq = (0.5 * (y1 - y0) * gx + 0.5 * (y0 + y1))[:, None]
    wq = 0.5 * (y1 - y0) * gw
    if problem.reaction.reduction == "y_mean":
        red = problem.rho(t, X, yq) @ wq / (y1 - y0)
    else:
        red = problem.rho(t, X, np.array([[y0]]))[:, 0]
    out["reduction"] = float(np.abs(red - problem.reduced(t, X)).max())
    return out


# -- time integration -----------------------------------------------------------


def integrate(state, ops, reaction, dt, nsteps, sources=None,
              mode="iterated", scheme="crank_nicolson"):
    """March nsteps and return the full trajectory including the start."""
    ws = StepWorkspace(ops)
    traj = [state]
    for _ in range(nsteps):
        state = step(state, dt, ops, reaction, mode=mode, scheme=scheme,
                     sources=sources, workspace=ws)
        traj.append(state)
    return traj


def build_spaces(problem, n_macro, n_micro):
    macro = make_space(build_uniform(problem.x_bounds, n_macro))
    micro = make_space(
        build_uniform(problem.y_bounds, n_micro, marker=problem.micro_marker),
        dirichlet_marks=(),
    )
    return macro, micro


def initial_coupled_state(problem, ops, sources):
    beta0 = initial_beta(ops, lambda X, Y: problem.rho(0.0, X, Y))
    alpha0, _ = elliptic_solve(ops, problem.reaction, beta0,
                               extra_load=sources.macro_load(0.0))
    return CoupledState(0.0, alpha0, beta0)


def run_problem(problem, n_macro, n_micro, dt, mode="iterated",
                scheme="crank_nicolson"):
    """Full time integration of a manufactured problem.

    Returns (trajectory, ops, sources).  dt must divide the horizon.
    """
    T = problem.params.T
    nsteps = int(round(T / dt))
    if nsteps < 1 or abs(nsteps * dt - T) > 1e-9 * T:
        raise ValueError(f"dt={dt} does not divide the horizon T={T}")
    macro, micro = build_spaces(problem, n_macro, n_micro)
    ops = assemble_system(macro, micro, problem.params)
    sources = ManufacturedSources(problem, macro, micro)
    state0 = initial_coupled_state(problem, ops, sources)
    traj = integrate(state0, ops, problem.reaction, dt, nsteps,
                     sources=sources, mode=mode, scheme=scheme)
    return traj, ops, sources


# -- error norms ----------------------------------------------------------------


@dataclass
class ErrorReport:
    """Trajectory error norms against the exact pair.

    Pressure norms take the max over time steps; concentration norms are
    L2 in time by the trapezoid rule.  e_rho is the plain two-scale L2
    component, e_rho_h1y adds the y-derivative seminorm, reported
    separately because its order is one lower.
    """

    e_pi_L2: float
    e_pi_H1: float
    e_rho: float
    e_rho_h1y: float


class _TensorEval:
    def __init__(self, ops, degree):
        mm, ym = ops.macro.mesh, ops.micro.mesh
        bx, wx = quadrature.simplex_rule(mm.dim, degree)
        by, wy = quadrature.simplex_rule(ym.dim, degree)
        self.X = quadrature.cell_points(mm.vertices, mm.cells,
                                        bx).reshape(-1, mm.dim)
        self.Y = quadrature.cell_points(ym.vertices, ym.cells,
                                        by).reshape(-1, ym.dim)
        self.WX = (mm.cell_measures[:, None] * wx[None, :]).ravel()
        self.WY = (ym.cell_measures[:, None] * wy[None, :]).ravel()
        self.BX = basis_matrix(ops.macro, bx)
        self.BY = basis_matrix(ops.micro, by)
        self.DY = [gradient_matrix(ops.micro, len(wy), b)
                   for b in range(ym.dim)]
        gx = [gradient_matrix(ops.macro, len(wx), a) for a in range(mm.dim)]
        self.DX = gx

    def rho_err_sq(self, problem, state):
        left = self.BX @ state.beta
        diff = left @ self.BY.T - problem.rho(state.t, self.X, self.Y)
        l2 = float(self.WX @ diff ** 2 @ self.WY)
        exact_dy = problem.dy_rho(state.t, self.X, self.Y)
        h1 = 0.0
        for b, DYb in enumerate(self.DY):
            d = left @ DYb.T - exact_dy[:, :, b]
            h1 += float(self.WX @ d ** 2 @ self.WY)
        return l2, h1

    def pi_err(self, problem, state):
        diff = self.BX @ state.alpha - problem.pi(state.t, self.X)
        l2_sq = float(self.WX @ diff ** 2)
        g_ex = problem.grad_pi(state.t, self.X)
        semi_sq = 0.0
        for a, DXa in enumerate(self.DX):
            d = DXa @ state.alpha - g_ex[:, a]
            semi_sq += float(self.WX @ d ** 2)
        return np.sqrt(l2_sq), np.sqrt(l2_sq + semi_sq)


def error_norms(trajectory, problem, ops, degree=4):
    """Trajectory error report by tensor quadrature of the stated degree."""
    ev = _TensorEval(ops, degree)
    pi_l2, pi_h1, rho_l2, rho_h1 = [], [], [], []
    for st in trajectory:
        l2, h1 = ev.pi_err(problem, st)
        pi_l2.append(l2)
        pi_h1.append(h1)
        r2, rh = ev.rho_err_sq(problem, st)
        rho_l2.append(r2)
        rho_h1.append(r2 + rh)
    times = [st.t for st in trajectory]
    return ErrorReport(
        e_pi_L2=float(np.max(pi_l2)),
        e_pi_H1=float(np.max(pi_h1)),
        e_rho=float(np.sqrt(np.trapezoid(rho_l2, times))),
        e_rho_h1y=float(np.sqrt(np.trapezoid(rho_h1, times))),
    )


# -- projections -----------------------------------------------------------------


def two_scale_project(macro, micro, rho, dx_rho, dy_rho, dxdy_rho, degree=4):
    """Tensor Ritz projection, full H1 inner product on each scale.

    The concentration carries no essential boundary condition in x, so
    both factors use stiffness plus mass; the composition then reduces
    to one factorized solve per scale of a mixed-derivative load.
    """
    Ax = (fem.assemble_stiffness(macro) + fem.assemble_mass(macro)).tocsc()
    Ay = (fem.assemble_stiffness(micro) + fem.assemble_mass(micro)).tocsc()
    mm, ym = macro.mesh, micro.mesh
    bx, wx = quadrature.simplex_rule(mm.dim, degree)
    by, wy = quadrature.simplex_rule(ym.dim, degree)
    X = quadrature.cell_points(mm.vertices, mm.cells, bx).reshape(-1, mm.dim)
    Y = quadrature.cell_points(ym.vertices, ym.cells, by).reshape(-1, ym.dim)
    WX = (mm.cell_measures[:, None] * wx[None, :]).ravel()
    WY = (ym.cell_measures[:, None] * wy[None, :]).ravel()
    BX, BY = basis_matrix(macro, bx), basis_matrix(micro, by)
    DX = [gradient_matrix(macro, len(wx), a) for a in range(mm.dim)]
    DY = [gradient_matrix(micro, len(wy), b) for b in range(ym.dim)]

    def weighted(S):
        return WX[:, None] * S * WY[None, :]

    F = BX.T @ weighted(rho(X, Y)) @ BY
    gx = dx_rho(X, Y)
    for a in range(mm.dim):
        F += DX[a].T @ weighted(gx[:, :, a]) @ BY
    gy = dy_rho(X, Y)
    for b in range(ym.dim):
        F += BX.T @ weighted(gy[:, :, b]) @ DY[b]
    gxy = dxdy_rho(X, Y)
    for a in range(mm.dim):
        for b in range(ym.dim):
            F += DX[a].T @ weighted(gxy[:, :, a, b]) @ DY[b]
    B = spla.splu(Ax).solve(F)
    return spla.splu(Ay).solve(B.T).T


# -- studies ----------------------------------------------------------------------


@dataclass
class StudyRow:
    level: int
    n_macro: int
    n_micro: int
    H: float
    h: float
    dt: float
    e_pi_L2: float
    e_pi_H1: float
    e_rho: float
    e_rho_h1y: float
    eta_R: float
    effectivity: float


@dataclass
class StudyResult:
    rows: list

    def rates(self, attr):
        vals = [getattr(r, attr) for r in self.rows]
        Hs = [r.H for r in self.rows]
        out = [float("nan")]
        for k in range(1, len(vals)):
            out.append(float(np.log(vals[k - 1] / vals[k])
                             / np.log(Hs[k - 1] / Hs[k])))
        return out

    def write_csv(self, path):
        r_l2 = self.rates("e_pi_L2")
        r_h1 = self.rates("e_pi_H1")
        r_rho = self.rates("e_rho")
        lines = ["level,H,h,dt,e_pi_L2,e_pi_H1,e_rho,"
                 "rate_pi_L2,rate_pi_H1,rate_rho,eta_R,effectivity"]
        for k, r in enumerate(self.rows):
            lines.append(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                "%.17g,%.17g" % (
                    r.level, r.H, r.h, r.dt, r.e_pi_L2, r.e_pi_H1, r.e_rho,
                    r_l2[k], r_h1[k], r_rho[k], r.eta_R, r.effectivity,
                ))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def convergence_study(problem, ns, micro_ns=None, base_steps=4,
                      mode="iterated", scheme="crank_nicolson"):
    """Simultaneous H, h refinement with dt shrinking like H^2."""
    if len(ns) < 3:
        raise ValueError("need at least 3 levels")
    micro_ns = list(ns) if micro_ns is None else list(micro_ns)
    T = problem.params.T
    rows = []
    for lvl, (n, m) in enumerate(zip(ns, micro_ns)):
        nsteps = base_steps * (n // ns[0]) ** 2
        dt = T / nsteps
        traj, ops, sources = run_problem(problem, n, m, dt, mode=mode,
                                         scheme=scheme)
        rep = error_norms(traj, problem, ops)
        final = traj[-1]
        est = estimate(final, ops, problem.reaction, eta_bar=1.0,
                       source=lambda X: problem.macro_source(final.t, X))
        ev = _TensorEval(ops, 4)
        _, h1_final = ev.pi_err(problem, final)
        eff = est.eta_global / h1_final if h1_final > 0 else 1.0
        rows.append(StudyRow(
            level=lvl, n_macro=n, n_micro=m,
            H=float(ops.macro.mesh.cell_diameters.max()),
            h=float(ops.micro.mesh.cell_diameters.max()),
            dt=dt, e_pi_L2=rep.e_pi_L2, e_pi_H1=rep.e_pi_H1,
            e_rho=rep.e_rho, e_rho_h1y=rep.e_rho_h1y,
            eta_R=est.eta_global, effectivity=float(eff),
        ))
    return StudyResult(rows)


@dataclass
class RitzRow:
    level: int
    H: float
    h: float
    e_l2: float
    e_h1: float
    e_two_scale: float


def ritz_rate_study(problem, ns, micro_ns=None, degree=4):
    """Projection-only rates at t = 0: macro Ritz and two-scale Ritz."""
    micro_ns = list(ns) if micro_ns is None else list(micro_ns)
    u = lambda X: problem.pi(0.0, X)
    du = lambda X: problem.grad_pi(0.0, X)
    rows = []
    for lvl, (n, m) in enumerate(zip(ns, micro_ns)):
        macro, micro = build_spaces(problem, n, m)
        coeffs = fem.ritz_project(macro, u, du, degree=degree)
        l2, semi = fem.field_error(macro, coeffs, u, du, degree=degree)
        B = two_scale_project(
            macro, micro,
            lambda X, Y: problem.rho(0.0, X, Y),
            lambda X, Y: problem.dx_rho(0.0, X, Y),
            lambda X, Y: problem.dy_rho(0.0, X, Y),
            lambda X, Y: problem.dxdy_rho(0.0, X, Y),
            degree=degree,
        )
        ops_like = _ProjOps(macro, micro)
        ev = _TensorEval(ops_like, degree)
        diff = (ev.BX @ B) @ ev.BY.T - problem.rho(0.0, ev.X, ev.Y)
        e2 = float(np.sqrt(ev.WX @ diff ** 2 @ ev.WY))
        rows.append(RitzRow(
            level=lvl, H=float(macro.mesh.cell_diameters.max()),
            h=float(micro.mesh.cell_diameters.max()),
            e_l2=l2, e_h1=float(np.hypot(l2, semi)), e_two_scale=e2,
        ))
    return rows


class _ProjOps:
    """Just enough of the operator bundle for _TensorEval."""

    def __init__(self, macro, micro):
        self.macro = macro
        self.micro = micro


def slope(values, hs):
    """Least-squares log-log slope of values against mesh sizes."""
    return float(np.polyfit(np.log(hs), np.log(values), 1)[0])


@dataclass
class EffectivityRow:
    level: int
    H: float
    eta_R: float
    e_pi_H1: float
    index: float


def effectivity_study(problem, ns, micro_ns=None):
    """Estimator-to-error indices of stationary solves over uniform levels."""
    if len(ns) < 4:
        raise ValueError("need at least 4 levels")
    micro_ns = list(ns) if micro_ns is None else list(micro_ns)
    rows = []
    for lvl, (n, m) in enumerate(zip(ns, micro_ns)):
        macro, micro = build_spaces(problem, n, m)
        ops = assemble_system(macro, micro, problem.params)
        sources = ManufacturedSources(problem, macro, micro)
        state = initial_coupled_state(problem, ops, sources)
        ev = _TensorEval(ops, 4)
        _, e_h1 = ev.pi_err(problem, state)
        rep = estimate(state, ops, problem.reaction, eta_bar=1.0,
                       source=lambda X: problem.macro_source(0.0, X))
        if e_h1 > 0:
            index = rep.eta_global / e_h1
        else:
            index = 1.0
        rows.append(EffectivityRow(level=lvl,
                                   H=float(macro.mesh.cell_diameters.max()),
                                   eta_R=rep.eta_global, e_pi_H1=float(e_h1),
                                   index=float(index)))
    return rows


def write_effectivity_csv(rows, path):
    lines = ["level,H,eta_R,e_pi_H1,effectivity"]
    for r in rows:
        lines.append("%d,%.17g,%.17g,%.17g,%.17g"
                     % (r.level, r.H, r.eta_R, r.e_pi_H1, r.index))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- residual functional vs. fine reference ---------------------------------------


def error_representation_check(problem, n_macro, n_micro, n_phi=10, seed=0):
    """Gap between the residual functional and the energy pairing with a
    two-level-finer reference error, for seeded smooth test functions.

    Each test function is a random low-frequency sine sum interpolated
    on the fine mesh, so the pairing carries the natural scale of the
    quantities involved; the gap is taken relative to the pairing, with
    a tenth of its Cauchy-Schwarz bound as a floor against an
    accidentally near-orthogonal draw.
    """
    macro, micro = build_spaces(problem, n_macro, n_micro)
    ops = assemble_system(macro, micro, problem.params)
    sources = ManufacturedSources(problem, macro, micro, degree=2)
    state = initial_coupled_state(problem, ops, sources)

    mid_mesh = macro.mesh.refine(range(macro.mesh.n_cells))
    fine_mesh = mid_mesh.refine(range(mid_mesh.n_cells))
    fine = make_space(fine_mesh)
    ops_f = assemble_system(fine, micro, problem.params)
    sources_f = ManufacturedSources(problem, fine, micro, degree=2)
    state_f = initial_coupled_state(problem, ops_f, sources_f)

    e = state_f.alpha - fem.prolong(fine_mesh, fem.prolong(mid_mesh,
                                                           state.alpha))
    S_A = fem.assemble_stiffness(fine, problem.params.A)
    src0 = lambda X: problem.macro_source(0.0, X)
    e_energy = np.sqrt(e @ (S_A @ e))
    (ax, bx), (ay, by) = problem.x_bounds
    sx = (fine_mesh.vertices[:, 0] - ax) / (bx - ax)
    sy = (fine_mesh.vertices[:, 1] - ay) / (by - ay)
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n_phi):
        phi = np.zeros(fine.n_dofs)
        for k in range(1, 4):
            for l in range(1, 4):
                phi += (rng.standard_normal()
                        * np.sin(k * np.pi * sx) * np.sin(l * np.pi * sy))
        phi[fine.dirichlet_mask] = 0.0
        lhs = estimator.residual_pairing(state, ops, problem.reaction,
                                         fine, phi, source=src0)
        rhs = float(phi @ (S_A @ e))
        floor = 0.1 * e_energy * np.sqrt(phi @ (S_A @ phi))
        gaps.append(abs(lhs - rhs) / max(abs(rhs), floor, 1e-300))
    return gaps


# -- oracle self-checks -------------------------------------------------------------


def _hat_1d(knots, i, x):
    e = np.zeros(len(knots))
    e[i] = 1.0
    return np.interp(x, knots, e)


def kronecker_defect():
    """Max entry gap between the tensor coupling matrix and a brute-force
    4-index assembly with independent 1D quadrature.  Should be ~1e-16."""
    params = ModelParams(A=2.0, D=0.7, kappa=1.3, R=0.9, p_F=0.4)
    macro = make_space(build_uniform([(0.0, 1.0)], 2))
    micro = make_space(build_uniform([(0.0, 1.0)], 2, marker=robin_left),
                       dirichlet_marks=())
    ops = assemble_system(macro, micro, params)
    kx = np.linspace(0.0, 1.0, 3)
    gx, gw = np.polynomial.legendre.leggauss(3)
    px, pw, piv = [], [], []
    for j in range(2):
        a, b = kx[j], kx[j + 1]
        px.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        pw.append(0.5 * (b - a) * gw)
        piv.append(np.full(3, j))
    px, pw, piv = map(np.concatenate, (px, pw, piv))
    n = 3
    Q = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            mass_x = np.sum(pw * _hat_1d(kx, i, px) * _hat_1d(kx, j, px))
            for k in range(n):
                sk = np.diff(np.eye(n)[k]) / np.diff(kx)
                for l in range(n):
                    sl = np.diff(np.eye(n)[l]) / np.diff(kx)
                    stiff = np.sum(pw * sk[piv] * sl[piv])
                    robin = _hat_1d(kx, k, 0.0) * _hat_1d(kx, l, 0.0)
                    Q[i * n + k, j * n + l] = mass_x * (
                        params.D * stiff + params.kappa * params.R * robin)
    return float(np.abs(coupling_matrix(ops).toarray() - Q).max())


def _oracle_ops(n_micro=6, kappa=1.0):
    params = ModelParams(kappa=kappa)
    macro = make_space(build_uniform([(0, 1), (0, 1)], 2))
    micro = make_space(build_uniform([(0, 1)], n_micro, marker=robin_left),
                       dirichlet_marks=())
    return assemble_system(macro, micro, params)


def conservation_drift(nsteps=40, dt=0.05):
    """Max relative drift of the total cell mass with the exchange off."""
    ops = _oracle_ops(kappa=0.0)
    rng = np.random.default_rng(0)
    beta = rng.uniform(0.5, 2.0, (ops.n_macro, ops.n_micro))
    st = CoupledState(0.0, np.zeros(ops.n_macro), beta)
    mass0 = beta @ ops.mY
    worst = 0.0
    ws = StepWorkspace(ops)
    rz = zero_reaction()
    for _ in range(nsteps):
        st = step(st, dt, ops, rz, mode="segregated", workspace=ws)
        drift = np.abs(st.beta @ ops.mY - mass0).max()
        worst = max(worst, drift / np.abs(mass0).max())
    return float(worst)


def steady_state_gap(t_end=60.0, dt=0.5):
    """Distance of the long-time cell state from (alpha + p_F)/R."""
    ops = _oracle_ops()
    st = CoupledState(0.0, np.zeros(ops.n_macro),
                      np.zeros((ops.n_macro, ops.n_micro)))
    ws = StepWorkspace(ops)
    rz = zero_reaction()
    for _ in range(int(round(t_end / dt))):
        st = step(st, dt, ops, rz, workspace=ws)
    target = (0.0 + ops.params.p_F) / ops.params.R
    return float(np.abs(st.beta - target).max())


def scheme_slopes(n_micro=4, T=0.4, halvings=4, base_steps=16):
    """Observed dt-orders of both schemes against the exact propagator.

    The ladder starts with every discrete mode resolved (dt below the
    stiffest eigenvalue's scale), so the asymptotic orders show even for
    rough random data; a stiff start would mask the second-order scheme
    behind slowly damped high modes.
    """
    params = ModelParams(D=0.1)
    macro = make_space(build_uniform([(0, 1), (0, 1)], 2))
    micro = make_space(build_uniform([(0, 1)], n_micro, marker=robin_left),
                       dirichlet_marks=())
    ops = assemble_system(macro, micro, params)
    rng = np.random.default_rng(1)
    beta0 = rng.uniform(0.0, 1.0, (ops.n_macro, ops.n_micro))
    alpha = np.zeros(ops.n_macro)
    exact = np.array([micro_row_exact(row, 0.0, T, ops) for row in beta0])
    out = {}
    rz = zero_reaction()
    for scheme in ("implicit_euler", "crank_nicolson"):
        errs, dts = [], []
        for k in range(halvings + 1):
            nsteps = base_steps * 2 ** k
            dt = T / nsteps
            st = CoupledState(0.0, alpha, beta0)
            ws = StepWorkspace(ops)
            for _ in range(nsteps):
                st = step(st, dt, ops, rz, mode="segregated",
                          scheme=scheme, workspace=ws)
            errs.append(np.abs(st.beta - exact).max())
            dts.append(dt)
        out[scheme] = slope(errs, dts)
    return out


def oracle_suite():
    """Named self-checks with pass thresholds, for the CLI and smoke tests."""
    checks = []
    checks.append(("kronecker", kronecker_defect(), 1e-12))
    checks.append(("conservation", conservation_drift(), 1e-13))
    checks.append(("steady_state", steady_state_gap(), 1e-8))
    slopes = scheme_slopes()
    checks.append(("euler_order",
                   abs(slopes["implicit_euler"] - 1.0), 0.15))
    checks.append(("crank_nicolson_order",
                   abs(slopes["crank_nicolson"] - 2.0), 0.2))
    return [(name, value, tol, value <= tol) for name, value, tol in checks]
