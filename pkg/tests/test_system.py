"""Coupled-system tests.

The coupling operators are checked against brute-force quadrature that
never touches the package assembly: 1D hat functions are sampled with
np.interp and integrated with per-interval Gauss rules, 2D mass entries
use the closed-form simplex formula, and the exact micro propagator is
checked against the scalar closed form on a one-dof system.
"""

import numpy as np
import pytest
import scipy.sparse as sp
from types import SimpleNamespace

from twopressure import fem, system
from twopressure.mesh import Mark, build_uniform
from twopressure.system import (
    AssumptionError, CoupledState, ModelParams, assemble_system,
    coupling_matrix, default_reaction, elliptic_solve, initial_beta,
    initial_state, load_state, micro_row_exact, reaction_load,
    reconstruct, reduced_field, save_state, steady_micro_row, step,
    zero_reaction,
)
from twopressure.fem import SolverError, make_space


def robin_left(mid):
    return Mark.ROBIN if mid[0] < 0.5 else Mark.NEUMANN


def make_ops(n_macro=2, n_micro=2, params=None, macro_dim=2):
    if macro_dim == 2:
        macro_mesh = build_uniform([(0, 1), (0, 1)], n_macro)
    else:
        macro_mesh = build_uniform([(0, 1)], n_macro)
    micro_mesh = build_uniform([(0, 1)], n_micro, marker=robin_left)
    macro = make_space(macro_mesh)
    micro = make_space(micro_mesh, dirichlet_marks=())
    return assemble_system(macro, micro, params or ModelParams())


# -- brute-force 1D integration helpers (independent of the package) --------


def hat(knots, i, x):
    e = np.zeros(len(knots))
    e[i] = 1.0
    return np.interp(x, knots, e)


def gauss_points(knots, npts=3):
    gx, gw = np.polynomial.legendre.leggauss(npts)
    pts, wts, iv = [], [], []
    for j, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
        pts.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * gw)
        iv.append(np.full(npts, j))
    return np.concatenate(pts), np.concatenate(wts), np.concatenate(iv)


def hat_slopes(knots, i):
    e = np.zeros(len(knots))
    e[i] = 1.0
    return np.diff(e) / np.diff(knots)


class TestCouplingOracles:
    """Tensor operators vs 4-index brute-force quadrature, tiny meshes."""

    def test_kronecker_coupling_interval_scales(self):
        params = ModelParams(A=2.0, D=0.7, kappa=1.3, R=0.9, p_F=0.4)
        ops = make_ops(n_macro=2, n_micro=2, params=params, macro_dim=1)
        kx = np.linspace(0, 1, 3)
        ky = np.linspace(0, 1, 3)
        px, wx, _ = gauss_points(kx)
        py, wy, ivy = gauss_points(ky)
        nx, ny = 3, 3
        Q_brute = np.zeros((nx * ny, nx * ny))
        for i in range(nx):
            for j in range(nx):
                mass_x = np.sum(wx * hat(kx, i, px) * hat(kx, j, px))
                for k in range(ny):
                    sk = hat_slopes(ky, k)
                    for l in range(ny):
                        sl = hat_slopes(ky, l)
                        stiff_y = np.sum(wy * sk[ivy] * sl[ivy])
                        robin_y = hat(ky, k, 0.0) * hat(ky, l, 0.0)
                        Q_brute[i * ny + k, j * ny + l] = mass_x * (
                            params.D * stiff_y
                            + params.kappa * params.R * robin_y
                        )
        Q = coupling_matrix(ops).toarray()
        assert np.abs(Q - Q_brute).max() < 1e-12

    def test_kronecker_coupling_triangle_macro(self):
        params = ModelParams(D=0.5, kappa=2.0, R=1.5)
        ops = make_ops(n_macro=1, n_micro=1, params=params, macro_dim=2)
        verts = ops.macro.mesh.vertices
        cells = ops.macro.mesh.cells
        nx = 4
        Mx_brute = np.zeros((nx, nx))
        for tri in cells:
            e1 = verts[tri[1]] - verts[tri[0]]
            e2 = verts[tri[2]] - verts[tri[0]]
            area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
            for a in range(3):
                for b in range(3):
                    Mx_brute[tri[a], tri[b]] += area * (1 + (a == b)) / 12.0
        ky = np.linspace(0, 1, 2)
        py, wy, ivy = gauss_points(ky)
        ny = 2
        Ky_brute = np.zeros((ny, ny))
        for k in range(ny):
            for l in range(ny):
                stiff = np.sum(wy * hat_slopes(ky, k)[ivy] * hat_slopes(ky, l)[ivy])
                robin = hat(ky, k, 0.0) * hat(ky, l, 0.0)
                Ky_brute[k, l] = params.D * stiff + params.kappa * params.R * robin
        Q_brute = np.kron(Mx_brute, Ky_brute)
        assert np.abs(coupling_matrix(ops).toarray() - Q_brute).max() < 1e-12

    def test_robin_forcing_tensor(self):
        # c_ik = kappa p_F m_i g_k against brute-force integrals
        params = ModelParams(kappa=1.7, p_F=0.6)
        ops = make_ops(n_macro=2, n_micro=2, params=params, macro_dim=1)
        kx = np.linspace(0, 1, 3)
        px, wx, _ = gauss_points(kx)
        m_brute = np.array([np.sum(wx * hat(kx, i, px)) for i in range(3)])
        g_brute = np.array([hat(np.linspace(0, 1, 3), k, 0.0) for k in range(3)])
        c_brute = params.kappa * params.p_F * np.outer(m_brute, g_brute)
        c_ops = params.kappa * params.p_F * np.outer(ops.m, ops.g)
        assert np.abs(c_ops - c_brute).max() < 1e-13

    def test_pressure_exchange_tensor(self):
        # E_ijk = kappa (Mx)_ij g_k
        params = ModelParams(kappa=0.8)
        ops = make_ops(n_macro=2, n_micro=2, params=params, macro_dim=1)
        kx = np.linspace(0, 1, 3)
        px, wx, _ = gauss_points(kx)
        Mx = ops.Mx.toarray()
        for i in range(3):
            for j in range(3):
                mass = np.sum(wx * hat(kx, i, px) * hat(kx, j, px))
                for k in range(3):
                    gk = hat(np.linspace(0, 1, 3), k, 0.0)
                    assert params.kappa * Mx[i, j] * ops.g[k] == pytest.approx(
                        params.kappa * mass * gk, abs=1e-13
                    )


class TestMicroExact:
    def test_scalar_closed_form(self):
        ops = SimpleNamespace(
            My=sp.csr_matrix(np.array([[2.0]])),
            Ky=sp.csr_matrix(np.array([[3.0]])),
            g=np.array([0.7]),
            params=SimpleNamespace(kappa=1.2, p_F=0.5),
            n_micro=1,
        )
        b0, alpha, t = np.array([0.4]), 0.9, 0.8
        c = 1.2 * (0.9 + 0.5) * 0.7
        q = 3.0 / 2.0
        expected = np.exp(-q * t) * 0.4 + (c / 3.0) * (1 - np.exp(-q * t))
        got = micro_row_exact(b0, alpha, t, ops)
        assert got == pytest.approx(expected, abs=1e-14)

    def test_scalar_singular_generator(self):
        # Ky = 0: pure drift b0 + t * rhs / My
        ops = SimpleNamespace(
            My=sp.csr_matrix(np.array([[2.0]])),
            Ky=sp.csr_matrix(np.array([[0.0]])),
            g=np.array([1.0]),
            params=SimpleNamespace(kappa=1.0, p_F=0.0),
            n_micro=1,
        )
        got = micro_row_exact(np.array([0.3]), 2.0, 0.5, ops)
        assert got == pytest.approx(0.3 + 0.5 * 2.0 * 1.0 / 2.0, abs=1e-14)

    def test_extra_rhs_and_zero_time(self):
        ops = make_ops(n_micro=4)
        b0 = np.linspace(0.0, 1.0, ops.n_micro)
        assert micro_row_exact(b0, 0.5, 0.0, ops) == pytest.approx(b0, abs=1e-13)
        w = np.full(ops.n_micro, 0.2)
        with_src = micro_row_exact(b0, 0.5, 1.0, ops, extra_rhs=w)
        without = micro_row_exact(b0, 0.5, 1.0, ops)
        assert not np.allclose(with_src, without)

    def test_dof_guard(self):
        ops = make_ops(n_micro=2)
        big = SimpleNamespace(n_micro=system.MICRO_EXACT_MAX_DOFS + 1)
        with pytest.raises(ValueError, match="limited"):
            micro_row_exact(np.zeros(1), 0.0, 1.0, big)
        del ops

    def test_steady_state_long_time(self):
        ops = make_ops(n_micro=5)
        b0 = np.zeros(ops.n_micro)
        alpha_i = 0.3
        target = steady_micro_row(ops, alpha_i)
        assert target == pytest.approx(
            np.full(ops.n_micro, (0.3 + 1.0) / 1.0), abs=1e-15
        )
        got = micro_row_exact(b0, alpha_i, 60.0, ops)
        assert np.abs(got - target).max() < 1e-8


class TestStepping:
    def test_implicit_euler_update_identity_with_sources(self):
        # the discrete update must satisfy its defining linear system exactly,
        # including tensor sources fed through the macro mass inverse
        rng = np.random.default_rng(3)
        ops = make_ops(n_macro=2, n_micro=3)
        W = rng.standard_normal((ops.n_macro, ops.n_micro))
        R = ops.Mx @ W
        sources = SimpleNamespace(
            micro_load=lambda t: R, macro_load=lambda t: None
        )
        beta0 = rng.standard_normal((ops.n_macro, ops.n_micro))
        state = CoupledState(0.0, np.zeros(ops.n_macro), beta0)
        dt = 0.17
        new = step(state, dt, ops, zero_reaction(), mode="segregated",
                   sources=sources)
        lhs = (ops.My + dt * ops.Ky) @ new.beta.T
        forcing = ops.params.kappa * ops.params.p_F * np.outer(
            np.ones(ops.n_macro), ops.g
        ) + W
        rhs = ops.My @ beta0.T + dt * forcing.T
        assert np.abs(lhs - rhs).max() < 1e-12
        assert new.t == pytest.approx(dt)

    def test_crank_nicolson_update_identity(self):
        rng = np.random.default_rng(4)
        ops = make_ops(n_macro=2, n_micro=3)
        beta0 = rng.standard_normal((ops.n_macro, ops.n_micro))
        state = CoupledState(0.0, np.zeros(ops.n_macro), beta0)
        dt = 0.1
        new = step(state, dt, ops, zero_reaction(), mode="segregated",
                   scheme="crank_nicolson")
        forcing = ops.params.kappa * ops.params.p_F * np.outer(
            np.ones(ops.n_macro), ops.g
        )
        lhs = (ops.My + 0.5 * dt * ops.Ky) @ new.beta.T
        rhs = (ops.My - 0.5 * dt * ops.Ky) @ beta0.T + dt * forcing.T
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_schemes_approach_exact_flow(self):
        ops = make_ops(n_macro=1, n_micro=4)
        rng = np.random.default_rng(5)
        beta0 = rng.uniform(0.0, 1.0, (ops.n_macro, ops.n_micro))
        T = 0.2
        exact = np.array(
            [micro_row_exact(row, 0.0, T, ops) for row in beta0]
        )

        def run(scheme, nsteps):
            st = CoupledState(0.0, np.zeros(ops.n_macro), beta0)
            dt = T / nsteps
            for _ in range(nsteps):
                st = step(st, dt, ops, zero_reaction(), mode="segregated",
                          scheme=scheme)
            return np.abs(st.beta - exact).max()

        ie_c, ie_f = run("implicit_euler", 8), run("implicit_euler", 16)
        cn_c, cn_f = run("crank_nicolson", 8), run("crank_nicolson", 16)
        assert ie_f < 0.7 * ie_c          # first order: halving helps
        assert cn_f < 0.35 * cn_c         # second order: ~quarter
        assert cn_c < ie_c                # CN beats IE at equal step

    def test_mass_conservation_without_exchange(self):
        # kappa = 0 closes the cell boundary; 1' My b_i is invariant
        params = ModelParams(kappa=1e-30)
        params.kappa = 0.0
        ops = make_ops(n_macro=2, n_micro=6, params=params)
        rng = np.random.default_rng(6)
        beta0 = rng.uniform(0.5, 2.0, (ops.n_macro, ops.n_micro))
        st = CoupledState(0.0, np.zeros(ops.n_macro), beta0)
        mass0 = beta0 @ ops.mY
        for scheme in ("implicit_euler", "crank_nicolson"):
            cur = st
            for _ in range(20):
                cur = step(cur, 0.05, ops, zero_reaction(), mode="segregated",
                           scheme=scheme)
                mass = cur.beta @ ops.mY
                assert np.abs(mass - mass0).max() < 1e-13 * np.abs(mass0).max()

    def test_stepper_reaches_steady_state(self):
        ops = make_ops(n_macro=2, n_micro=4)
        st = CoupledState(0.0, np.zeros(ops.n_macro),
                          np.zeros((ops.n_macro, ops.n_micro)))
        ws = system.StepWorkspace(ops)
        for _ in range(120):
            st = step(st, 0.5, ops, zero_reaction(), workspace=ws)
        expected = steady_micro_row(ops, 0.0)
        assert np.abs(st.beta - expected[None, :]).max() < 1e-8
        assert np.abs(st.alpha).max() < 1e-14

    def test_iterated_step_self_consistent(self):
        # after convergence the pair must satisfy both implicit relations
        ops = make_ops(n_macro=3, n_micro=4)
        reaction = default_reaction()
        rng = np.random.default_rng(7)
        beta0 = rng.uniform(0.5, 1.5, (ops.n_macro, ops.n_micro))
        alpha0, _ = elliptic_solve(ops, reaction, beta0,
                                   extra_load=0.5 * ops.m)
        st = CoupledState(0.0, alpha0, beta0)
        dt = 0.1
        load = 0.5 * ops.m
        sources = SimpleNamespace(micro_load=lambda t: None,
                                  macro_load=lambda t: load)
        new = step(st, dt, ops, reaction, mode="iterated", sources=sources)
        # micro relation at the final pressure
        lhs = (ops.My + dt * ops.Ky) @ new.beta.T
        forcing = ops.params.kappa * (new.alpha + ops.params.p_F)
        rhs = ops.My @ beta0.T + dt * (forcing[None, :] * ops.g[:, None])
        assert np.abs(lhs - rhs).max() < 1e-7
        # macro relation at the final micro state
        F = reaction_load(ops, reaction, new.alpha, new.beta) + load
        F[ops.mask] = 0.0
        res = ops.P @ new.alpha - F
        assert np.linalg.norm(res) < 1e-7 * max(np.linalg.norm(F), 1.0)

    def test_step_argument_validation(self):
        ops = make_ops()
        st = CoupledState(0.0, np.zeros(ops.n_macro),
                          np.zeros((ops.n_macro, ops.n_micro)))
        with pytest.raises(ValueError, match="scheme"):
            step(st, 0.1, ops, zero_reaction(), scheme="leapfrog")
        with pytest.raises(ValueError, match="mode"):
            step(st, 0.1, ops, zero_reaction(), mode="monolithic")
        with pytest.raises(ValueError, match="dt"):
            step(st, -0.1, ops, zero_reaction())


class TestEllipticSolve:
    def test_zero_reaction_zero_load(self):
        ops = make_ops()
        beta = np.ones((ops.n_macro, ops.n_micro))
        alpha, info = elliptic_solve(ops, zero_reaction(), beta)
        assert np.abs(alpha).max() == 0.0
        assert info.converged and info.iterations == 1

    def test_pressure_independent_reaction_solves_in_one_pass(self):
        # f independent of s: the first iterate is already the solution
        ops = make_ops(n_macro=3)
        reaction = system.ReactionTerm(
            f=lambda s, r: 0.3 * np.asarray(r), c_pi=0.0, c_rho=0.3
        )
        rng = np.random.default_rng(8)
        beta = rng.uniform(0.0, 2.0, (ops.n_macro, ops.n_micro))
        alpha, info = elliptic_solve(ops, reaction, beta)
        F = reaction_load(ops, reaction, np.zeros(ops.n_macro), beta)
        F[ops.mask] = 0.0
        direct = system.solve_macro(ops, F)
        assert np.abs(alpha - direct).max() < 1e-12
        assert info.iterations <= 2
        assert info.contraction < 1e-10

    def test_nonlinear_contraction(self):
        ops = make_ops(n_macro=3)
        reaction = default_reaction()
        beta = np.full((ops.n_macro, ops.n_micro), 1.2)
        alpha, info = elliptic_solve(ops, reaction, beta,
                                     extra_load=0.8 * ops.m)
        assert info.converged
        assert info.contraction < 1.0
        F = reaction_load(ops, reaction, alpha, beta) + 0.8 * ops.m
        F[ops.mask] = 0.0
        res = ops.P @ alpha - F
        assert np.linalg.norm(res) <= 1e-9 * np.linalg.norm(F)

    def test_reaction_load_lipschitz_bound(self):
        # |F_i(a1) - F_i(a2)| <= c_pi |a1 - a2|_inf m_i, entrywise
        ops = make_ops(n_macro=3)
        reaction = default_reaction()
        rng = np.random.default_rng(9)
        beta = rng.uniform(0.0, 2.0, (ops.n_macro, ops.n_micro))
        a1 = rng.uniform(0.0, 3.0, ops.n_macro)
        a2 = rng.uniform(0.0, 3.0, ops.n_macro)
        F1 = reaction_load(ops, reaction, a1, beta)
        F2 = reaction_load(ops, reaction, a2, beta)
        bound = reaction.c_pi * np.abs(a1 - a2).max() * ops.m
        assert np.all(np.abs(F1 - F2) <= bound + 1e-12)

    def test_divergent_map_raises(self):
        ops = make_ops(n_macro=2)
        bad = system.ReactionTerm(
            f=lambda s, r: 50.0 * np.asarray(s), c_pi=50.0, c_rho=0.0
        )
        beta = np.ones((ops.n_macro, ops.n_micro))
        with pytest.raises(SolverError):
            elliptic_solve(ops, bad, beta, alpha0=np.full(ops.n_macro, 1.0),
                           extra_load=ops.m, max_iter=30)


class TestReduction:
    def test_mean_and_trace_reductions_on_tensor_state(self):
        ops = make_ops(n_macro=2, n_micro=4)
        xs = ops.macro.mesh.vertices
        ys = ops.micro.mesh.vertices[:, 0]
        a = 1.0 + xs[:, 0]
        c = 1.0 + 0.5 * ys
        beta = np.outer(a, c)
        r_mean = reduced_field(ops, "y_mean", beta)
        assert r_mean == pytest.approx(a * 1.25, abs=1e-13)
        r_trace = reduced_field(ops, "trace_mean", beta)
        assert r_trace == pytest.approx(a * 1.0, abs=1e-13)
        with pytest.raises(ValueError, match="reduction"):
            reduced_field(ops, "x_mean", beta)


class TestInitialData:
    def test_projection_preserves_tensor_bilinear(self):
        ops = make_ops(n_macro=2, n_micro=4)

        def rho_I(X, Y):
            return np.outer(1.0 + X[:, 0], 1.0 + 0.5 * Y[:, 0])

        beta = initial_beta(ops, rho_I)
        xs = ops.macro.mesh.vertices[:, 0]
        ys = ops.micro.mesh.vertices[:, 0]
        expected = np.outer(1.0 + xs, 1.0 + 0.5 * ys)
        assert np.abs(beta - expected).max() < 1e-10

    def test_initial_state_is_stationary_pair(self):
        ops = make_ops(n_macro=2, n_micro=3)
        reaction = default_reaction()
        st = initial_state(ops, reaction, lambda X, Y: np.full(
            (len(X), len(Y)), 1.3))
        assert st.t == 0.0
        F = reaction_load(ops, reaction, st.alpha, st.beta)
        F[ops.mask] = 0.0
        assert np.linalg.norm(ops.P @ st.alpha - F) < 1e-8


class TestReconstruct:
    def test_tensor_state_pointwise(self):
        ops = make_ops(n_macro=2, n_micro=4)
        xs = ops.macro.mesh.vertices
        ys = ops.micro.mesh.vertices[:, 0]
        alpha = 2.0 * xs[:, 0] - xs[:, 1]
        beta = np.outer(1.0 + xs[:, 0], 1.0 + 0.5 * ys)
        st = CoupledState(0.0, alpha, beta)
        rng = np.random.default_rng(10)
        X = rng.uniform(0.05, 0.95, (7, 2))
        Y = rng.uniform(0.05, 0.95, (7, 1))
        pi, rho = reconstruct(st, ops, X, Y)
        assert pi == pytest.approx(2 * X[:, 0] - X[:, 1], abs=1e-13)
        assert rho == pytest.approx(
            (1 + X[:, 0]) * (1 + 0.5 * Y[:, 0]), abs=1e-13)

    def test_outside_points_raise(self):
        ops = make_ops()
        st = CoupledState(0.0, np.zeros(ops.n_macro),
                          np.zeros((ops.n_macro, ops.n_micro)))
        with pytest.raises(ValueError, match="outside"):
            reconstruct(st, ops, np.array([[2.0, 0.5]]), np.array([[0.5]]))
        with pytest.raises(ValueError, match="outside"):
            reconstruct(st, ops, np.array([[0.5, 0.5]]), np.array([[-0.2]]))


class TestCheckpoint:
    def test_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        st = CoupledState(0.3125, rng.standard_normal(5),
                          rng.standard_normal((5, 4)))
        path = tmp_path / "state.txt"
        save_state(st, path)
        back = load_state(path)
        assert back.t == st.t
        assert np.array_equal(back.alpha, st.alpha)
        assert np.array_equal(back.beta, st.beta)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 2 2\n1.0 2.0\n1.0 2.0\n1.0\n")
        with pytest.raises(ValueError):
            load_state(path)


class TestValidation:
    def test_params_positivity(self):
        with pytest.raises(AssumptionError, match="positivity"):
            ModelParams(D=-1.0).validate()
        with pytest.raises(AssumptionError, match="positivity"):
            ModelParams(T=0.0).validate()

    def test_diffusion_dominance(self):
        with pytest.raises(AssumptionError, match="dominance"):
            ModelParams(A=0.4).validate(c_pi=0.5, c_rho=0.1)
        ModelParams(A=2.0).validate(c_pi=0.5, c_rho=0.1)

    def test_reaction_contract(self):
        r = default_reaction()
        r.validate(4.0)
        bad = system.ReactionTerm(f=lambda s, r_: 2.0 * np.asarray(s),
                                  c_pi=2.0, c_rho=0.0)
        with pytest.raises(AssumptionError, match="contraction"):
            bad.validate(4.0)

    def test_reaction_cutoff_checked(self):
        # declared cutoff larger than the actual one trips the sampler
        r = default_reaction(theta=2.0)
        with pytest.raises(AssumptionError, match="cutoff|vanishes|Lipschitz"):
            r.validate(1.0)

    def test_space_requirements(self):
        macro_mesh = build_uniform([(0, 1), (0, 1)], 2)
        micro_mesh = build_uniform([(0, 1)], 2, marker=robin_left)
        free_macro = make_space(macro_mesh, dirichlet_marks=())
        micro = make_space(micro_mesh, dirichlet_marks=())
        with pytest.raises(AssumptionError, match="macro boundary"):
            assemble_system(free_macro, micro, ModelParams())
        clamped_micro = make_space(build_uniform([(0, 1)], 2))
        macro = make_space(macro_mesh)
        with pytest.raises(AssumptionError, match="micro boundary"):
            assemble_system(macro, clamped_micro, ModelParams())

    def test_problem_level_bound(self):
        ops = make_ops()
        bound = system.validate_problem(ops, default_reaction())
        assert 0.0 < bound < 1.0

    def test_default_reaction_lipschitz_constants(self):
        # c_pi: slope at s=0; c_rho: gate slope at the g-maximum s=theta/3
        r = default_reaction(c_f=0.5, theta=4.0)
        s = np.linspace(-1, 5, 5001)
        fd = np.abs(np.diff(r.f(s, 10.0))) / np.diff(s)
        assert fd.max() <= r.c_pi + 1e-3
        rr = np.linspace(-4, 4, 4001)
        fd_r = np.abs(np.diff(r.f(4.0 / 3.0, rr))) / np.diff(rr)
        assert fd_r.max() <= r.c_rho + 1e-4
        assert fd_r.max() > 0.9 * r.c_rho
