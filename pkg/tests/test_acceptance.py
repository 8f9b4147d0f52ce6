"""End-to-end acceptance gates for the numerical contracts.

Each criterion prints one pass/fail line (visible with -s or on
failure) and asserts its stated tolerance and runtime budget.  These
are deliberately redundant with the per-module suites: they exercise
the shipped configuration, not internals.
"""

import json
import time

import numpy as np
import pytest

from twopressure import cli, fem, harness, system
from twopressure.estimator import adapt_loop
from twopressure.harness import (
    SPIKE_BBOX, build_spaces, conservation_drift, convergence_study,
    default_problem, effectivity_study, error_representation_check,
    kronecker_defect, ritz_rate_study, scheme_slopes, stationary_solver,
    steady_state_gap,
)
from twopressure.mesh import build_uniform
from twopressure.system import assemble_system, elliptic_solve, initial_beta


def _line(num, name, ok, detail):
    print("[%d] %-34s %s  (%s)" % (num, name, "PASS" if ok else "FAIL",
                                   detail))


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    # first touch of the accelerated paths may compile; keep that out of
    # the timed budgets below
    problem = default_problem()
    traj, ops, _ = harness.run_problem(problem, 2, 2, 0.5)
    from twopressure.estimator import estimate
    estimate(traj[-1], ops, problem.reaction, eta_bar=1.0)


def test_1_kronecker_structure():
    t0 = time.perf_counter()
    defect = kronecker_defect()
    elapsed = time.perf_counter() - t0
    ok = defect <= 1e-12 and elapsed < 1.0
    _line(1, "kronecker structure", ok,
          "defect %.2e <= 1e-12, %.2fs < 1s" % (defect, elapsed))
    assert ok


def test_2_matrix_exponential_orders():
    t0 = time.perf_counter()
    slopes = scheme_slopes()
    elapsed = time.perf_counter() - t0
    ie, cn = slopes["implicit_euler"], slopes["crank_nicolson"]
    ok = abs(ie - 1.0) <= 0.15 and abs(cn - 2.0) <= 0.2 and elapsed < 10.0
    _line(2, "matrix exponential orders", ok,
          "euler %.3f in 1.0+-0.15, cn %.3f in 2.0+-0.2, %.1fs < 10s"
          % (ie, cn, elapsed))
    assert ok


def test_3_a_priori_rates():
    t0 = time.perf_counter()
    problem = default_problem()
    res = convergence_study(problem, [4, 8, 16, 32])
    elapsed = time.perf_counter() - t0
    Hs = [r.H for r in res.rows]
    s_l2 = harness.slope([r.e_pi_L2 for r in res.rows], Hs)
    s_rho = harness.slope([r.e_rho for r in res.rows], Hs)
    s_h1 = harness.slope([r.e_pi_H1 for r in res.rows], Hs)
    finest = res.rows[-1]
    sizes_ok = (finest.n_macro ** 2 * 2 <= 4096
                and finest.n_micro + 1 <= 256)
    ok = 1.8 <= s_l2 <= 2.2 and 1.8 <= s_rho <= 2.2 and sizes_ok
    h1_ok = 0.8 <= s_h1 <= 1.2
    _line(3, "a priori rates", ok and h1_ok,
          "pi L2 slope %.3f, rho L2L2 slope %.3f in [1.8,2.2]; "
          "pi H1 slope %.3f in [0.8,1.2] (order-2 H1 claim not gated); "
          "%.0fs" % (s_l2, s_rho, s_h1, elapsed))
    assert ok
    assert h1_ok


def test_4_projection_rates():
    t0 = time.perf_counter()
    problem = default_problem()
    rows = ritz_rate_study(problem, [4, 8, 16, 32])
    elapsed = time.perf_counter() - t0
    Hs = [r.H for r in rows]
    s_l2 = harness.slope([r.e_l2 for r in rows], Hs)
    s_h1 = harness.slope([r.e_h1 for r in rows], Hs)
    s_ts = harness.slope([r.e_two_scale for r in rows], Hs)
    ok = (abs(s_l2 - 2.0) <= 0.2 and abs(s_h1 - 1.0) <= 0.2
          and abs(s_ts - 2.0) <= 0.2 and elapsed < 30.0)
    _line(4, "projection rates", ok,
          "L2 %.3f~2, H1 %.3f~1, two-scale %.3f~2, %.1fs < 30s"
          % (s_l2, s_h1, s_ts, elapsed))
    assert ok


def test_5_error_representation():
    t0 = time.perf_counter()
    gaps = error_representation_check(default_problem(), 8, 8,
                                      n_phi=10, seed=0)
    elapsed = time.perf_counter() - t0
    ok = len(gaps) == 10 and max(gaps) <= 5e-2 and elapsed < 60.0
    _line(5, "error representation", ok,
          "max gap %.2e <= 5e-2 over 10 seeded phi, %.1fs < 60s"
          % (max(gaps), elapsed))
    assert ok


def test_6_effectivity():
    rows = effectivity_study(default_problem(), [4, 8, 16, 32])
    idx = [r.index for r in rows]
    ratio = max(idx) / min(idx)
    positive = all(r.index > 0 for r in rows if r.e_pi_H1 > 0)
    ok = ratio < 3.0 and positive
    _line(6, "estimator effectivity", ok,
          "max/min %.3f < 3 over %d levels, all positive" % (ratio, len(idx)))
    assert ok


def test_7_adaptive_loop():
    solve = stationary_solver()
    mesh0 = build_uniform([(0, 1), (0, 1)], 4)
    result = adapt_loop(solve, mesh0, eta_bar=0.4, max_rounds=12)
    etas = result.eta_trace
    decreasing = all(a > b for a, b in zip(etas, etas[1:]))
    x0, x1, y0, y1 = SPIKE_BBOX
    n_in = n_marked = 0
    for r in result.rounds:
        cen = r.mesh.vertices[r.mesh.cells].mean(axis=1)[r.report.marked]
        n_marked += len(cen)
        n_in += int(((cen[:, 0] >= x0) & (cen[:, 0] <= x1)
                     & (cen[:, 1] >= y0) & (cen[:, 1] <= y1)).sum())
    frac = n_in / n_marked
    ok = (result.converged and len(result.rounds) <= 12 and decreasing
          and etas[-1] < 0.4 and frac >= 0.6)
    _line(7, "adaptive loop", ok,
          "halted in %d rounds, eta %.3f -> %.3f strictly decreasing, "
          "%.0f%% of marked cells in source bbox >= 60%%"
          % (len(result.rounds), etas[0], etas[-1], 100 * frac))
    assert ok


def test_8_structural_invariants():
    t0 = time.perf_counter()
    drift = conservation_drift()
    gap = steady_state_gap()

    problem = default_problem()
    contractions = []
    for n in (4, 8):
        macro, micro = build_spaces(problem, n, n)
        ops = assemble_system(macro, micro, problem.params)
        sources = harness.ManufacturedSources(problem, macro, micro)
        beta = initial_beta(ops, lambda X, Y: problem.rho(0.0, X, Y))
        _, info = elliptic_solve(ops, problem.reaction, beta,
                                 extra_load=sources.macro_load(0.0))
        contractions.append(info.contraction)
        assert info.converged
        assert info.iterations >= 2  # a genuinely coupled solve

    rng = np.random.default_rng(3)
    mesh = build_uniform([(0, 1), (0, 1)], 3)
    measure_ok = conform_ok = True
    for _ in range(3):
        marked = rng.choice(mesh.n_cells, size=max(1, mesh.n_cells // 3),
                            replace=False)
        mesh = mesh.refine(marked)
        measure_ok &= abs(mesh.total_measure - 1.0) <= 1e-12
        # independent conformity oracle: every edge is shared by exactly
        # two cells or lies on the marked boundary
        counts = {}
        for tri in mesh.cells:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                e = tuple(sorted((int(tri[a]), int(tri[b]))))
                counts[e] = counts.get(e, 0) + 1
        bkeys = set(mesh.boundary)
        for e, c in counts.items():
            if c == 2:
                continue
            if c == 1 and e in bkeys:
                continue
            conform_ok = False
    elapsed = time.perf_counter() - t0
    ok = (drift <= 1e-13 and gap <= 1e-8 and max(contractions) < 1.0
          and measure_ok and conform_ok and elapsed < 30.0)
    _line(8, "structural invariants", ok,
          "kappa=0 drift %.1e <= 1e-13, steady gap %.1e <= 1e-8, "
          "contraction %.3f < 1, refinement conforming and "
          "measure-preserving, %.1fs < 30s"
          % (drift, gap, max(contractions), elapsed))
    assert ok


def test_9_deterministic_study(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"study": {"levels": [4, 8, 16],
                                         "base_steps": 4}}))
    outs = []
    for sub in ("a", "b"):
        code = cli.main(["converge", "--config", str(cfg),
                         "--out", str(tmp_path / sub), "--seed", "11"])
        assert code == 0
        outs.append((tmp_path / sub / "rates.csv").read_bytes())
    ok = outs[0] == outs[1]
    _line(9, "deterministic rate tables", ok,
          "%d-byte CSVs byte-identical across reruns" % len(outs[0]))
    assert ok
