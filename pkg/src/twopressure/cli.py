"""Configuration-driven command line front end.

One JSON config file with flat per-concern sections drives every
scenario; missing sections fall back to documented defaults and unknown
keys are rejected outright.  Each run writes its artifacts plus a
manifest.json (config echo, versions, wall time) into the output
directory, and failures leave a machine-readable error.json behind.

Exit codes: 0 success, 2 config or assumption violation, 3 solver or
oracle failure, 4 adaptive loop that did not halt, 1 anything else.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, harness
from ._accel import backend
from .estimator import adapt_loop, write_adapt_csv
from .fem import SolverError
from .harness import (
    build_spaces, convergence_study, default_problem, effectivity_study,
    error_norms, oracle_suite, run_problem, stationary_solver,
    write_effectivity_csv,
)
from .mesh import build_uniform
from .system import (
    AssumptionError, MODES, SCHEMES, ModelParams, assemble_system,
    save_state, validate_problem, zero_reaction,
)

EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ADAPT = 4

DEFAULTS = {
    "model": {"A": 2.0, "D": 1.0, "kappa": 1.0, "R": 1.0, "p_F": 1.0,
              "theta": 4.0, "T": 1.0},
    "reaction": {"kind": "default", "c_f": 0.5, "reduction": "y_mean"},
    "mesh": {"n_macro": 8, "n_micro": 8},
    "time": {"dt": 0.125, "scheme": "crank_nicolson", "mode": "iterated"},
    "study": {"levels": [4, 8, 16, 32], "base_steps": 4},
    "adapt": {"eta_bar": 2.0, "max_rounds": 12, "n_initial": 4,
              "n_micro": 2},
}


class ConfigError(ValueError):
    """Malformed or contradictory run configuration."""


class AdaptNotHalted(RuntimeError):
    def __init__(self, message, outputs):
        super().__init__(message)
        self.outputs = outputs


def load_config(path):
    """Merge a JSON config file over the defaults, rejecting unknown keys."""
    merged = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is None:
        return merged
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for sec, vals in raw.items():
        if sec not in merged:
            raise ConfigError(f"unknown config section {sec!r}")
        if not isinstance(vals, dict):
            raise ConfigError(f"config section {sec!r} must be an object")
        for key, val in vals.items():
            if key not in merged[sec]:
                raise ConfigError(f"unknown config key {sec}.{key}")
            merged[sec][key] = val
    return merged


def build_problem(cfg, seed):
    """Manufactured problem from the config, validated before any run."""
    model = cfg["model"]
    try:
        params = ModelParams(**{k: float(v) for k, v in model.items()})
    except (TypeError, ValueError):
        raise ConfigError("model parameters must be numbers")
    rsec = cfg["reaction"]
    if rsec["kind"] not in ("default", "zero"):
        raise ConfigError(f"unknown reaction kind {rsec['kind']!r}")
    problem = default_problem(params=params, reduction=rsec["reduction"],
                              c_f=float(rsec["c_f"]))
    if rsec["kind"] == "zero":
        problem.reaction = zero_reaction(reduction=rsec["reduction"])
    problem.reaction.validate(params.theta,
                              rng=np.random.default_rng(seed))
    macro, micro = build_spaces(problem, 2, 2)
    validate_problem(assemble_system(macro, micro, params),
                     problem.reaction)
    return problem


def _check_time(tsec):
    if tsec["scheme"] not in SCHEMES:
        raise ConfigError(f"unknown scheme {tsec['scheme']!r}; "
                          f"expected one of {SCHEMES}")
    if tsec["mode"] not in MODES:
        raise ConfigError(f"unknown mode {tsec['mode']!r}; "
                          f"expected one of {MODES}")


def cmd_simulate(cfg, out, seed):
    problem = build_problem(cfg, seed)
    msec, tsec = cfg["mesh"], cfg["time"]
    _check_time(tsec)
    traj, ops, _ = run_problem(problem, int(msec["n_macro"]),
                               int(msec["n_micro"]), float(tsec["dt"]),
                               mode=tsec["mode"], scheme=tsec["scheme"])
    rep = error_norms(traj, problem, ops)
    save_state(traj[-1], out / "state.txt")
    ops.macro.mesh.save(out / "macro_mesh.txt")
    ops.micro.mesh.save(out / "micro_mesh.txt")
    summary = {
        "t_end": traj[-1].t, "n_steps": len(traj) - 1,
        "e_pi_L2": rep.e_pi_L2, "e_pi_H1": rep.e_pi_H1,
        "e_rho": rep.e_rho, "e_rho_h1y": rep.e_rho_h1y,
    }
    _write_json(out / "summary.json", summary)
    print("simulate: %d steps to t=%g, e_pi_L2=%.3e, e_rho=%.3e"
          % (summary["n_steps"], summary["t_end"], rep.e_pi_L2, rep.e_rho))
    return ["state.txt", "macro_mesh.txt", "micro_mesh.txt", "summary.json"]


def cmd_converge(cfg, out, seed):
    problem = build_problem(cfg, seed)
    ssec, tsec = cfg["study"], cfg["time"]
    _check_time(tsec)
    levels = [int(n) for n in ssec["levels"]]
    res = convergence_study(problem, levels,
                            base_steps=int(ssec["base_steps"]),
                            mode=tsec["mode"], scheme=tsec["scheme"])
    res.write_csv(out / "rates.csv")
    r_l2, r_rho = res.rates("e_pi_L2"), res.rates("e_rho")
    for k, row in enumerate(res.rows):
        print("level %d: n=%d e_pi_L2=%.3e (rate %.2f) e_rho=%.3e (rate %.2f)"
              % (row.level, row.n_macro, row.e_pi_L2, r_l2[k],
                 row.e_rho, r_rho[k]))
    return ["rates.csv"]


def cmd_adapt(cfg, out, seed):
    asec = cfg["adapt"]
    model = cfg["model"]
    try:
        params = ModelParams(**{k: float(v) for k, v in model.items()})
    except (TypeError, ValueError):
        raise ConfigError("model parameters must be numbers")
    eta_bar = float(asec["eta_bar"])
    if not eta_bar > 0:
        raise ConfigError("adapt.eta_bar must be positive")
    solve = stationary_solver(micro_n=int(asec["n_micro"]), params=params)
    mesh0 = build_uniform([(0, 1), (0, 1)], int(asec["n_initial"]))
    result = adapt_loop(solve, mesh0, eta_bar,
                        max_rounds=int(asec["max_rounds"]))
    write_adapt_csv(result, out / "adapt.csv")
    result.final.mesh.save(out / "final_mesh.txt")
    for k, r in enumerate(result.rounds):
        print("round %d: %d cells, eta_R=%.4e, %d marked"
              % (k, r.mesh.n_cells, r.report.eta_global,
                 len(r.report.marked)))
    outputs = ["adapt.csv", "final_mesh.txt"]
    if not result.converged:
        raise AdaptNotHalted(
            "eta_R=%.4e still above eta_bar=%.4e after %d rounds"
            % (result.final.report.eta_global, eta_bar, len(result.rounds)),
            outputs)
    print("halted: eta_R=%.4e < eta_bar=%.4e"
          % (result.final.report.eta_global, eta_bar))
    return outputs


def cmd_effectivity(cfg, out, seed):
    problem = build_problem(cfg, seed)
    levels = [int(n) for n in cfg["study"]["levels"]]
    rows = effectivity_study(problem, levels)
    write_effectivity_csv(rows, out / "effectivity.csv")
    idx = [r.index for r in rows]
    for r in rows:
        print("level %d: eta_R=%.4e e_pi_H1=%.4e index=%.3f"
              % (r.level, r.eta_R, r.e_pi_H1, r.index))
    print("index spread max/min = %.3f" % (max(idx) / min(idx)))
    return ["effectivity.csv"]


def cmd_oracle_check(cfg, out, seed):
    checks = oracle_suite()
    record = []
    for name, value, tol, ok in checks:
        print("%-22s %.3e <= %.0e  %s"
              % (name, value, tol, "pass" if ok else "FAIL"))
        record.append({"check": name, "value": value, "tolerance": tol,
                       "passed": bool(ok)})
    _write_json(out / "oracle.json", record)
    bad = [r["check"] for r in record if not r["passed"]]
    if bad:
        raise SolverError("oracle checks failed: " + ", ".join(bad))
    return ["oracle.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "adapt": cmd_adapt,
    "effectivity": cmd_effectivity,
    "oracle-check": cmd_oracle_check,
}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out, command, cfg, seed, wall, outputs):
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "seed": seed,
        "outputs": outputs,
        "versions": {
            "twopressure": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "kernel_backend": backend(),
        },
        "wall_time_s": wall,
    })


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="twopressure",
        description="Two-scale pressure solver: simulations, convergence "
                    "and effectivity studies, adaptive refinement, and "
                    "numerical self-checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults used when omitted)")
        p.add_argument("--out", default=".",
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for randomized validation checks")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cfg = None
    outputs = []
    error = None
    code = 0
    try:
        cfg = load_config(args.config)
        outputs = COMMANDS[args.command](cfg, out, args.seed)
    except AssumptionError as exc:
        code = EXIT_CONFIG
        error = {"kind": "config", "assumption": exc.assumption,
                 "message": str(exc)}
    except ConfigError as exc:
        code = EXIT_CONFIG
        error = {"kind": "config", "message": str(exc)}
    except ValueError as exc:
        code = EXIT_CONFIG
        error = {"kind": "config", "message": str(exc)}
    except SolverError as exc:
        code = EXIT_SOLVER
        error = {"kind": "solver", "message": str(exc)}
    except AdaptNotHalted as exc:
        code = EXIT_ADAPT
        outputs = exc.outputs
        error = {"kind": "adapt_non_halting", "message": str(exc)}
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 1
        code = EXIT_GENERIC
        error = {"kind": "generic", "type": type(exc).__name__,
                 "message": str(exc)}
    if error is not None:
        _write_json(out / "error.json", error)
        print("error: %s" % error["message"], file=sys.stderr)
    _manifest(out, args.command, cfg, args.seed,
              time.perf_counter() - t0, sorted(outputs))
    return code


if __name__ == "__main__":
    sys.exit(main())
