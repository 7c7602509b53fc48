"""Command-line interface.

    softmanip run <config.yaml> [--output-dir DIR] [--seed N]
                  [--max-iters N] [--tolerance X]
    softmanip preset <name> [--emit-config] [--output-dir DIR] ...
    softmanip verify <fixture> [--output-dir DIR]

Exit codes: 0 success, 2 config error, 3 solver non-convergence,
4 numerical instability.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .core import signed_curvature
from .dynamics import InstabilityError
from .presets import PRESET_NAMES, preset
from .runner import run as run_experiment
from .statics import NonConvergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_INSTABILITY = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--output-dir", default=None, help="directory for result files")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized diagnostics")
    p.add_argument("--max-iters", type=int, default=None, help="iteration cap override")
    p.add_argument("--tolerance", type=float, default=None, help="tolerance override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softmanip",
                                     description="Planar soft-manipulator optimal control")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config file")
    p_run.add_argument("config", help="YAML config path")
    _add_common(p_run)

    p_pre = sub.add_parser("preset", help="run (or emit) a built-in test preset")
    p_pre.add_argument("name", help=f"one of: {', '.join(PRESET_NAMES)}")
    p_pre.add_argument("--emit-config", action="store_true",
                       help="print the preset config as YAML instead of running it")
    _add_common(p_pre)

    p_ver = sub.add_parser("verify", help="run acceptance-style checks for a fixture")
    p_ver.add_argument("fixture", help=f"one of: {', '.join(PRESET_NAMES)} or 'all'")
    _add_common(p_ver)
    return parser


def _execute(cfg: ExperimentConfig, args) -> int:
    try:
        manifest = run_experiment(cfg, output_dir=args.output_dir, seed=args.seed,
                                  max_iters=args.max_iters, tolerance=args.tolerance)
    except InstabilityError as exc:
        print(f"numerical instability: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(f"run '{cfg.name}' finished in {manifest['runtime']:.2f}s; "
          f"files: {', '.join(manifest['files'])}")
    if not manifest["converged"]:
        print("solver did not reach its tolerances; see manifest.json", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify: quick property checks per fixture
# ---------------------------------------------------------------------------


def _verify_static(name: str, args) -> list:
    from .statics import SolverOptions, StaticProblem, solve_static_reachability

    cfg = preset(name)
    params = cfg.model_params()
    problem = StaticProblem(params, cfg.mask_obj(), cfg.target["point"],
                            drop_curvature_bound=cfg.solver["drop_curvature_bound"])
    control, curve, report = solve_static_reachability(
        problem, SolverOptions(raise_on_failure=False))
    checks = [
        ("converged", report.converged),
        ("link residual <= 1e-8", report.residuals["link"] <= 1e-8),
        ("straightness on I <= 1e-6", report.residuals["straightness"] <= 1e-6),
    ]
    kappa = signed_curvature(curve)
    if not problem.drop_curvature_bound:
        checks.append(("|kappa| <= omega_bar + 1e-6",
                       bool(np.all(np.abs(kappa) <= problem.omega_bar + 1e-6))))
    else:
        from .core import cross2
        e = np.diff(curve.points, axis=0)
        turn = np.arctan2(cross2(e[:-1], e[1:]), np.einsum("ij,ij->i", e[:-1], e[1:]))
        active_nodes = np.flatnonzero(~problem.deactivated)
        hinge = sum(abs(turn[i - 1]) for i in active_nodes if 1 <= i <= len(turn))
        checks.append(("turning concentrated on actuated nodes >= 99%",
                       hinge >= 0.99 * np.sum(np.abs(turn))))
    return checks


def _verify_grasp(name: str, args) -> list:
    from .grasping import GraspProblem, GraspTarget, GraspWeight, solve_static_grasping
    from .statics import SolverOptions

    cfg = preset(name)
    params = cfg.model_params()
    shape = GraspTarget.from_dict(cfg.target["shape"])
    weight = GraspWeight.from_dict(cfg.target["weight"])
    problem = GraspProblem(params, shape, weight, cfg.mask_obj(),
                           drop_curvature_bound=cfg.solver["drop_curvature_bound"])
    control, curve, report = solve_static_grasping(
        problem, SolverOptions(raise_on_failure=False))
    checks = [
        ("converged", report.converged),
        ("penetration <= 1e-4", report.extras["penetration"] <= 1e-4),
    ]
    if name == "test5":
        kappa = signed_curvature(curve)
        active = params.grid.s >= 0.55
        plateau = np.mean(np.abs(kappa[active] - 10.0) <= 1.0)
        checks.append(("|kappa-10|<=1 on >=30% of [0.55,1]", plateau >= 0.30))
    return checks


def _verify_dynamic(name: str, args) -> list:
    from .core import ControlField, DiscretizedCurve
    from .dynamics import TimeGrid, simulate
    from .statics import SolverOptions, StaticProblem, solve_static_reachability

    cfg = preset(name)
    params = cfg.model_params()
    mask = cfg.mask_obj()
    target = cfg.target["point"]
    problem = StaticProblem(params, mask, target)
    control, _, report = solve_static_reachability(problem, SolverOptions(raise_on_failure=False))
    tg = TimeGrid(cfg.time["dt"], cfg.time["n_steps"])
    q0 = DiscretizedCurve.straight_rest(params.grid)
    run_fwd = simulate(q0, None, control, params, tg, mask=mask, target=target,
                       store_every=max(1, tg.n_steps // 10))
    checks = [
        ("static stage converged", report.converged),
        ("forward run keeps max||q_s|-1| <= 1e-6", run_fwd.max_link_residual() <= 1e-6),
        ("control energy constant in time",
         bool(np.ptp(run_fwd.diagnostics["control_energy"]) <= 1e-12)),
    ]
    return checks


def _verify(fixture: str, args) -> int:
    names = list(PRESET_NAMES) if fixture == "all" else [fixture]
    failed = 0
    for name in names:
        if name not in PRESET_NAMES:
            print(f"unknown fixture {name!r}", file=sys.stderr)
            return EXIT_CONFIG
        if name.startswith("test2-"):
            checks = _verify_dynamic(name, args)
        elif name in ("test5", "test6", "test7", "test8"):
            checks = _verify_grasp(name, args)
        else:
            checks = _verify_static(name, args)
        for label, ok in checks:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {label}")
            failed += 0 if ok else 1
    return EXIT_OK if failed == 0 else EXIT_NONCONVERGENCE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            path = Path(args.config)
            if not path.exists():
                print(f"config file not found: {path}", file=sys.stderr)
                return EXIT_CONFIG
            cfg = ExperimentConfig.from_yaml(path.read_text())
            return _execute(cfg, args)
        if args.command == "preset":
            cfg = preset(args.name)
            if args.emit_config:
                print(cfg.to_yaml())
                return EXIT_OK
            return _execute(cfg, args)
        return _verify(args.fixture, args)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
