"""Backward adjoint solve and projected gradient descent for dynamic reachability.

The adjoint state (qbar, sbar) solves the linearized rod system backward in
time, driven by the tip-target running cost, with final data from the
terminal kinetic-energy cost: qbar(T) = -q_t(T), qbar_t(T) = 0.  The control
gradient is u + omega * Hbar[q, qbar] with Hbar the exact linearization of
the control coefficient.

The backward sweep is the exact transpose of the forward velocity-Verlet
substep map (including the tension solves and the length projections), so the
assembled gradient differentiates the discrete cost to machine accuracy while
qbar remains a consistent discretization of the continuous adjoint system.
The adjoint tension sbar is recovered from the same index reduction that
closes the forward tension: it enforces the linearized constraint
qbar_s . q_s = 0, whose boundary row at the free end carries the tip-target
forcing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ControlField, Grid, Mask, ModelParams, cross2
from .dynamics import ForwardRun, InstabilityError, RodDynamics, TimeGrid, simulate

__all__ = [
    "AdjointRun",
    "OptimizationReport",
    "linearized_maps",
    "solve_adjoint",
    "control_gradient",
    "cost_breakdown",
    "optimize_dynamic",
    "space_time_inner",
]


@dataclass
class AdjointRun:
    grid: Grid
    time_grid: TimeGrid
    times: np.ndarray
    qbar: np.ndarray           # (n_steps+1, n, 2)
    sbar: np.ndarray           # (n_steps+1, n)
    gradient_field: np.ndarray | None = None   # (n_steps, n), exact dJ/du / (dt w)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class OptimizationReport:
    iterations: int
    converged: bool
    cost_history: list
    component_history: list
    gradient_norms: list
    step_sizes: list
    termination: str
    runtime: float
    series: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "cost_history": list(self.cost_history),
            "component_history": [dict(c) for c in self.component_history],
            "gradient_norms": list(self.gradient_norms),
            "step_sizes": list(self.step_sizes),
            "termination": self.termination,
            "runtime": self.runtime,
        }


def linearized_maps(curve_or_points, qbar, params: ModelParams, control=None):
    """Nodal (Gbar, Hbar) fields for a state q and adjoint direction qbar."""
    q = getattr(curve_or_points, "points", curve_or_points)
    dyn = RodDynamics(params)
    u = np.zeros(params.grid.n_nodes) if control is None else np.asarray(
        getattr(control, "values", control), dtype=float
    )
    return dyn.linearized_coefficient_maps(
        np.asarray(q, dtype=float), u, np.asarray(qbar, dtype=float)
    )


# ---------------------------------------------------------------------------
# Exact reverse sweep
# ---------------------------------------------------------------------------


def _tip_weights(n_states: int, h: float) -> np.ndarray:
    """Trapezoid weights of the substep-resolved tip-cost integral."""
    w = np.full(n_states, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _backward_costates(dyn: RodDynamics, forward: ForwardRun, control: ControlField,
                       target, tau: float):
    """Reverse-mode sweep through the stored substep trajectory.

    Returns the macro-state costate field pbar (velocity costate divided by
    the node masses, so pbar(T) = -q_t(T)), the exact per-step gradient field,
    and diagnostics.
    """
    if forward.full_q is None or forward.full_v is None:
        raise ValueError(
            "adjoint solve needs the substep-resolved trajectory; "
            "rerun simulate(..., keep_full=True)"
        )
    n_steps = forward.time_grid.n_steps
    n_sub = forward.substeps
    h = forward.time_grid.dt / n_sub
    n_states = forward.full_q.shape[0]
    tgt = np.asarray(target, dtype=float)
    wtip = _tip_weights(n_states, h)
    grid = dyn.grid
    mass = dyn.mass

    def tip_cost_grad(m: int) -> np.ndarray:
        g = np.zeros((dyn.n, 2))
        g[-1] = wtip[m] / tau * (forward.full_q[m][-1] - tgt)
        return g

    # terminal seeds: d/dq_N and d/dv_N of J
    qb = tip_cost_grad(n_states - 1)
    vb = mass[:, None] * forward.full_v[-1]

    qbar_macro = np.empty((n_steps + 1, dyn.n, 2))
    wbar_macro = np.empty((n_steps + 1, dyn.n, 2))
    u_grad = np.zeros((n_steps, dyn.n))
    qbar_macro[n_steps] = -vb / mass[:, None]
    wbar_macro[n_steps] = qb.copy()

    for m in range(n_states - 1, 0, -1):
        k = (m - 1) // n_sub
        u_now = control.at_step(k)
        qb, vb, ub = dyn.substep_vjp(
            forward.full_q[m - 1], forward.full_v[m - 1], u_now, h, qb, vb
        )
        u_grad[k] += ub
        qb = qb + tip_cost_grad(m - 1)
        if (m - 1) % n_sub == 0:
            kk = (m - 1) // n_sub
            qbar_macro[kk] = -vb / mass[:, None]
            wbar_macro[kk] = qb.copy()
        if not (np.all(np.isfinite(qb)) and np.all(np.isfinite(vb))):
            raise RuntimeError(f"adjoint sweep became non-finite at substep {m - 1}")

    # control-energy part and field normalization: dJ/du_{k,i} = dt w_i field
    dt = forward.time_grid.dt
    u = control.values if control.is_dynamic else np.repeat(
        control.values[None, :], n_steps, axis=0
    )
    field = u + u_grad / (dt * grid.weights[None, :])
    diag = {
        "terminal_condition_residual": float(
            np.max(np.abs(qbar_macro[n_steps] + forward.full_v[-1]))
        ),
        "initial_costate_norm": float(np.max(np.abs(qbar_macro[0]))),
    }
    return qbar_macro, wbar_macro, field, diag


def _adjoint_tension(dyn: RodDynamics, forward: ForwardRun, qbar: np.ndarray,
                     control: ControlField, target, tau: float) -> np.ndarray:
    """Nodal adjoint tension per stored step.

    sbar closes the linearized constraint qbar_s . q_s = 0 exactly as the
    forward tension closes |q_s|^2 = 1: a tridiagonal index-reduction solve
    with the adjoint force as source; the tip row is free (zero multiplier
    beyond the last link) while the tip load enters the force.
    """
    n_steps = forward.time_grid.n_steps
    n_sub = forward.substeps
    dt = forward.time_grid.dt
    tgt = np.asarray(target, dtype=float)
    sbar = np.empty((n_steps + 1, dyn.n))
    # adjoint time derivative by central differences of the macro field
    qbar_t = np.gradient(qbar, dt, axis=0)
    for k in range(n_steps + 1):
        m = min(k * n_sub, forward.full_q.shape[0] - 1)
        q = forward.full_q[m]
        v = forward.full_v[m]
        u = control.at_step(min(k, n_steps - 1))
        p = qbar[k]
        w_t = qbar_t[k]
        F = dyn.elastic_force_linearized(q, u, p)
        F_fwd = dyn.nonconstraint_force(q, v, u)
        fac_e = dyn.tension_factorization(q)
        lam_fwd = dyn.tension_multipliers(q, v, F_fwd, fac_e)
        ep = np.diff(p, axis=0)[1:]
        F = F + dyn._constraint_force(ep, lam_fwd)
        F[-1] -= (q[-1] - tgt) / tau
        F = F + dyn.beta_w[:, None] * w_t + dyn.Gamma @ w_t
        a_fwd, _ = dyn.acceleration(q, v, u, fac_e)
        acc0 = F * dyn._minv_nodes[:, None]
        acc0[:2] = 0.0
        e = fac_e[1]
        jacc = np.einsum("ij,ij->i", e, np.diff(acc0, axis=0)[1:]) / dyn.ds**2
        ea = np.diff(a_fwd, axis=0)[1:]
        ev = np.diff(v, axis=0)[1:]
        ew = np.diff(w_t, axis=0)[1:]
        rate = (
            np.einsum("ij,ij->i", ea, ep) + 2.0 * np.einsum("ij,ij->i", ev, ew)
        ) / dyn.ds**2
        mult = dyn._tension_solve(fac_e[0], -rate - jacc)
        sbar[k] = dyn.nodal_sigma(mult)
    return sbar


def solve_adjoint(forward: ForwardRun, params: ModelParams, target, tau: float | None = None,
                  control: ControlField | None = None, mask: Mask | None = None) -> AdjointRun:
    """Solve the adjoint system backward along a stored forward run."""
    dyn = RodDynamics(params, mask)
    tau = params.tau if tau is None else float(tau)
    if control is None:
        control = ControlField.zero(dyn.grid, mask, n_steps=forward.time_grid.n_steps)
    qbar, _, field, diag = _backward_costates(dyn, forward, control, target, tau)
    sbar = _adjoint_tension(dyn, forward, qbar, control, target, tau)
    return AdjointRun(
        grid=dyn.grid,
        time_grid=forward.time_grid,
        times=forward.time_grid.times(),
        qbar=qbar,
        sbar=sbar,
        gradient_field=field,
        diagnostics=diag,
    )


def _hbar_at_state(dyn: RodDynamics, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    C = dyn.D2 @ q
    T = dyn.D1 @ q
    Cd = dyn.D2 @ p
    Td = dyn.D1 @ p
    return -dyn.params.mu * (cross2(Td, C) + cross2(T, Cd))


def control_gradient(forward: ForwardRun, adjoint: AdjointRun, params: ModelParams,
                     control: ControlField, mask: Mask | None = None) -> np.ndarray:
    """Space-time gradient field u + omega * Hbar[q, qbar], zeroed on the mask.

    When the adjoint run carries the transposed-sweep field it is returned
    directly (it is the same expression accumulated at the integrator stages,
    and differentiates the discrete cost exactly); otherwise the formula is
    evaluated from the stored states with the step-endpoint average.
    """
    dyn = RodDynamics(params, mask)
    dead = dyn.mask.deactivated(dyn.grid)
    if adjoint.gradient_field is not None:
        grad = adjoint.gradient_field.copy()
        grad[:, dead] = 0.0
        return grad
    n_steps = forward.time_grid.n_steps
    u = control.values if control.is_dynamic else np.repeat(
        control.values[None, :], n_steps, axis=0
    )
    hbar = np.empty((n_steps + 1, dyn.n))
    for k in range(n_steps + 1):
        hbar[k] = _hbar_at_state(dyn, forward.q[k], adjoint.qbar[k])
    grad = u + dyn.params.omega[None, :] * 0.5 * (hbar[:-1] + hbar[1:])
    grad[:, dead] = 0.0
    return grad


def space_time_inner(a: np.ndarray, b: np.ndarray, grid: Grid, dt: float) -> float:
    """L2 inner product with ds-weights in space and step weights in time."""
    return float(dt * np.einsum("kj,kj,j->", a, b, grid.weights))


def cost_breakdown(run: ForwardRun, control: ControlField, params: ModelParams, target) -> dict:
    """Total dynamic cost and its three components from run diagnostics."""
    dt = run.time_grid.dt
    tip2 = run.diagnostics["tip_dist2"]
    tip2_sub = run.diagnostics.get("tip_dist2_sub")
    if tip2_sub is not None:
        tip_term = 0.5 / params.tau * float(np.trapezoid(tip2_sub, dx=dt / run.substeps))
    else:
        tip_term = 0.5 / params.tau * float(np.trapezoid(tip2, dx=dt))
    u = control.values
    if u.ndim == 1:
        u = np.repeat(u[None, :], run.time_grid.n_steps, axis=0)
    w = run.grid.weights
    ctrl_series = np.einsum("kj,j->k", u**2, w)
    control_term = 0.5 * float(np.sum(ctrl_series)) * dt
    kinetic_term = float(run.diagnostics["kinetic_energy"][-1])
    return {
        "tip_integral": tip_term,
        "control_energy": control_term,
        "terminal_kinetic": kinetic_term,
        "total": tip_term + control_term + kinetic_term,
        "series_tip_dist2": tip2.copy(),
        "series_control_energy": np.concatenate([ctrl_series, ctrl_series[-1:]]),
        "series_kinetic": run.diagnostics["kinetic_energy"].copy(),
    }


# ---------------------------------------------------------------------------
# Projected gradient descent
# ---------------------------------------------------------------------------


def optimize_dynamic(q0, v0, initial_control: ControlField, params: ModelParams,
                     time_grid: TimeGrid, target, mask: Mask | None = None,
                     max_iters: int = 60, tol_control: float = 1e-4,
                     armijo: float = 1e-4, verbose: bool = False):
    """Projected gradient descent on the dynamic reachability cost.

    Loop: forward simulate, backward adjoint, gradient, backtracking update
    u <- clip(u - a*grad, [-1, 1]) until the projected-gradient residual in
    the space-time L2 norm falls below tol_control or the iteration cap.
    The initial step size of each line search reuses the previous accepted
    one.
    """
    started = time.perf_counter()
    grid = params.grid
    mask = mask if mask is not None else Mask.none()
    dead = mask.deactivated(grid)
    u = initial_control.values.copy()
    if u.ndim == 1:
        u = np.repeat(u[None, :], time_grid.n_steps, axis=0)
    u[:, dead] = 0.0

    def run_forward(u_arr, full: bool):
        ctl = ControlField(u_arr, grid, mask)
        run = simulate(q0, v0, ctl, params, time_grid, mask=mask, target=target,
                       keep_full=full, store_every=1)
        return ctl, run, cost_breakdown(run, ctl, params, target)

    ctl, run, comps = run_forward(u, full=True)
    cost = comps["total"]
    cost_hist = [cost]
    comp_hist = [{k: comps[k] for k in ("tip_integral", "control_energy", "terminal_kinetic")}]
    grad_norms = []
    steps = []
    alpha = 1.0
    termination = "iteration cap"
    converged = False

    for it in range(1, max_iters + 1):
        adj = solve_adjoint(run, params, target, params.tau, ctl, mask)
        g = control_gradient(run, adj, params, ctl, mask)
        resid = u - np.clip(u - g, -1.0, 1.0)
        resid_norm = np.sqrt(space_time_inner(resid, resid, grid, time_grid.dt))
        grad_norms.append(resid_norm)
        if verbose:
            print(f"  iter {it:3d}: J={cost:.6f} |resid|={resid_norm:.3e} alpha={alpha:.2e}")
        if resid_norm <= tol_control:
            converged = True
            termination = "projected gradient below tolerance"
            break

        accepted = False
        # cap the first trial so the control moves at most ~0.5 in sup norm
        # (the L2-representative gradient field carries 1/(dt w) scaling)
        alpha = min(alpha * 2.0, 0.5 / max(float(np.max(np.abs(g))), 1e-12))
        while alpha > 1e-16:
            u_try = np.clip(u - alpha * g, -1.0, 1.0)
            u_try[:, dead] = 0.0
            try:
                ctl_try, run_try, comps_try = run_forward(u_try, full=True)
            except InstabilityError:
                alpha *= 0.5  # trial control destabilized the run: reject
                continue
            decrease = space_time_inner(g, u - u_try, grid, time_grid.dt)
            if comps_try["total"] <= cost - armijo * decrease:
                u, ctl, run, comps = u_try, ctl_try, run_try, comps_try
                cost = comps["total"]
                accepted = True
                break
            alpha *= 0.5
        steps.append(alpha)
        cost_hist.append(cost)
        comp_hist.append({k: comps[k] for k in ("tip_integral", "control_energy", "terminal_kinetic")})
        if not accepted:
            termination = "line search failed"
            break

    report = OptimizationReport(
        iterations=len(cost_hist) - 1,
        converged=converged,
        cost_history=cost_hist,
        component_history=comp_hist,
        gradient_norms=grad_norms,
        step_sizes=steps,
        termination=termination,
        runtime=time.perf_counter() - started,
        series={
            "tip_dist2": comps["series_tip_dist2"],
            "control_energy": comps["series_control_energy"],
            "kinetic": comps["series_kinetic"],
        },
    )
    return ControlField(u, grid, mask), report
