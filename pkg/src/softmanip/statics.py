"""Stationary shapes and static optimal reachability.

Two routes to a static shape:

* ``integrate_shape`` integrates the reduced second-order shape equation for
  a given control (angle formulation, exact unit speed by construction).
* ``solve_static_reachability`` minimizes the bending-energy (elastica) form
  of the reachability cost over the nodal curve, with inextensibility and
  curvature bounds enforced by an augmented Lagrangian and an L-BFGS inner
  solver; the control is recovered from the converged curvature afterwards.

Sign convention: the recovered control satisfies
``signed_curvature(integrate_shape(u)) = omega_bar * u`` up to O(ds^2).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

from .core import (
    ControlField,
    DiscretizedCurve,
    Grid,
    Mask,
    ModelParams,
    cross2,
    signed_curvature,
)

__all__ = [
    "StaticProblem",
    "SolverOptions",
    "ConvergenceReport",
    "NonConvergenceError",
    "IllPosedProblemError",
    "integrate_shape",
    "static_cost",
    "solve_static_reachability",
]

_GAIN_FLOOR = 1e-12


class NonConvergenceError(RuntimeError):
    """Solver hit its iteration caps; carries the last iterate and report."""

    def __init__(self, message, report=None, curve=None):
        super().__init__(message)
        self.report = report
        self.curve = curve


class IllPosedProblemError(ValueError):
    """Zero curvature gain on actuated interior nodes."""


@dataclass
class SolverOptions:
    """Augmented-Lagrangian solver knobs (defaults sized for ds = 0.02)."""

    max_outer: int = 40
    inner_maxiter: int = 150
    tol_constraint: float = 1e-8
    tol_straight: float = 1e-6       # |q_ss| allowed on deactivated nodes
    tol_stationarity: float = 1e-6
    rho0: float = 1e5
    rho_max: float = 1e6   # beyond this, penalty-term roundoff drowns the gradient
    raise_on_failure: bool = True
    verbose: bool = False


@dataclass
class ConvergenceReport:
    converged: bool
    outer_iterations: int
    inner_evaluations: int
    cost: float
    cost_components: dict
    residuals: dict
    stationarity: float
    runtime: float
    message: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "inner_evaluations": self.inner_evaluations,
            "cost": self.cost,
            "cost_components": dict(self.cost_components),
            "residuals": dict(self.residuals),
            "stationarity": self.stationarity,
            "runtime": self.runtime,
            "message": self.message,
            "extras": {k: v for k, v in self.extras.items() if np.isscalar(v)},
        }


class StaticProblem:
    """Reachability problem data: masked parameters, target point, gain field."""

    def __init__(self, params: ModelParams, mask: Mask | None = None, target=(0.0, -1.0),
                 drop_curvature_bound: bool = False):
        self.grid = params.grid
        self.mask = mask if mask is not None else Mask.none()
        self.params = params.masked(self.mask)
        self.target = np.asarray(target, dtype=float).reshape(2)
        self.drop_curvature_bound = bool(drop_curvature_bound)
        self.omega_bar = self.params.omega_bar()
        self.deactivated = self.mask.deactivated(self.grid)
        # Nodes with no curvature gain behave as unactuated regardless of the
        # mask (the tip always qualifies when mu(1) = 0).
        self.zero_gain = self.omega_bar <= _GAIN_FLOOR
        self.active = ~self.zero_gain
        self._check_posedness()

    def _check_posedness(self):
        mu = self.params.mu
        interior = np.ones(self.grid.n_nodes, dtype=bool)
        interior[0] = interior[-2:] = False
        dead_interior = self.zero_gain & interior & ~self.deactivated
        if np.all(self.zero_gain):
            raise IllPosedProblemError("curvature gain vanishes everywhere; nothing is actuated")
        if np.count_nonzero(dead_interior) > 0.25 * np.count_nonzero(~self.deactivated):
            raise IllPosedProblemError(
                "curvature gain vanishes on a large actuated region; the reduced "
                "shape equation is ill-posed there"
            )
        ds = self.grid.ds
        mu_s_tip = (1.5 * mu[-1] - 2.0 * mu[-2] + 0.5 * mu[-3]) / ds
        if abs(mu[-1]) > 1e-8 or abs(mu_s_tip) > 10.0:
            warnings.warn(
                "control penalty does not vanish smoothly at the tip "
                f"(mu(1)={mu[-1]:.3g}, mu_s(1)={mu_s_tip:.3g}); the reduced "
                "stationary shape equation assumes mu(1) = mu_s(1) = 0"
            )


def integrate_shape(control, problem: StaticProblem) -> DiscretizedCurve:
    """Integrate the reduced shape equation for a bounded control.

    Angle form: theta(0) = -pi/2 (anchor tangent (0, -1)), theta_s =
    omega_bar * u; node positions advance along the midpoint tangent angle so
    every link has exact length ds.
    """
    grid = problem.grid
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    if u.ndim != 1 or u.shape[0] != grid.n_nodes:
        raise ValueError("static control must provide one value per node")
    if np.any(np.abs(u) > 1.0 + ControlField.BOUND_TOL):
        warnings.warn(f"control exceeds the unit bound (max |u| = {np.max(np.abs(u)):.3g})")
    rate = problem.omega_bar * u
    ds = grid.ds
    theta = -0.5 * np.pi + np.concatenate([[0.0], np.cumsum(0.5 * ds * (rate[:-1] + rate[1:]))])
    mid = 0.5 * (theta[:-1] + theta[1:])
    steps = ds * np.column_stack([np.cos(mid), np.sin(mid)])
    pts = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    return DiscretizedCurve(pts, grid)


def control_energy(u_values: np.ndarray, problem: StaticProblem) -> float:
    """(1/2) integral of u^2 over the actuated region."""
    u = np.where(problem.deactivated, 0.0, u_values)
    return 0.5 * problem.grid.integrate(u * u)


def static_cost(control, problem: StaticProblem):
    """Reachability cost of a control: (energy, tip term, total) plus the shape."""
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    curve = integrate_shape(u, problem)
    energy = control_energy(u, problem)
    tip_term = 0.5 / problem.params.tau * float(np.sum((curve.tip - problem.target) ** 2))
    return {
        "control_energy": energy,
        "tip_penalty": tip_term,
        "total": energy + tip_term,
        "curve": curve,
    }


# ---------------------------------------------------------------------------
# Warm start in the angle/control parametrization
# ---------------------------------------------------------------------------


def _warm_start_control(problem: StaticProblem, task, u0=None, maxiter=400):
    """Approximate minimizer of energy + task in the control variable.

    The shape integrator makes inextensibility exact, so the only constraint
    left is the box |u| <= 1, which L-BFGS-B handles directly.  The result
    seeds the nodal-curve solver; it is not the returned solution.
    """
    grid = problem.grid
    n = grid.n_nodes
    ds = grid.ds
    w = grid.weights
    ob = problem.omega_bar
    free = np.flatnonzero(problem.active)

    # theta_nodal = -pi/2 + L @ (ob * u); link angles theta~ = A @ theta_nodal.
    L = np.zeros((n, n))
    for j in range(1, n):
        L[j, : j + 1] = ds
        L[j, 0] = L[j, j] = 0.5 * ds
    A = np.zeros((n - 1, n))
    A[np.arange(n - 1), np.arange(n - 1)] = 0.5
    A[np.arange(n - 1), np.arange(1, n)] = 0.5
    AL_map = A @ L

    def value_grad(ufree):
        u = np.zeros(n)
        u[free] = ufree
        rate = ob * u
        ang = -0.5 * np.pi + AL_map @ rate
        tang = np.column_stack([np.cos(ang), np.sin(ang)])
        pts = np.vstack([[0.0, 0.0], np.cumsum(ds * tang, axis=0)])
        val_t, grad_q = task(pts)
        # chain through q_i = ds * sum_{k<i} t(ang_k)
        gsum = np.cumsum(grad_q[::-1], axis=0)[::-1]  # sum_{i>=k+1} grad_q[i]
        normal = np.column_stack([-np.sin(ang), np.cos(ang)])
        gang = ds * np.einsum("kj,kj->k", normal, gsum[1:])
        gu = ob * (AL_map.T @ gang)
        val = val_t + 0.5 * float(np.sum(w * u * u))
        gu += w * u
        return val, gu[free]

    x0 = np.zeros(free.size) if u0 is None else np.asarray(u0, dtype=float)[free]
    if problem.drop_curvature_bound:
        bounds = None
    else:
        bounds = [(-1.0, 1.0)] * free.size
    res = minimize(
        value_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": maxiter, "maxfun": 3 * maxiter, "ftol": 1e-14, "gtol": 1e-9},
    )
    u = np.zeros(n)
    u[free] = res.x
    return u


# ---------------------------------------------------------------------------
# Elastica-form augmented-Lagrangian engine
# ---------------------------------------------------------------------------


class _ElasticaAL:
    """Minimize task(q) + bending energy subject to unit links, straightness
    on zero-gain nodes, and |q_ss| <= omega_bar on actuated nodes.

    The curve nodes are the unknowns; nodes 0 and 1 are pinned by the clamp
    (q_0 = 0, q_1 = (0, -ds)).  ``task`` maps the (n, 2) node array to a
    scalar plus its gradient.
    """

    def __init__(self, problem: StaticProblem, task, options: SolverOptions, task_gn_hess=None):
        self.problem = problem
        self.task = task
        self.task_gn_hess = task_gn_hess  # optional (n,2,2) Gauss-Newton blocks
        self.step_limiter = None          # optional (q, step) -> max trial step
        self.opts = options
        grid = problem.grid
        self.n = grid.n_nodes
        self.ds = grid.ds
        self.D2 = grid.diff_matrix(2)
        w = grid.weights
        ob = problem.omega_bar
        self.bend_w = np.where(problem.active, w / np.maximum(ob, _GAIN_FLOOR) ** 2, 0.0)
        self.eq_nodes = np.flatnonzero(problem.zero_gain)
        self.ineq_nodes = (
            np.array([], dtype=int)
            if problem.drop_curvature_bound
            else np.flatnonzero(problem.active)
        )
        self.ob_ineq = ob[self.ineq_nodes]
        self.q_head = np.array([[0.0, 0.0], [0.0, -self.ds]])
        self.n_links = self.n - 2  # constrained links 1..n-2
        self.Df = self.D2[:, 2:]  # columns of the free nodes

    # -- assembly -----------------------------------------------------------

    def curve_from(self, x: np.ndarray) -> np.ndarray:
        return np.vstack([self.q_head, x.reshape(-1, 2)])

    def link_residuals(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        e = np.diff(q, axis=0)[1:]  # links 1..n-2
        c = 0.5 * (np.einsum("ij,ij->i", e, e) / self.ds**2 - 1.0)
        return c, e

    def straight_residuals(self, C: np.ndarray) -> np.ndarray:
        return self.ds * C[self.eq_nodes]

    def bound_residuals(self, C: np.ndarray) -> np.ndarray:
        mag2 = np.einsum("ij,ij->i", C[self.ineq_nodes], C[self.ineq_nodes])
        return 0.5 * (mag2 - self.ob_ineq**2) / self.ob_ineq

    def al_value_grad(self, x, mult):
        lam, meq, eta, rho = mult
        q = self.curve_from(x)
        C = self.D2 @ q

        val, grad = self.task(q)
        grad = grad.copy()

        bend = 0.5 * float(np.sum(self.bend_w * np.einsum("ij,ij->i", C, C)))
        val += bend
        grad += self.D2.T @ (self.bend_w[:, None] * C)

        c, e = self.link_residuals(q)
        coef = lam + rho * c
        val += float(np.sum(lam * c) + 0.5 * rho * np.sum(c * c))
        pull = coef[:, None] * e / self.ds**2
        grad[2:] += pull
        np.add.at(grad, np.arange(1, self.n - 1), -pull)

        t = self.straight_residuals(C)
        val += float(np.sum(meq * t) + 0.5 * rho * np.sum(t * t))
        tc = np.zeros_like(C)
        tc[self.eq_nodes] = self.ds * (meq + rho * t)
        grad += self.D2.T @ tc

        if self.ineq_nodes.size:
            h = self.bound_residuals(C)
            phi = np.maximum(eta + rho * h, 0.0)
            val += float(np.sum(phi * phi - eta * eta) / (2.0 * rho))
            hc = np.zeros_like(C)
            hc[self.ineq_nodes] = (phi / self.ob_ineq)[:, None] * C[self.ineq_nodes]
            grad += self.D2.T @ hc

        return val, grad[2:].ravel()

    def al_hessian(self, x, mult) -> np.ndarray:
        """Exact Hessian of the augmented Lagrangian (Gauss-Newton task block)."""
        lam, meq, eta, rho = mult
        q = self.curve_from(x)
        C = self.D2 @ q
        nf = self.n - 2
        H = np.zeros((nf, 2, nf, 2))

        # Componentwise D2-quadratic terms: bending and straightness penalty.
        diag = self.bend_w.copy()
        diag[self.eq_nodes] += rho * self.ds**2
        S = self.Df.T @ (diag[:, None] * self.Df)
        H[:, 0, :, 0] += S
        H[:, 1, :, 1] += S

        if self.task_gn_hess is not None:
            blocks = self.task_gn_hess(q)  # (n, 2, 2)
            for i in range(2, self.n):
                H[i - 2, :, i - 2, :] += blocks[i]

        # Link constraints: (lam + rho c) * Hess(c) + rho grad(c) grad(c)^T.
        c, e = self.link_residuals(q)
        coef = lam + rho * c
        eye2 = np.eye(2)
        for k in range(self.n_links):
            i, j = k + 1 - 2, k + 2 - 2  # free indices of nodes k+1, k+2
            blk_lin = coef[k] / self.ds**2 * eye2
            blk_out = rho * np.outer(e[k], e[k]) / self.ds**4
            blk = blk_lin + blk_out
            H[j, :, j, :] += blk
            if i >= 0:
                H[i, :, i, :] += blk
                H[i, :, j, :] -= blk
                H[j, :, i, :] -= blk

        # Curvature bound: phi * Hess(h) + psi'' grad(h) grad(h)^T.
        if self.ineq_nodes.size:
            h = self.bound_residuals(C)
            phi = np.maximum(eta + rho * h, 0.0)
            act = phi > 0.0
            if np.any(act):
                nodes = self.ineq_nodes[act]
                rows = self.Df[nodes]                     # (m, nf)
                wts = (phi[act] / self.ob_ineq[act])      # (m,)
                S2 = rows.T @ (wts[:, None] * rows)
                H[:, 0, :, 0] += S2
                H[:, 1, :, 1] += S2
                Cn = C[nodes] / self.ob_ineq[act][:, None]  # grad h direction scale
                # grad h over (node, comp): rows[m, j] * Cn[m, a]
                G = np.einsum("mj,ma->mja", rows, Cn).reshape(len(nodes), -1)
                H += (rho * G.T @ G).reshape(nf, 2, nf, 2)

        return H.reshape(2 * nf, 2 * nf)

    def _newton(self, x, mult, gtol, maxiter):
        """Damped Newton minimization of the augmented Lagrangian."""
        evals = 0
        val, grad = self.al_value_grad(x, mult)
        evals += 1
        for _ in range(maxiter):
            gnorm = float(np.max(np.abs(grad)))
            if gnorm <= gtol:
                break
            H = self.al_hessian(x, mult)
            reg = 0.0
            scale = max(float(np.mean(np.abs(np.diag(H)))), 1.0)
            while True:
                try:
                    fac = cho_factor(H + reg * np.eye(H.shape[0]), lower=True)
                    break
                except LinAlgError:
                    reg = max(1e-10 * scale, reg * 10.0)
            step = cho_solve(fac, -grad)
            slope = float(grad @ step)
            if slope > 0.0:  # not a descent direction; fall back to steepest
                step = -grad
                slope = -float(grad @ grad)
            t = 1.0
            while t > 1e-14:
                val_new, grad_new = self.al_value_grad(x + t * step, mult)
                evals += 1
                if val_new <= val + 1e-4 * t * slope:
                    break
                t *= 0.5
            if t <= 1e-14:
                break
            x = x + t * step
            val, grad = val_new, grad_new
        return x, float(np.max(np.abs(grad))), evals

    # -- residual summary ----------------------------------------------------

    def residuals(self, q: np.ndarray) -> dict:
        C = self.D2 @ q
        c, _ = self.link_residuals(q)
        link = float(np.max(np.abs(c))) if c.size else 0.0
        straight = (
            float(np.max(np.linalg.norm(C[self.eq_nodes], axis=1))) if self.eq_nodes.size else 0.0
        )
        if self.ineq_nodes.size:
            mag = np.linalg.norm(C[self.ineq_nodes], axis=1)
            bound = float(np.max(np.maximum(mag - self.ob_ineq, 0.0)))
        else:
            bound = 0.0
        return {"link": link, "straightness": straight, "curvature_bound": bound}

    def _merit(self, res: dict) -> float:
        return max(
            res["link"] / self.opts.tol_constraint,
            res["straightness"] / self.opts.tol_straight,
            res["curvature_bound"] / self.opts.tol_constraint,
        )

    def objective_grad(self, q: np.ndarray) -> np.ndarray:
        """Gradient (free nodes) of task + bending energy, no constraint terms."""
        C = self.D2 @ q
        _, grad = self.task(q)
        grad = grad + self.D2.T @ (self.bend_w[:, None] * C)
        return grad[2:].ravel()

    def multiplier_estimate(self, q: np.ndarray, active_slack: float = 1e-6):
        """Least-squares KKT multipliers and the projected-gradient residual.

        Stacks the Jacobians of all equalities plus the inequalities active at
        the point, solves min_l ||grad f + J^T l||, drops wrong-signed
        inequality multipliers, and returns (stationarity, lam, meq, eta).
        """
        nf = self.n - 2
        g = self.objective_grad(q)
        C = self.D2 @ q
        _, e = self.link_residuals(q)

        rows = []
        kinds = []  # ("link", k) | ("eq", slot) | ("ineq", j)
        for k in range(self.n_links):
            row = np.zeros((nf, 2))
            if k + 1 >= 2:
                row[k + 1 - 2] -= e[k] / self.ds**2
            row[k + 2 - 2] += e[k] / self.ds**2
            rows.append(row.ravel())
            kinds.append(("link", k))
        for slot, i in enumerate(self.eq_nodes):
            for comp in range(2):
                row = np.zeros((nf, 2))
                row[:, comp] = self.D2[i, 2:] * self.ds
                rows.append(row.ravel())
                kinds.append(("eq", 2 * slot + comp))
        if self.ineq_nodes.size:
            mag = np.linalg.norm(C[self.ineq_nodes], axis=1)
            near = mag >= self.ob_ineq - active_slack
            for j in np.flatnonzero(near):
                i = self.ineq_nodes[j]
                d = C[i] / max(mag[j], 1e-300)
                row = np.zeros((nf, 2))
                row[:, 0] = self.D2[i, 2:] * d[0]
                row[:, 1] = self.D2[i, 2:] * d[1]
                rows.append(row.ravel())
                kinds.append(("ineq", j))

        lam = np.zeros(self.n_links)
        meq = np.zeros((self.eq_nodes.size, 2))
        eta = np.zeros(self.ineq_nodes.size)
        if not rows:
            return float(np.max(np.abs(g))), lam, meq, eta
        J = np.asarray(rows)
        keep = np.ones(len(rows), dtype=bool)
        coef = np.zeros(len(rows))
        for _ in range(4):
            sol, *_ = np.linalg.lstsq(J[keep].T, -g, rcond=None)
            coef[:] = 0.0
            coef[keep] = sol
            bad = [
                idx
                for idx in np.flatnonzero(keep)
                if kinds[idx][0] == "ineq" and coef[idx] < 0.0
            ]
            if not bad:
                break
            keep[bad] = False
        resid = g + J[keep].T @ coef[keep]
        for idx in np.flatnonzero(keep):
            kind, pos = kinds[idx]
            if kind == "link":
                lam[pos] = coef[idx]
            elif kind == "eq":
                meq[pos // 2, pos % 2] = coef[idx]
            else:
                eta[pos] = coef[idx]
        return float(np.max(np.abs(resid))), lam, meq, eta

    def kkt_stationarity(self, q: np.ndarray) -> float:
        return self.multiplier_estimate(q)[0]

    # -- reduced-Newton refinement on the constraint manifold -----------------

    def _constraint_rows(self, q: np.ndarray, active_ineq: np.ndarray):
        """Jacobian rows of equalities plus the given active bound indices."""
        nf = self.n - 2
        C = self.D2 @ q
        _, e = self.link_residuals(q)
        rows = []
        for k in range(self.n_links):
            row = np.zeros((nf, 2))
            if k + 1 >= 2:
                row[k + 1 - 2] -= e[k] / self.ds**2
            row[k + 2 - 2] += e[k] / self.ds**2
            rows.append(row.ravel())
        for i in self.eq_nodes:
            for comp in range(2):
                row = np.zeros((nf, 2))
                row[:, comp] = self.D2[i, 2:] * self.ds
                rows.append(row.ravel())
        for j in active_ineq:
            i = self.ineq_nodes[j]
            mag = float(np.linalg.norm(C[i]))
            d = C[i] / max(mag, 1e-300)
            row = np.zeros((nf, 2))
            row[:, 0] = self.D2[i, 2:] * d[0]
            row[:, 1] = self.D2[i, 2:] * d[1]
            rows.append(row.ravel())
        return np.asarray(rows)

    def _lagrangian_hessian(self, q, lam, meq, eta_active):
        """Hessian of f + lam.c + eta.h on the free nodes (no penalty terms)."""
        nf = self.n - 2
        C = self.D2 @ q
        H = np.zeros((nf, 2, nf, 2))
        S = self.Df.T @ (self.bend_w[:, None] * self.Df)
        H[:, 0, :, 0] += S
        H[:, 1, :, 1] += S
        if self.task_gn_hess is not None:
            blocks = self.task_gn_hess(q)
            for i in range(2, self.n):
                H[i - 2, :, i - 2, :] += blocks[i]
        eye2 = np.eye(2)
        for k in range(self.n_links):
            i, j = k + 1 - 2, k + 2 - 2
            blk = lam[k] / self.ds**2 * eye2
            H[j, :, j, :] += blk
            if i >= 0:
                H[i, :, i, :] += blk
                H[i, :, j, :] -= blk
                H[j, :, i, :] -= blk
        for j, eta_j in eta_active.items():
            i = self.ineq_nodes[j]
            rows = self.Df[i]
            mag = float(np.linalg.norm(C[i]))
            # curvature of |C| keeps only the component orthogonal to C
            d = C[i] / max(mag, 1e-300)
            P = np.eye(2) - np.outer(d, d)
            H += np.einsum("j,l,ab->jalb", rows, rows, P * (eta_j / max(mag, 1e-300))).reshape(
                nf, 2, nf, 2
            )
        return H.reshape(2 * nf, 2 * nf)

    def refine(self, q: np.ndarray, max_iter: int = 60):
        """Active-set reduced Newton on the polished constraint manifold.

        The augmented-Lagrangian phase lands in a small neighborhood; this
        phase drives the projected gradient to the stationarity tolerance with
        the constraints kept feasible to machine level by re-polishing.
        Saddles (negative reduced curvature) are escaped along descent
        directions with an objective-decrease line search; only points that
        are second-order acceptable count as converged.
        """
        tol = self.opts.tol_stationarity
        q = self.polish(q)
        stat = self.kkt_stationarity(q)
        for _ in range(max_iter):
            stat, lam, meq, eta = self.multiplier_estimate(q)
            active = np.flatnonzero(eta > 0.0)
            J = self._constraint_rows(q, active)
            eta_active = {j: eta[j] for j in active}
            H = self._lagrangian_hessian(q, lam, meq, eta_active)
            g = self.objective_grad(q)
            _, sv, Vt = np.linalg.svd(J, full_matrices=True)
            rank = int(np.sum(sv > max(J.shape) * 1e-13 * (sv[0] if sv.size else 1.0)))
            Z = Vt[rank:].T
            if Z.shape[1] == 0:
                break  # fully constrained: nothing tangential to optimize
            gz = Z.T @ g
            Hz = Z.T @ H @ Z
            evals, vecs = np.linalg.eigh(Hz)
            scale = max(abs(evals[0]), abs(evals[-1]), 1.0)
            saddle = evals[0] < -1e-7 * scale
            if stat <= 0.5 * tol and not saddle:
                break
            shift = max(0.0, 1e-8 * scale - min(evals[0], 0.0))
            step_z = np.linalg.solve(Hz + shift * np.eye(Hz.shape[0]), -gz)
            p = Z @ step_z

            improved = False
            if saddle:
                # Escape with an objective decrease (the first-order residual
                # can grow when leaving a stationary ridge).
                f0 = self._objective_value(q)
                vmin = Z @ vecs[:, 0]
                for cand in (p, vmin, -vmin):
                    t = 1.0
                    if self.step_limiter is not None:
                        t = min(t, max(self.step_limiter(q, cand.reshape(-1, 2)), 1e-3))
                    while t > 1e-6:
                        q_try = self.polish(self._with_free(q, q[2:].ravel() + t * cand))
                        f_try = self._objective_value(q_try)
                        if (f_try <= f0 - max(1e-8, 0.1 * abs(evals[0]) * t * t)
                                and self._bound_violation(q_try) <= 1e-10):
                            q = q_try
                            improved = True
                            break
                        t *= 0.5
                    if improved:
                        break
            else:
                # Newton on the first-order system: the projected-gradient
                # norm is the line-search merit (the objective itself sits
                # below the projection noise floor near the optimum).
                t = 1.0
                if self.step_limiter is not None:
                    t = min(t, max(self.step_limiter(q, p.reshape(-1, 2)), 1e-3))
                while t > 1e-8:
                    q_try = self.polish(self._with_free(q, q[2:].ravel() + t * p))
                    stat_try = self.kkt_stationarity(q_try)
                    if stat_try <= (1.0 - 1e-3 * t) * stat and self._bound_violation(q_try) <= 1e-10:
                        q = q_try
                        improved = True
                        break
                    t *= 0.5
            if not improved:
                break
        stat = self.kkt_stationarity(q)
        return q, stat

    def _with_free(self, q, xfree):
        out = q.copy()
        out[2:] = xfree.reshape(-1, 2)
        return out

    def _objective_value(self, q) -> float:
        C = self.D2 @ q
        val, _ = self.task(q)
        return val + 0.5 * float(np.sum(self.bend_w * np.einsum("ij,ij->i", C, C)))

    def _bound_violation(self, q) -> float:
        if not self.ineq_nodes.size:
            return 0.0
        C = self.D2 @ q
        mag = np.linalg.norm(C[self.ineq_nodes], axis=1)
        return float(np.max(np.maximum(mag - self.ob_ineq, 0.0)))

    # -- constraint polish ----------------------------------------------------

    def polish(self, q: np.ndarray) -> np.ndarray:
        """Gauss-Newton projection onto the active constraint set.

        Drives link lengths, zero-gain straightness and any violated bounds
        to machine level with a minimal-norm correction of the free nodes.
        """
        nfree = self.n - 2
        for _ in range(12):
            C = self.D2 @ q
            c, e = self.link_residuals(q)
            rows = []
            vals = []
            for k in range(self.n_links):
                row = np.zeros((nfree, 2))
                if k + 1 >= 2:
                    row[k + 1 - 2] -= e[k] / self.ds**2
                row[k + 2 - 2] += e[k] / self.ds**2
                rows.append(row.ravel())
                vals.append(c[k])
            for idx, i in enumerate(self.eq_nodes):
                for comp in range(2):
                    row = np.zeros((nfree, 2))
                    row[:, comp] = self.D2[i, 2:] * self.ds
                    rows.append(row.ravel())
                    vals.append(self.ds * C[i, comp])
            if self.ineq_nodes.size:
                mag = np.linalg.norm(C[self.ineq_nodes], axis=1)
                viol = mag > self.ob_ineq
                for j in np.flatnonzero(viol):
                    i = self.ineq_nodes[j]
                    d = C[i] / max(mag[j], 1e-300)
                    row = np.zeros((nfree, 2))
                    row[:, 0] = self.D2[i, 2:] * d[0]
                    row[:, 1] = self.D2[i, 2:] * d[1]
                    rows.append(row.ravel())
                    vals.append(mag[j] - self.ob_ineq[j])
            vals = np.asarray(vals)
            if np.max(np.abs(vals), initial=0.0) < 1e-13:
                break
            J = np.asarray(rows)
            gram = J @ J.T
            gram[np.diag_indices_from(gram)] += 1e-12 * max(np.trace(gram) / gram.shape[0], 1.0)
            delta = J.T @ np.linalg.solve(gram, -vals)
            q = q.copy()
            q[2:] += delta.reshape(-1, 2)
        return q

    # -- outer loop -----------------------------------------------------------

    def solve(self, q_init: np.ndarray):
        """Augmented-Lagrangian phase into the basin, reduced-Newton finish."""
        opts = self.opts
        x = q_init[2:].ravel().copy()
        lam = np.zeros(self.n_links)
        meq = np.zeros((self.eq_nodes.size, 2))
        eta = np.zeros(self.ineq_nodes.size)
        rho = opts.rho0
        evaluations = 0
        outer_done = 0
        prev_raw = np.inf

        for outer in range(1, opts.max_outer + 1):
            pgtol = max(0.3 * opts.tol_stationarity, rho * 3e-13)
            mult = (lam, meq, eta, rho)
            x, grad_norm, nev = self._newton(x, mult, pgtol, opts.inner_maxiter)
            evaluations += nev
            outer_done = outer

            qx = self.curve_from(x)
            c, _ = self.link_residuals(qx)
            C = self.D2 @ qx
            t = self.straight_residuals(C)
            raw = max(
                float(np.max(np.abs(c), initial=0.0)),
                float(np.max(np.abs(t), initial=0.0)),
            )
            if opts.verbose:
                print(f"  outer {outer:2d}: rho={rho:.1e} raw={raw:.2e} |g_in|={grad_norm:.2e}")
            # The reduced-Newton phase takes over once the iterate is close
            # enough for the projection to be a *small* correction.
            if raw <= 1e-5 and grad_norm <= 1e-4:
                break
            lam = lam + rho * c
            meq = meq + rho * t
            if self.ineq_nodes.size:
                eta = np.maximum(eta + rho * self.bound_residuals(C), 0.0)
            if raw > 0.5 * prev_raw and rho < opts.rho_max:
                rho = min(rho * 10.0, opts.rho_max)
            prev_raw = raw

        q, stat = self.refine(self.curve_from(x))
        rd = self.residuals(q)
        merit_ok = self._merit(rd) <= 1.0
        converged = merit_ok and stat <= opts.tol_stationarity
        message = "converged" if converged else (
            "constraints met, stationarity above tolerance" if merit_ok
            else "constraint residuals above tolerance"
        )
        return q, {
            "converged": converged,
            "residuals": rd,
            "stationarity": stat,
            "outer": outer_done,
            "evaluations": evaluations,
            "message": message,
        }


def _recover_control(curve: DiscretizedCurve, problem: StaticProblem) -> np.ndarray:
    """Control from the converged curvature: u = sign(kappa) |q_ss| / omega_bar.

    Using |q_ss| rather than the signed-curvature magnitude makes the control
    energy equal the bending energy identically at the discrete level.
    """
    C = curve.second_derivative()
    kappa = signed_curvature(curve)
    mag = np.linalg.norm(C, axis=1)
    u = np.zeros(curve.grid.n_nodes)
    act = problem.active
    u[act] = np.sign(np.where(kappa[act] == 0.0, 1.0, kappa[act])) * mag[act] / problem.omega_bar[act]
    if not problem.drop_curvature_bound:
        u = np.clip(u, -1.0, 1.0)
    return u


def solve_static_reachability(problem: StaticProblem, options: SolverOptions | None = None,
                              initial_curve: DiscretizedCurve | None = None):
    """Minimize the elastica form of the reachability cost.

    Returns ``(control, curve, report)``; raises NonConvergenceError when the
    constraint/stationarity targets are not met within the caps (unless
    ``options.raise_on_failure`` is off).
    """
    opts = options or SolverOptions()
    tau = problem.params.tau
    target = problem.target
    tip = problem.grid.n_nodes - 1

    def task(q):
        diff = q[tip] - target
        val = 0.5 / tau * float(diff @ diff)
        grad = np.zeros_like(q)
        grad[tip] = diff / tau
        return val, grad

    def task_gn_hess(q):
        blocks = np.zeros((problem.grid.n_nodes, 2, 2))
        blocks[tip] = np.eye(2) / tau
        return blocks

    started = time.perf_counter()
    engine = _ElasticaAL(problem, task, opts, task_gn_hess=task_gn_hess)
    if initial_curve is not None:
        q0 = initial_curve.points
    else:
        # Straight rest state, then a bounded descent in the control variable
        # to carry the curve through the nonconvex approach cheaply.
        u_ws = _warm_start_control(problem, task)
        q0 = integrate_shape(u_ws, problem).points
    q, info = engine.solve(q0)
    curve = DiscretizedCurve(q, problem.grid)
    u = _recover_control(curve, problem)
    energy = control_energy(u, problem)
    tip_term = 0.5 / tau * float(np.sum((curve.tip - target) ** 2))
    C = curve.second_derivative()
    bend = 0.5 * float(np.sum(engine.bend_w * np.einsum("ij,ij->i", C, C)))
    report = ConvergenceReport(
        converged=info["converged"],
        outer_iterations=info["outer"],
        inner_evaluations=info["evaluations"],
        cost=bend + tip_term,
        cost_components={
            "curvature_energy": bend,
            "control_energy": energy,
            "tip_penalty": tip_term,
            "tip_distance": float(np.linalg.norm(curve.tip - target)),
        },
        residuals=info["residuals"],
        stationarity=info["stationarity"],
        runtime=time.perf_counter() - started,
        message=info["message"],
    )
    if not report.converged and opts.raise_on_failure:
        raise NonConvergenceError(
            f"static solve did not converge: {info['message']} "
            f"(residuals {report.residuals})",
            report=report,
            curve=curve,
        )
    control = ControlField(u, problem.grid, problem.mask,
                           enforce_bound=not problem.drop_curvature_bound)
    return control, curve, report
