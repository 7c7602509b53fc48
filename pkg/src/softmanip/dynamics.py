"""Forward dynamics of the controlled fourth-order rod system.

Semi-discrete formulation: nodal forces are exact gradients of the discrete
elastic energy (trapezoid-weighted), so the free-end moment/shear conditions
are natural conditions of the discretization and the damped system has a
discrete energy law.  The anchor clamp pins the first two nodes.

Inextensibility is enforced by per-link tension multipliers obtained from an
acceleration-level index reduction (a tridiagonal solve), plus RATTLE-style
position/velocity projections that keep the link residual at machine level.
Time stepping is velocity Verlet (kick-drift-kick); when the requested step
exceeds the explicit stability bound of the stiff bending operator the
integrator subdivides it internally, keeping controls, storage and cost
quadrature on the requested step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_banded

_pttrf, _pttrs = get_lapack_funcs(("pttrf", "pttrs"), (np.empty(1),))

from .core import (
    ControlField,
    DiscretizedCurve,
    Grid,
    Mask,
    ModelParams,
    cross2,
    perp,
    positive_part,
)

__all__ = [
    "TimeGrid",
    "ForwardRun",
    "InstabilityError",
    "RodDynamics",
    "internal_forces",
    "solve_tension",
    "simulate",
]


class InstabilityError(RuntimeError):
    """Integration blew up; carries the failing step index."""

    def __init__(self, message, step: int):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid: n_steps steps of size dt, T = dt * n_steps."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")

    @property
    def duration(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class ForwardRun:
    """Trajectory storage plus per-step diagnostics."""

    grid: Grid
    time_grid: TimeGrid
    times: np.ndarray          # stored instants
    q: np.ndarray              # (n_stored, n, 2)
    v: np.ndarray              # (n_stored, n, 2)
    sigma: np.ndarray          # (n_stored, n) nodal tension
    diagnostics: dict = field(default_factory=dict)
    substeps: int = 1
    full_q: np.ndarray | None = None   # (n_sub_total+1, n, 2) when retained
    full_v: np.ndarray | None = None

    @property
    def final_curve(self) -> DiscretizedCurve:
        return DiscretizedCurve(self.q[-1], self.grid)

    @property
    def final_velocity(self) -> np.ndarray:
        return self.v[-1]

    def max_link_residual(self) -> float:
        return float(np.max(self.diagnostics["link_residual"]))


class RodDynamics:
    """Assembled operators and the velocity-Verlet stepper for one problem."""

    def __init__(self, params: ModelParams, mask: Mask | None = None):
        self.mask = mask if mask is not None else Mask.none()
        self.params = params.masked(self.mask)
        self.grid = params.grid
        grid = self.grid
        n = grid.n_nodes
        if n < 5:
            raise ValueError("dynamics needs at least 5 nodes")
        self.n = n
        self.ds = grid.ds
        self.D1 = grid.diff_matrix(1)
        self.D2 = grid.diff_matrix(2)
        self.w = grid.weights
        p = self.params
        self.mass = self.w * p.rho                       # nodal masses
        self.beta_w = self.w * p.beta
        self.Gamma = self.D2.T @ (np.diag(self.w * p.gamma) @ self.D2)
        # links 1..n-2 carry multipliers (link 0 joins the two pinned nodes)
        self.n_links = n - 2
        self.q_head = np.array([[0.0, 0.0], [0.0, -self.ds]])
        self._minv_nodes = 1.0 / self.mass
        self._mass_lo_inv = self._minv_nodes[1:-1].copy()
        self._mass_lo_inv[0] = 0.0  # node 1 is pinned

    # -- elastic energy and force ------------------------------------------------

    def elastic_energy(self, q: np.ndarray, u: np.ndarray) -> float:
        p = self.params
        C = self.D2 @ q
        T = self.D1 @ q
        kappa = cross2(T, C)
        c2 = np.einsum("ij,ij->i", C, C)
        dens = (
            0.25 * p.nu * positive_part(c2 - p.omega**2) ** 2
            + 0.5 * p.eps * c2
            + 0.5 * p.mu * (p.omega * u - kappa) ** 2
        )
        return float(np.dot(self.w, dens))

    def bending_energy(self, q: np.ndarray) -> float:
        C = self.D2 @ q
        return 0.5 * float(np.dot(self.w * self.params.eps, np.einsum("ij,ij->i", C, C)))

    def elastic_force(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Exact negative gradient of the elastic energy (weighted nodal force)."""
        p = self.params
        C = self.D2 @ q
        T = self.D1 @ q
        kappa = cross2(T, C)
        c2 = np.einsum("ij,ij->i", C, C)
        G = p.eps + p.nu * positive_part(c2 - p.omega**2)
        H = p.mu * (p.omega * u - kappa)
        dE_dC = (self.w * G)[:, None] * C + (self.w * H)[:, None] * perp(T)
        dE_dT = -(self.w * H)[:, None] * perp(C)
        return -(self.D2.T @ dE_dC + self.D1.T @ dE_dT)

    def linearized_coefficient_maps(self, q, u, d):
        """(Gbar, Hbar): exact directional derivatives of G and H along d."""
        p = self.params
        C = self.D2 @ q
        T = self.D1 @ q
        Cd = self.D2 @ d
        Td = self.D1 @ d
        c2 = np.einsum("ij,ij->i", C, C)
        gate = np.where(c2 - p.omega**2 >= 0.0, 1.0, 0.0)
        Gbar = 2.0 * p.nu * gate * np.einsum("ij,ij->i", C, Cd)
        Hbar = -p.mu * (cross2(Td, C) + cross2(T, Cd))
        return Gbar, Hbar

    def elastic_force_linearized(self, q, u, d) -> np.ndarray:
        """Directional derivative of elastic_force at (q, u) along d.

        Exact Hessian action (the force is a gradient, so this operator is
        symmetric); used as the frozen-plus-linearized elastic terms of the
        backward (adjoint) system.
        """
        p = self.params
        C = self.D2 @ q
        T = self.D1 @ q
        Cd = self.D2 @ d
        Td = self.D1 @ d
        kappa = cross2(T, C)
        c2 = np.einsum("ij,ij->i", C, C)
        G = p.eps + p.nu * positive_part(c2 - p.omega**2)
        H = p.mu * (p.omega * u - kappa)
        Gbar, Hbar = self.linearized_coefficient_maps(q, u, d)
        dE_dC = (self.w * G)[:, None] * Cd + (self.w * Gbar)[:, None] * C \
            + (self.w * H)[:, None] * perp(Td) + (self.w * Hbar)[:, None] * perp(T)
        dE_dT = -(self.w * H)[:, None] * perp(Cd) - (self.w * Hbar)[:, None] * perp(C)
        return -(self.D2.T @ dE_dC + self.D1.T @ dE_dT)

    # -- tension ---------------------------------------------------------------

    def _link_geometry(self, q: np.ndarray):
        e = np.diff(q, axis=0)  # all links 0..n-2
        return e

    def tension_factorization(self, q: np.ndarray):
        """Prefactored (J M^-1 J^T) for the solved links 1..n-2.

        J rows: link k depends on nodes k, k+1 (global k = 1..n-2); node 1 is
        pinned, so link 1 couples only through node 2.
        """
        e = self._link_geometry(q)[1:]
        e2 = np.einsum("ij,ij->i", e, e)
        # lower node of solved link j is node j+1 (pinned for j=0), upper j+2
        diag = (self._mass_lo_inv + self._minv_nodes[2:]) * e2 / self.ds**4
        off = -self._minv_nodes[2:-1] * np.einsum("ij,ij->i", e[:-1], e[1:]) / self.ds**4
        d, ee, info = _pttrf(diag, off)
        if info != 0:
            raise RuntimeError(f"tension system factorization failed (info={info})")
        return (d, ee), e

    def _tension_solve(self, fac, rhs: np.ndarray) -> np.ndarray:
        d, ee = fac
        x, info = _pttrs(d, ee, rhs)
        if info != 0:
            raise RuntimeError(f"tension solve failed (info={info})")
        return x

    def _constraint_force(self, e: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """J^T lam as a nodal force field (e = solved-link vectors)."""
        F = np.zeros((self.n, 2))
        scaled = lam[:, None] * e / self.ds**2
        F[2:] += scaled
        F[1:-1] -= scaled
        return F

    def tension_multipliers(self, q, v, F, fac_e=None) -> np.ndarray:
        """Link multipliers solving (J M^-1 J^T) lam = -rate - J M^-1 F."""
        fac, e = fac_e if fac_e is not None else self.tension_factorization(q)
        acc0 = F * self._minv_nodes[:, None]
        acc0[:2] = 0.0
        jacc = np.einsum("ij,ij->i", e, np.diff(acc0, axis=0)[1:]) / self.ds**2
        ev = np.diff(v, axis=0)[1:]
        rate = np.einsum("ij,ij->i", ev, ev) / self.ds**2
        return self._tension_solve(fac, -rate - jacc)

    def nodal_sigma(self, lam: np.ndarray) -> np.ndarray:
        """Nodal tension from link multipliers; zero at the free tip.

        The multiplier of the squared-length constraint relates to the
        physical tension by sigma = -lam / ds.
        """
        sig_link = -lam / self.ds
        sig = np.zeros(self.n)
        sig[2 : self.n - 1] = 0.5 * (sig_link[:-1] + sig_link[1:])
        if self.n_links > 1:
            sig[1] = 1.5 * sig_link[0] - 0.5 * sig_link[1]
        else:
            sig[1] = sig_link[0]
        sig[0] = sig[1]
        sig[self.n - 1] = 0.0
        return sig

    # -- projections -------------------------------------------------------------

    def project_positions(self, q: np.ndarray, fac_e=None) -> np.ndarray:
        """SHAKE-style Newton projection of link lengths (fixed Jacobian)."""
        fac, e_ref = fac_e if fac_e is not None else self.tension_factorization(q)
        for _ in range(4):
            e = self._link_geometry(q)[1:]
            c = 0.5 * (np.einsum("ij,ij->i", e, e) / self.ds**2 - 1.0)
            if float(np.max(np.abs(c))) < 1e-14:
                break
            delta = self._tension_solve(fac, -c)
            q = q + self._constraint_force(e_ref, delta) * self._minv_nodes[:, None]
            q[:2] = self.q_head
        return q

    def project_velocities(self, q: np.ndarray, v: np.ndarray, fac_e=None) -> np.ndarray:
        """Remove the constraint-violating velocity component (RATTLE)."""
        fac, e = fac_e if fac_e is not None else self.tension_factorization(q)
        jv = np.einsum("ij,ij->i", e, np.diff(v, axis=0)[1:]) / self.ds**2
        eta = self._tension_solve(fac, -jv)
        v = v + self._constraint_force(e, eta) * self._minv_nodes[:, None]
        v[:2] = 0.0
        return v

    # -- acceleration and stepping -------------------------------------------------

    def nonconstraint_force(self, q, v, u) -> np.ndarray:
        return self.elastic_force(q, u) - self.beta_w[:, None] * v - self.Gamma @ v

    def acceleration(self, q, v, u, fac_e=None):
        F = self.nonconstraint_force(q, v, u)
        fac_e = fac_e if fac_e is not None else self.tension_factorization(q)
        lam = self.tension_multipliers(q, v, F, fac_e)
        a = (F + self._constraint_force(fac_e[1], lam)) / self.mass[:, None]
        a[:2] = 0.0
        return a, lam

    def substep(self, q, v, u, dt, fac_e=None):
        """One velocity-Verlet step; returns the next state and its factorization."""
        fac_e = fac_e if fac_e is not None else self.tension_factorization(q)
        a1, lam = self.acceleration(q, v, u, fac_e)
        vh = v + 0.5 * dt * a1
        q2 = self.project_positions(q + dt * vh)
        fac_e2 = self.tension_factorization(q2)
        a2, _ = self.acceleration(q2, vh, u, fac_e2)
        v2 = self.project_velocities(q2, vh + 0.5 * dt * a2, fac_e2)
        return q2, v2, lam, fac_e2

    # -- reverse-mode (adjoint) machinery ------------------------------------------

    def _links_of(self, x: np.ndarray) -> np.ndarray:
        """Solved-link difference vectors of any nodal field."""
        return np.diff(x, axis=0)[1:]

    def _pair_force(self, d: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Generalized J^T: nodal field x -> sum_k lam_k d_k . links(x)_k / ds^2."""
        return self._constraint_force(d, lam)

    def _apply_D(self, x: np.ndarray) -> np.ndarray:
        """Mobility: M^-1 with the pinned rows zeroed."""
        out = x * self._minv_nodes[:, None]
        out[:2] = 0.0
        return out

    def _J_apply(self, e: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", e, self._links_of(x)) / self.ds**2

    def _ts_matvec_weights(self):
        """Per-link mobility weights of TS = J D J^T (lower node, upper node)."""
        return self._mass_lo_inv, self._minv_nodes[2:]

    def _dTS_bilinear_force(self, q, xi, eta, e):
        """Force field representing x -> xi^T dTS(q)[x] eta.

        TS entries are quadratic in the link vectors; the derivative pairs
        each link with itself (diagonal) and with its neighbors (off
        diagonal).
        """
        mlo, mhi = self._ts_matvec_weights()
        msh = self._minv_nodes[2:-1]
        # diagonal: (mlo+mhi) |e_j|^2 / ds^4 -> 2 (mlo+mhi) xi_j eta_j e_j / ds^4
        lam_self = 2.0 * (mlo + mhi) * xi * eta / self.ds**2
        F = self._pair_force(e, lam_self)
        # off diagonal j,j+1: -msh (e_j . e_{j+1}) / ds^4
        cross = -(msh * (xi[:-1] * eta[1:] + xi[1:] * eta[:-1])) / self.ds**2
        # derivative hits e_j (paired with e_{j+1}) and e_{j+1} (paired with e_j)
        lam_lo = np.zeros_like(lam_self)
        lam_hi = np.zeros_like(lam_self)
        lam_lo[:-1] = cross      # weight on links j, direction e_{j+1}
        lam_hi[1:] = cross       # weight on links j+1, direction e_j
        d_lo = np.zeros_like(e)
        d_hi = np.zeros_like(e)
        d_lo[:-1] = e[1:]
        d_hi[1:] = e[:-1]
        F += self._pair_force(d_lo, lam_lo)
        F += self._pair_force(d_hi, lam_hi)
        return F

    def _control_coupling_transpose(self, q: np.ndarray, x: np.ndarray) -> np.ndarray:
        """(dF_el/du)^T x as a nodal scalar field.

        dF_el/du_i perturbs only the control coefficient; the transpose is
        w_i mu_i omega_i times the curvature linearization of x.
        """
        p = self.params
        C = self.D2 @ q
        T = self.D1 @ q
        Cx = self.D2 @ x
        Tx = self.D1 @ x
        dkappa = cross2(Tx, C) + cross2(T, Cx)
        return self.w * p.mu * p.omega * dkappa

    def _accel_vjp(self, q, v, u, xbar, fac_e=None):
        """Reverse of a = D(F(q,v,u) + J(q)^T lam(q,v,u)) for covector xbar.

        Returns (qbar, vbar, ubar) contributions and the multiplier lam for
        reuse.  F = F_el(q,u) - (W_beta + Gamma) v;  lam = TS^{-1}(-rate(v) -
        J D F).
        """
        fac, e = fac_e if fac_e is not None else self.tension_factorization(q)
        F = self.nonconstraint_force(q, v, u)
        lam = self.tension_multipliers(q, v, F, (fac, e))

        z = self._apply_D(xbar)                 # D xbar
        # a = D F + D J^T lam
        # (1) direct F path ................ Fbar += z
        # (2) J^T lam path: d(J^T lam) = dJ^T lam + J^T dlam
        #     xbar . D dJ^T[dx] lam = dx . pair_force(links(z), lam)
        qbar = self._pair_force(self._links_of(z), lam)
        # dlam = TS^{-1}(-d rate - dJ D F - J D dF - dTS lam)
        y = self._J_apply(e, z)                 # J z
        xi = self._tension_solve(fac, y)        # TS^{-1} J z
        # -d rate(v)[dv] = -2 links(v).links(dv)/ds^2 -> vbar -= 2 pair(links(v), xi)
        vbar = -2.0 * self._pair_force(self._links_of(v), xi)
        # -dJ[dx] D F term: -(links(dx) . links(DF))/ds^2 against xi
        DF = self._apply_D(F)
        qbar -= self._pair_force(self._links_of(DF), xi)
        # -J D dF term: Fbar -= D J^T xi
        Fbar = z - self._apply_D(self._constraint_force(e, xi))
        # -dTS[dx] lam term against xi
        qbar -= self._dTS_bilinear_force(q, xi, lam, e)

        # F = F_el(q, u) - (W_beta + Gamma) v: transpose through Fbar
        qbar += self.elastic_force_linearized(q, u, Fbar)  # symmetric Hessian
        ubar = self._control_coupling_transpose(q, Fbar)
        vbar -= self.beta_w[:, None] * Fbar + self.Gamma @ Fbar
        return qbar, vbar, ubar, lam

    def _pos_projection_vjp(self, qhat, q2, qbar2, fac_e_hat=None):
        """Exact transpose of the converged length projection q2(qhat).

        The projection satisfies q2 = qhat + D J(qhat)^T mu with c(q2) = 0, so
        mu = TS(qhat)^{-1} J(qhat)(q2 - qhat) exactly.  Implicit
        differentiation gives
            dq2 = [I - D J(qhat)^T G^{-1} J(q2)] (I + L_mu) dqhat,
        with G = J(q2) D J(qhat)^T (nonsymmetric tridiagonal) and
        L_mu dx = D * pair_force(links(dx), mu).
        """
        fac, e_hat = fac_e_hat if fac_e_hat is not None else self.tension_factorization(qhat)
        e2 = self._links_of(q2)
        mu = self._tension_solve(fac, self._J_apply(e_hat, q2 - qhat))

        # Solve G^T w = J(qhat) D qbar2 where G^T = J(qhat) D J(q2)^T.
        mlo, mhi = self._ts_matvec_weights()
        msh = self._minv_nodes[2:-1]
        m = self.n_links
        bands = np.zeros((3, m))
        bands[1] = (mlo + mhi) * np.einsum("ij,ij->i", e_hat, e2) / self.ds**4
        bands[0, 1:] = -msh * np.einsum("ij,ij->i", e_hat[:-1], e2[1:]) / self.ds**4
        bands[2, :-1] = -msh * np.einsum("ij,ij->i", e_hat[1:], e2[:-1]) / self.ds**4
        rhs = self._J_apply(e_hat, self._apply_D(qbar2))
        w = solve_banded((1, 1), bands, rhs)
        y = qbar2 - self._constraint_force(e2, w)
        # multiplier-size correction (I + L_mu)^T
        return y + self._pair_force(self._links_of(self._apply_D(y)), mu)

    def _vel_projection_vjp(self, q2, vhat, vbar2, fac_e=None):
        """Transpose of v2 = (I - D J^T TS^{-1} J) vhat plus its q2 coupling."""
        fac, e = fac_e if fac_e is not None else self.tension_factorization(q2)
        jv = self._J_apply(e, vhat)
        eta = self._tension_solve(fac, -jv)

        z = self._apply_D(vbar2)
        y = self._J_apply(e, z)
        xi = self._tension_solve(fac, y)
        vbar = vbar2 - self._pair_force(e, xi)
        # q2-coupling: v2 = vhat + D J(q2)^T eta(q2)
        qbar = self._pair_force(self._links_of(z), eta)
        qbar -= self._pair_force(self._links_of(vhat), xi)
        qbar -= self._dTS_bilinear_force(q2, xi, eta, e)
        return qbar, vbar

    def substep_vjp(self, q, v, u, dt, qbar2, vbar2):
        """Exact reverse of ``substep``: maps output covectors to input ones.

        Re-runs the forward stages to recover intermediates, then applies the
        transposed chain.  Returns (qbar, vbar, ubar).
        """
        # forward stages (factorizations shared with the reverse passes)
        fac_e = self.tension_factorization(q)
        a1, _ = self.acceleration(q, v, u, fac_e)
        vh = v + 0.5 * dt * a1
        qhat = q + dt * vh
        fac_hat = self.tension_factorization(qhat)
        q2 = self.project_positions(qhat, fac_hat)
        fac_e2 = self.tension_factorization(q2)
        a2, _ = self.acceleration(q2, vh, u, fac_e2)
        vhat2 = vh + 0.5 * dt * a2

        # reverse: stage D (velocity projection)
        qb2_add, vbar_hat = self._vel_projection_vjp(q2, vhat2, vbar2, fac_e2)
        qbar2 = qbar2 + qb2_add
        # stage C: vhat2 = vh + dt/2 a(q2, vh, u)
        qb_c, vb_c, ub_c, _ = self._accel_vjp(q2, vh, u, 0.5 * dt * vbar_hat, fac_e2)
        qbar2 = qbar2 + qb_c
        vbar_h = vbar_hat + vb_c
        ubar = ub_c
        # stage B: q2 = P(qhat), qhat = q + dt vh
        qbar_hat = self._pos_projection_vjp(qhat, q2, qbar2, fac_hat)
        qbar = qbar_hat.copy()
        vbar_h = vbar_h + dt * qbar_hat
        # stage A: vh = v + dt/2 a(q, v, u)
        qb_a, vb_a, ub_a, _ = self._accel_vjp(q, v, u, 0.5 * dt * vbar_h, fac_e)
        qbar = qbar + qb_a
        vbar = vbar_h + vb_a
        ubar = ubar + ub_a
        # pinned rows carry no sensitivity
        qbar[:2] = 0.0
        vbar[:2] = 0.0
        return qbar, vbar, ubar

    # -- stability ------------------------------------------------------------------

    def stiffness_spectral_bound(self) -> float:
        """Largest frequency of the linearized elastic operator (power iteration).

        The bending coefficient is taken at a curvature overshoot of twice the
        maximal one, G <= eps + 3 nu omega^2, so the step budget also covers
        transients where the curvature penalty hardens the rod; otherwise
        controls near the box bound can push modes across the explicit
        stability edge (the trajectory may survive while its linearization,
        and with it the adjoint sweep, explodes).
        """
        p = self.params
        stiff = self.w * (p.eps + p.mu + 3.0 * p.nu * p.omega**2)
        K = self.D2.T @ (np.diag(stiff) @ self.D2)
        minv = 1.0 / self.mass
        rng = np.random.default_rng(12345)
        x = rng.normal(size=(self.n, 2))
        x[:2] = 0.0
        lam = 0.0
        for _ in range(80):
            y = (K @ x) * minv[:, None]
            y[:2] = 0.0
            norm = float(np.linalg.norm(y))
            if norm == 0.0:
                return 0.0
            lam = norm / float(np.linalg.norm(x))
            x = y / norm
        return math.sqrt(lam)

    def stable_substeps(self, dt: float, safety: float = 0.7) -> int:
        """Substeps needed so each internal step obeys dt_sub <= safety*2/omega_max.

        The classical heuristic dt <= c * ds^2 * sqrt(min rho / max stiffness)
        gives the same scaling; the spectral bound replaces the constant.
        """
        omega_max = self.stiffness_spectral_bound()
        if omega_max == 0.0:
            return 1
        dt_stable = safety * 2.0 / omega_max
        return max(1, math.ceil(dt / dt_stable))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def internal_forces(curve: DiscretizedCurve, sigma, control, params: ModelParams) -> np.ndarray:
    """Nodal force density: tension, bending and control terms (no friction).

    ``sigma`` is the nodal tension field; it is averaged onto links before the
    conservative difference, matching how the solver applies multipliers.
    """
    dyn = RodDynamics(params)
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    q = curve.points
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (dyn.n,))
    sig_link = 0.5 * (sigma[1:-1] + sigma[2:])  # tension on links 1..n-2
    lam = -dyn.ds * sig_link
    e = dyn._link_geometry(q)[1:]
    F = dyn.elastic_force(q, u) + dyn._constraint_force(e, lam)
    return F / dyn.w[:, None]


def solve_tension(curve: DiscretizedCurve, velocity, control, params: ModelParams,
                  external_force=None) -> np.ndarray:
    """Nodal tension enforcing a vanishing second time derivative of |q_s|^2.

    ``external_force`` is an optional nodal force density added to the
    internal elastic force.
    """
    dyn = RodDynamics(params)
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    v = np.asarray(velocity, dtype=float)
    F = dyn.nonconstraint_force(curve.points, v, u)
    if external_force is not None:
        F = F + np.asarray(external_force, dtype=float) * dyn.w[:, None]
    lam = dyn.tension_multipliers(curve.points, v, F)
    return dyn.nodal_sigma(lam)


def simulate(q0: DiscretizedCurve, v0, control, params: ModelParams, time_grid: TimeGrid,
             mask: Mask | None = None, target=None, store_every: int = 1,
             keep_full: bool = False, substeps: int | None = None) -> ForwardRun:
    """Integrate the controlled rod over the time grid.

    ``control`` may be static (held constant) or space-time with one row per
    step.  Diagnostics sample the cost components at every step: squared
    tip-target distance, control energy and kinetic energy.
    """
    dyn = RodDynamics(params, mask)
    grid = dyn.grid
    n = dyn.n
    u = control if isinstance(control, ControlField) else ControlField(control, grid, mask)
    if u.is_dynamic and u.values.shape[0] != time_grid.n_steps:
        raise ValueError(
            f"dynamic control must have one row per step "
            f"({time_grid.n_steps}), got {u.values.shape[0]}"
        )

    q = q0.points.copy()
    if np.linalg.norm(q[0]) > 1e-9 or np.linalg.norm(q[1] - dyn.q_head[1]) > 1e-6:
        raise ValueError("initial curve must satisfy the anchor clamp")
    q[:2] = dyn.q_head
    q = dyn.project_positions(q)
    v = np.zeros_like(q) if v0 is None else np.asarray(v0, dtype=float).copy()
    v[:2] = 0.0
    v = dyn.project_velocities(q, v)

    n_sub = substeps if substeps is not None else dyn.stable_substeps(time_grid.dt)
    dt_sub = time_grid.dt / n_sub

    n_stored = time_grid.n_steps // store_every + 1
    times = np.empty(n_stored)
    qs = np.empty((n_stored, n, 2))
    vs = np.empty((n_stored, n, 2))
    sigmas = np.empty((n_stored, n))
    diag = {
        "link_residual": np.empty(time_grid.n_steps + 1),
        "tip_dist2": np.empty(time_grid.n_steps + 1),
        "tip_dist2_sub": np.empty(time_grid.n_steps * n_sub + 1),
        "control_energy": np.empty(time_grid.n_steps + 1),
        "kinetic_energy": np.empty(time_grid.n_steps + 1),
        "bending_energy": np.empty(time_grid.n_steps + 1),
        "elastic_energy": np.empty(time_grid.n_steps + 1),
    }
    if keep_full:
        full_q = np.empty((time_grid.n_steps * n_sub + 1, n, 2))
        full_v = np.empty_like(full_q)
        full_q[0] = q
        full_v[0] = v
    else:
        full_q = full_v = None

    tgt = None if target is None else np.asarray(target, dtype=float)

    def record_diag(k, q, v, u_now):
        e = np.diff(q, axis=0)
        diag["link_residual"][k] = float(np.max(np.abs(np.linalg.norm(e, axis=1) / dyn.ds - 1.0)))
        diag["tip_dist2"][k] = float(np.sum((q[-1] - tgt) ** 2)) if tgt is not None else 0.0
        diag["control_energy"][k] = float(np.dot(dyn.w, u_now**2))
        diag["kinetic_energy"][k] = 0.5 * float(np.sum(dyn.mass[:, None] * v * v))
        diag["bending_energy"][k] = dyn.bending_energy(q)
        diag["elastic_energy"][k] = dyn.elastic_energy(q, u_now)

    u0 = u.at_step(0)
    record_diag(0, q, v, u0)
    fac_e = dyn.tension_factorization(q)
    _, lam0 = dyn.acceleration(q, v, u0, fac_e)
    times[0] = 0.0
    qs[0], vs[0], sigmas[0] = q, v, dyn.nodal_sigma(lam0)
    stored = 1
    if tgt is not None:
        diag["tip_dist2_sub"][0] = float(np.sum((q[-1] - tgt) ** 2))
    else:
        diag["tip_dist2_sub"][0] = 0.0

    energy_cap = 1e6 * max(diag["elastic_energy"][0] + diag["kinetic_energy"][0], 1.0)
    for k in range(time_grid.n_steps):
        u_now = u.at_step(k)
        lam_last = None
        for j in range(n_sub):
            q, v, lam_last, fac_e = dyn.substep(q, v, u_now, dt_sub, fac_e)
            diag["tip_dist2_sub"][k * n_sub + j + 1] = (
                float(np.sum((q[-1] - tgt) ** 2)) if tgt is not None else 0.0
            )
            if keep_full:
                full_q[k * n_sub + j + 1] = q
                full_v[k * n_sub + j + 1] = v
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise InstabilityError(f"non-finite state at step {k + 1}", step=k + 1)
        record_diag(k + 1, q, v, u.at_step(min(k + 1, time_grid.n_steps - 1)))
        if diag["kinetic_energy"][k + 1] + diag["elastic_energy"][k + 1] > energy_cap:
            raise InstabilityError(f"energy blow-up at step {k + 1}", step=k + 1)
        if (k + 1) % store_every == 0:
            times[stored] = (k + 1) * time_grid.dt
            qs[stored], vs[stored] = q, v
            sigmas[stored] = dyn.nodal_sigma(lam_last)
            stored += 1

    run = ForwardRun(
        grid=grid,
        time_grid=time_grid,
        times=times[:stored],
        q=qs[:stored],
        v=vs[:stored],
        sigma=sigmas[:stored],
        diagnostics=diag,
        substeps=n_sub,
        full_q=full_q,
        full_v=full_v,
    )
    return run
