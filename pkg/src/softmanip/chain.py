"""Hyper-redundant N-link chain energies and their continuum counterpart.

The chain is the discrete particle model whose penalty potentials converge,
after the 1/ell scalings, to the continuum rod Lagrangian.  It is used as an
independent energy oracle: no chain dynamics are integrated here.

Joint layout: q_0..q_N with two ghost joints closing the end stencils,
q_{-1} = q_0 + ell*(0, 1) (clamps the anchor tangent to (0, -1)) and
q_{N+1} = q_N + (q_N - q_{N-1}) (straight continuation at the free end).

Cross products at a joint are taken as (incoming link) x (outgoing link),
which matches the continuum convention kappa = q_s x q_ss in the limit.
"""

from __future__ import annotations

import numpy as np

from .core import ControlField, DiscretizedCurve, Grid, ModelParams, cross2, positive_part

__all__ = [
    "LinkChain",
    "potential_F",
    "potential_G",
    "potential_B",
    "potential_H",
    "discrete_lagrangian",
    "continuum_lagrangian",
]


class LinkChain:
    """N rigid links of length ell = 1/N with nodal penalty samples.

    ``joints`` holds q_0..q_N ((N+1, 2)); profiles are sampled at s_k = k*ell.
    Controls u_k live in [-1, 1].
    """

    def __init__(self, joints, *, rho, omega, eps, nu, mu, controls=None):
        joints = np.asarray(joints, dtype=float)
        if joints.ndim != 2 or joints.shape[1] != 2 or joints.shape[0] < 2:
            raise ValueError("joints must be an (N+1, 2) array with N >= 1")
        self.joints = joints
        self.n_links = joints.shape[0] - 1
        self.ell = 1.0 / self.n_links
        n = joints.shape[0]
        s = np.linspace(0.0, 1.0, n)
        self.s = s

        def sample(p):
            return p(s) if callable(p) else np.broadcast_to(np.asarray(p, dtype=float), (n,)).copy()

        self.rho = sample(rho)
        self.omega = sample(omega)
        self.eps = sample(eps)
        self.nu = sample(nu)
        self.mu = sample(mu)
        self.masses = self.rho * self.ell
        self.angle_bounds = self.omega * self.ell
        if controls is None:
            controls = np.zeros(n)
        self.controls = sample(controls) if callable(controls) else np.asarray(controls, dtype=float)
        if np.any(np.abs(self.controls) > 1.0 + 1e-12):
            raise ValueError("chain controls must satisfy |u| <= 1")

    @classmethod
    def from_tangent_angle(cls, n_links: int, theta, *, anchor=(0.0, 0.0), **profiles) -> "LinkChain":
        """Build an admissible chain (exact link lengths) from a smooth tangent
        angle theta(s): link k points along theta evaluated at its midpoint."""
        ell = 1.0 / n_links
        mids = (np.arange(n_links) + 0.5) * ell
        ang = theta(mids)
        steps = ell * np.column_stack([np.cos(ang), np.sin(ang)])
        joints = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]) + np.asarray(anchor, dtype=float)
        return cls(joints, **profiles)

    def extended_joints(self) -> np.ndarray:
        """Joints with the two ghost closures prepended/appended."""
        q = self.joints
        ghost_head = q[0] + self.ell * np.array([0.0, 1.0])
        ghost_tail = q[-1] + (q[-1] - q[-2])
        return np.vstack([ghost_head, q, ghost_tail])

    def link_vectors(self) -> np.ndarray:
        """Link vectors l_k = q_{k+1} - q_k including ghost links, shape (N+2, 2).

        Row k is the link arriving at joint k (l[k] = q_k - q_{k-1}); the last
        row is the ghost continuation leaving joint N.
        """
        return np.diff(self.extended_joints(), axis=0)


def _joint_dots_and_crosses(chain: LinkChain):
    links = chain.link_vectors()
    incoming = links[:-1]  # q_k - q_{k-1} for k = 0..N
    outgoing = links[1:]   # q_{k+1} - q_k for k = 0..N
    dots = np.einsum("ij,ij->i", outgoing, incoming)
    crosses = cross2(incoming, outgoing)
    return dots, crosses


def potential_F(chain: LinkChain, sigma) -> float:
    """Inextensibility multiplier term: sum_k sigma_k (|q_k - q_{k-1}|^2 - ell^2)."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (chain.n_links,):
        raise ValueError(f"need one multiplier per link, got shape {sigma.shape}")
    lens2 = np.einsum("ij,ij->i", np.diff(chain.joints, axis=0), np.diff(chain.joints, axis=0))
    return float(np.sum(sigma * (lens2 - chain.ell**2)))


def potential_G(chain: LinkChain) -> float:
    """Relative-angle (curvature) penalty summed over joints."""
    dots, _ = _joint_dots_and_crosses(chain)
    viol = positive_part(np.cos(chain.angle_bounds) - dots / chain.ell**2)
    return float(np.sum(chain.nu * viol**2))


def potential_B(chain: LinkChain) -> float:
    """Bending-moment penalty summed over joints."""
    _, crosses = _joint_dots_and_crosses(chain)
    return float(np.sum(chain.eps * crosses**2))


def potential_H(chain: LinkChain) -> float:
    """Curvature-control penalty summed over joints."""
    _, crosses = _joint_dots_and_crosses(chain)
    target = np.sin(chain.angle_bounds * chain.controls)
    return float(np.sum(chain.mu * (target - crosses / chain.ell**2) ** 2))


def discrete_lagrangian(chain: LinkChain, velocities, sigma) -> float:
    """Chain Lagrangian: kinetic energy minus the 1/ell-scaled potentials."""
    velocities = np.asarray(velocities, dtype=float)
    if velocities.shape != chain.joints.shape:
        raise ValueError("need one velocity per joint")
    ell = chain.ell
    kinetic = 0.5 * float(np.sum(chain.masses * np.einsum("ij,ij->i", velocities, velocities)))
    return (
        kinetic
        - potential_F(chain, sigma) / (2.0 * ell)
        - potential_G(chain) / ell**3
        - potential_B(chain) / (2.0 * ell**5)
        - potential_H(chain) / (2.0 * ell)
    )


def continuum_lagrangian(curve: DiscretizedCurve, velocity, sigma, control, params: ModelParams) -> float:
    """Trapezoid quadrature of the continuum rod Lagrangian density.

    Integrand: 1/2 rho |q_t|^2 - 1/2 sigma (|q_s|^2 - 1)
               - 1/4 nu (|q_ss|^2 - omega^2)_+^2 - 1/2 eps |q_ss|^2
               - 1/2 mu (omega u - q_s x q_ss)^2.
    """
    grid = curve.grid
    velocity = np.asarray(velocity, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (grid.n_nodes,))
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    qs = curve.tangent()
    qss = curve.second_derivative()
    kappa = cross2(qs, qss)
    qss2 = np.einsum("ij,ij->i", qss, qss)
    density = (
        0.5 * params.rho * np.einsum("ij,ij->i", velocity, velocity)
        - 0.5 * sigma * (np.einsum("ij,ij->i", qs, qs) - 1.0)
        - 0.25 * params.nu * positive_part(qss2 - params.omega**2) ** 2
        - 0.5 * params.eps * qss2
        - 0.5 * params.mu * (params.omega * u - kappa) ** 2
    )
    return grid.integrate(density)
