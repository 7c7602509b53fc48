"""Grids, finite-difference calculus and the value types shared by all solvers.

Everything lives on a uniform arclength grid over [0, 1] (the manipulator has
unit length).  Planar orientation convention used throughout the package:

    perp((x, y)) = (y, -x)          (clockwise quarter turn)
    cross2(a, b) = a . perp(b) = a_x b_y - a_y b_x

so cross2 agrees with the z-component of the 3-D cross product, and the signed
curvature kappa = cross2(q_s, q_ss) equals the arclength derivative of the
tangent angle: kappa > 0 bends counterclockwise.  A positive control bends the
arm toward positive x when hanging from the anchor along (0, -1).
"""

from __future__ import annotations

import math
import warnings
from fractions import Fraction
from functools import lru_cache

import numpy as np

__all__ = [
    "Grid",
    "GridSizeError",
    "DiscretizedCurve",
    "ControlField",
    "ModelParams",
    "Mask",
    "perp",
    "cross2",
    "positive_part",
    "heaviside",
    "signed_curvature",
    "reaction_G",
    "control_H",
    "d1",
    "d2",
    "d3",
    "d4",
]


class GridSizeError(ValueError):
    """Grid too small for the requested finite-difference stencil."""


# ---------------------------------------------------------------------------
# Finite-difference machinery
# ---------------------------------------------------------------------------

# Central stencil half-widths per derivative order.  Odd orders need five
# points for second-order accuracy, even orders get it from three/five by
# symmetry.
_CENTRAL_HALF_WIDTH = {1: 1, 2: 1, 3: 2, 4: 2}


def _solve_exact(matrix, rhs):
    """Gaussian elimination over exact rationals (tiny systems only)."""
    n = len(rhs)
    a = [row[:] + [rhs[i]] for i, row in enumerate(matrix)]
    for col in range(n):
        piv = next(r for r in range(col, n) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        inv = Fraction(1, 1) / a[col][col]
        a[col] = [x * inv for x in a[col]]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [a[r][n] for r in range(n)]


@lru_cache(maxsize=None)
def _fd_weights(offsets: tuple, order: int) -> tuple:
    """Stencil weights for the ``order``-th derivative at offset 0.

    Solves the Vandermonde moment conditions exactly in rational arithmetic,
    so small-integer stencils (e.g. (1, -2, 1)) come out bit-exact and
    constants differentiate to exactly zero for orders >= 2.
    """
    p = len(offsets)
    mat = [[Fraction(k) ** r for k in offsets] for r in range(p)]
    rhs = [Fraction(0)] * p
    rhs[order] = Fraction(math.factorial(order))
    return tuple(float(c) for c in _solve_exact(mat, rhs))


@lru_cache(maxsize=None)
def _diff_matrix_unit(n: int, order: int) -> np.ndarray:
    """Differentiation matrix on n nodes with unit spacing.

    Second-order central stencils in the interior, (order+2)-point one-sided
    or biased stencils at nodes where the central one does not fit.
    """
    if order not in _CENTRAL_HALF_WIDTH:
        raise ValueError(f"unsupported derivative order {order}")
    if n < order + 1:
        raise GridSizeError(
            f"need at least {order + 1} nodes for derivative order {order}, got {n}"
        )
    width = min(order + 2, n)
    half = _CENTRAL_HALF_WIDTH[order]
    mat = np.zeros((n, n))
    central = tuple(range(-half, half + 1))
    for i in range(n):
        if i - half >= 0 and i + half <= n - 1:
            w = _fd_weights(central, order)
            mat[i, i - half : i + half + 1] = w
        else:
            start = 0 if i < half else n - width
            offs = tuple(j - i for j in range(start, start + width))
            mat[i, start : start + width] = _fd_weights(offs, order)
    mat.flags.writeable = False
    return mat


class Grid:
    """Uniform arclength grid s_i = i * ds on [0, 1], ds = 1/(n_nodes - 1)."""

    def __init__(self, n_nodes: int):
        if n_nodes < 2:
            raise GridSizeError("a grid needs at least two nodes")
        self.n_nodes = int(n_nodes)
        self.ds = 1.0 / (self.n_nodes - 1)
        self.s = np.linspace(0.0, 1.0, self.n_nodes)
        self.s.flags.writeable = False
        # Trapezoid quadrature weights.
        w = np.full(self.n_nodes, self.ds)
        w[0] = w[-1] = 0.5 * self.ds
        w.flags.writeable = False
        self.weights = w

    @classmethod
    def from_spacing(cls, ds: float) -> "Grid":
        n = round(1.0 / ds) + 1
        if not math.isclose((n - 1) * ds, 1.0, rel_tol=1e-9):
            raise GridSizeError(f"spacing {ds} does not divide the unit length")
        return cls(n)

    def diff_matrix(self, order: int) -> np.ndarray:
        return _diff_matrix_unit(self.n_nodes, order) / self.ds**order

    def diff(self, field: np.ndarray, order: int) -> np.ndarray:
        """Differentiate a nodal scalar (n,) or vector (n, 2) field."""
        field = np.asarray(field, dtype=float)
        if field.shape[0] != self.n_nodes:
            raise ValueError(
                f"field has {field.shape[0]} samples, grid has {self.n_nodes} nodes"
            )
        return self.diff_matrix(order) @ field

    def integrate(self, field: np.ndarray) -> float:
        """Trapezoid quadrature of a nodal scalar field."""
        return float(np.dot(self.weights, np.asarray(field, dtype=float)))

    def __eq__(self, other):
        return isinstance(other, Grid) and other.n_nodes == self.n_nodes

    def __hash__(self):
        return hash(("Grid", self.n_nodes))

    def __repr__(self):
        return f"Grid(n_nodes={self.n_nodes})"


def d1(field, grid: Grid):
    return grid.diff(field, 1)


def d2(field, grid: Grid):
    return grid.diff(field, 2)


def d3(field, grid: Grid):
    return grid.diff(field, 3)


def d4(field, grid: Grid):
    return grid.diff(field, 4)


# ---------------------------------------------------------------------------
# Planar geometry helpers
# ---------------------------------------------------------------------------


def perp(a):
    """Clockwise orthogonal vector: perp((x, y)) = (y, -x).  Works on (..., 2)."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[..., 0] = a[..., 1]
    out[..., 1] = -a[..., 0]
    return out


def cross2(a, b):
    """Planar cross product a x b := a . perp(b) = a_x b_y - a_y b_x."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def positive_part(x):
    """(x)_+ = max(x, 0)."""
    return np.maximum(x, 0.0)


def heaviside(x):
    """Unit step with the convention heaviside(0) = 1."""
    return np.where(np.asarray(x, dtype=float) >= 0.0, 1.0, 0.0)


# ---------------------------------------------------------------------------
# Deactivation masks
# ---------------------------------------------------------------------------


class Mask:
    """Arclength set I where the control is deactivated (mu = 0, u = 0).

    Either a union of closed intervals, or the complement of a finite set of
    actuated points (points snap to grid nodes).
    """

    def __init__(self, intervals=(), active_points=None):
        self.intervals = tuple((float(a), float(b)) for a, b in intervals)
        for a, b in self.intervals:
            if b < a:
                raise ValueError(f"empty mask interval ({a}, {b})")
        self.active_points = (
            None if active_points is None else tuple(float(p) for p in active_points)
        )
        if self.active_points is not None and self.intervals:
            raise ValueError("mask is either intervals or complement of points")

    @classmethod
    def none(cls) -> "Mask":
        return cls()

    @classmethod
    def all_but_points(cls, points) -> "Mask":
        return cls(active_points=points)

    def deactivated(self, grid: Grid) -> np.ndarray:
        """Boolean nodal indicator of I."""
        s = grid.s
        if self.active_points is not None:
            out = np.ones(grid.n_nodes, dtype=bool)
            for p in self.active_points:
                idx = int(round(p / grid.ds))
                idx = min(max(idx, 0), grid.n_nodes - 1)
                moved = abs(s[idx] - p)
                if moved > 0.5 * grid.ds + 1e-12:
                    warnings.warn(
                        f"actuated point {p} snapped to node {s[idx]:.6g} "
                        f"(moved {moved:.3g} > ds/2)"
                    )
                out[idx] = False
            return out
        out = np.zeros(grid.n_nodes, dtype=bool)
        tol = 1e-9
        for a, b in self.intervals:
            out |= (s >= a - tol) & (s <= b + tol)
        return out

    def is_empty(self) -> bool:
        return not self.intervals and self.active_points is None

    def to_dict(self):
        if self.active_points is not None:
            return {"active_points": list(self.active_points)}
        return {"intervals": [list(iv) for iv in self.intervals]}

    @classmethod
    def from_dict(cls, data) -> "Mask":
        if data is None:
            return cls.none()
        return cls(
            intervals=data.get("intervals", ()),
            active_points=data.get("active_points"),
        )

    def __repr__(self):
        if self.active_points is not None:
            return f"Mask(active_points={list(self.active_points)})"
        return f"Mask(intervals={list(self.intervals)})"


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


class DiscretizedCurve:
    """Nodal samples of a planar curve q(s) on a Grid."""

    def __init__(self, points, grid: Grid):
        pts = np.array(points, dtype=float)
        if pts.shape != (grid.n_nodes, 2):
            raise ValueError(f"expected points of shape ({grid.n_nodes}, 2), got {pts.shape}")
        pts.flags.writeable = False
        self.points = pts
        self.grid = grid

    @classmethod
    def straight_rest(cls, grid: Grid) -> "DiscretizedCurve":
        """Rest configuration q(s) = (0, -s) hanging from the anchor."""
        pts = np.column_stack([np.zeros(grid.n_nodes), -grid.s])
        return cls(pts, grid)

    def tangent(self) -> np.ndarray:
        return self.grid.diff(self.points, 1)

    def second_derivative(self) -> np.ndarray:
        return self.grid.diff(self.points, 2)

    def link_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    def inextensibility_residual(self) -> float:
        """max_k | |q_{k+1}-q_k| / ds - 1 |, the discrete unit-speed defect."""
        return float(np.max(np.abs(self.link_lengths() / self.grid.ds - 1.0)))

    @property
    def tip(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self):
        return self.grid.n_nodes


def signed_curvature(curve: DiscretizedCurve) -> np.ndarray:
    """kappa = q_s x q_ss nodally; |kappa| ~ |q_ss| for unit-speed curves."""
    return cross2(curve.tangent(), curve.second_derivative())


class ControlField:
    """Bounded curvature control, |u| <= 1, forced to zero on the mask.

    ``values`` is (n,) for a static control or (n_steps, n) for a space-time
    control (one row per time step, constant within the step).
    """

    BOUND_TOL = 1e-9

    def __init__(self, values, grid: Grid, mask: Mask | None = None, enforce_bound: bool = True):
        vals = np.array(values, dtype=float)
        if vals.ndim not in (1, 2) or vals.shape[-1] != grid.n_nodes:
            raise ValueError(f"control values of shape {vals.shape} do not match grid {grid}")
        self.grid = grid
        self.mask = mask if mask is not None else Mask.none()
        dead = self.mask.deactivated(grid)
        vals[..., dead] = 0.0
        if enforce_bound and np.any(np.abs(vals) > 1.0 + self.BOUND_TOL):
            raise ValueError(f"control bound violated: max |u| = {np.max(np.abs(vals)):.6g}")
        vals.flags.writeable = False
        self.values = vals
        self.enforce_bound = enforce_bound

    @property
    def is_dynamic(self) -> bool:
        return self.values.ndim == 2

    @classmethod
    def zero(cls, grid: Grid, mask: Mask | None = None, n_steps: int | None = None) -> "ControlField":
        shape = (grid.n_nodes,) if n_steps is None else (n_steps, grid.n_nodes)
        return cls(np.zeros(shape), grid, mask)

    def at_step(self, k: int) -> np.ndarray:
        return self.values[k] if self.is_dynamic else self.values


class ModelParams:
    """Nodal physical/penalty/friction profiles plus the target weight tau.

    rho   mass density (> 0)
    omega maximal curvature (> 0)
    eps   bending elastic constant (> 0)
    nu    curvature-constraint penalty (>= 0)
    mu    control penalty (>= 0); zero means the node is unactuated
    beta  environmental friction (>= 0)
    gamma internal friction (>= 0)
    tau   target / contact penalty weight (> 0)
    """

    _FIELDS = ("rho", "omega", "eps", "nu", "mu", "beta", "gamma")

    def __init__(self, grid: Grid, *, rho, omega, eps, nu, mu, beta, gamma, tau):
        self.grid = grid
        n = grid.n_nodes
        for name, arr in zip(self._FIELDS, (rho, omega, eps, nu, mu, beta, gamma)):
            a = np.broadcast_to(np.asarray(arr, dtype=float), (n,)).copy()
            a.flags.writeable = False
            setattr(self, name, a)
        self.tau = float(tau)
        self._validate()

    def _validate(self):
        positive = {"rho": self.rho, "omega": self.omega, "eps": self.eps}
        for name, arr in positive.items():
            if not np.all(arr > 0):
                raise ValueError(f"profile {name} must be positive everywhere")
        nonneg = {"nu": self.nu, "mu": self.mu, "beta": self.beta, "gamma": self.gamma}
        for name, arr in nonneg.items():
            if not np.all(arr >= 0):
                raise ValueError(f"profile {name} must be nonnegative")
        if not np.all(np.isfinite(np.column_stack([getattr(self, f) for f in self._FIELDS]))):
            raise ValueError("parameter profiles must be finite")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @classmethod
    def from_profiles(cls, grid: Grid, profiles: dict, tau: float) -> "ModelParams":
        """Build from callables or arrays keyed by field name."""
        vals = {}
        for name in cls._FIELDS:
            p = profiles[name]
            vals[name] = p(grid.s) if callable(p) else p
        return cls(grid, tau=tau, **vals)

    def masked(self, mask: Mask) -> "ModelParams":
        """Copy with mu zeroed on the deactivated set."""
        mu = self.mu.copy()
        mu[mask.deactivated(self.grid)] = 0.0
        return ModelParams(
            self.grid, rho=self.rho, omega=self.omega, eps=self.eps, nu=self.nu,
            mu=mu, beta=self.beta, gamma=self.gamma, tau=self.tau,
        )

    def omega_bar(self) -> np.ndarray:
        """Effective curvature gain mu*omega / (mu + eps); zero where mu = 0."""
        return self.mu * self.omega / (self.mu + self.eps)


def reaction_G(curve: DiscretizedCurve, params: ModelParams) -> np.ndarray:
    """Bending/constraint reaction G = eps + nu * (|q_ss|^2 - omega^2)_+."""
    qss = curve.second_derivative()
    mag2 = np.einsum("ij,ij->i", qss, qss)
    return params.eps + params.nu * positive_part(mag2 - params.omega**2)


def control_H(curve: DiscretizedCurve, control, params: ModelParams) -> np.ndarray:
    """Control term H = mu * (omega u - q_s x q_ss)."""
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    kappa = signed_curvature(curve)
    return params.mu * (params.omega * u - kappa)
