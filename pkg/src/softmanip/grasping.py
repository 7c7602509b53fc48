"""Static optimal grasping against geometric targets.

Targets carry a signed distance (negative inside) with a closed-form gradient
for circles and axis-aligned squares, and an edge/vertex decomposition for
convex polygons.  The grasp cost combines the quadratic control energy with a
contact energy: an obstacle part (dist^2 inside the target, applied
everywhere) and an attraction part (dist^2 outside, weighted by the grasp
weight mu0, an interval indicator or point masses snapped to grid nodes).

The solve reuses the elastica-form machinery of the reachability solver with
the tip term replaced by the contact energy, warm-started from the converged
reachability solution toward the target barycenter.
"""

from __future__ import annotations

import time
import warnings

import numpy as np

from .core import ControlField, DiscretizedCurve, Grid, Mask, positive_part
from .statics import (
    ConvergenceReport,
    NonConvergenceError,
    SolverOptions,
    StaticProblem,
    _ElasticaAL,
    _recover_control,
    control_energy,
    solve_static_reachability,
)

__all__ = [
    "GraspTarget",
    "GraspWeight",
    "signed_distance",
    "grasp_cost",
    "solve_static_grasping",
]


# ---------------------------------------------------------------------------
# Shapes and signed distance
# ---------------------------------------------------------------------------


class GraspTarget:
    """Closed convex target shape with signed distance to its boundary."""

    def __init__(self, kind: str, *, center=None, radius=None, half_side=None, vertices=None):
        self.kind = kind
        if kind == "circle":
            if radius is None or radius <= 0:
                raise ValueError("circle needs a positive radius")
            self.center = np.asarray(center, dtype=float).reshape(2)
            self.radius = float(radius)
        elif kind == "square":
            if half_side is None or half_side <= 0:
                raise ValueError("square needs a positive half_side")
            self.center = np.asarray(center, dtype=float).reshape(2)
            self.half_side = float(half_side)
        elif kind == "polygon":
            v = np.asarray(vertices, dtype=float)
            if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
                raise ValueError("polygon needs at least three 2-vector vertices")
            area2 = 0.0
            for i in range(v.shape[0]):
                a, b = v[i], v[(i + 1) % v.shape[0]]
                area2 += a[0] * b[1] - a[1] * b[0]
            if area2 < 0:  # enforce positive orientation
                v = v[::-1].copy()
            elif area2 == 0:
                raise ValueError("polygon is degenerate")
            self.vertices = v
            self.center = v.mean(axis=0)
        else:
            raise ValueError(f"unknown shape kind {kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "GraspTarget":
        kind = data["kind"]
        if kind == "circle":
            return cls("circle", center=data["center"], radius=data["radius"])
        if kind == "square":
            return cls("square", center=data["center"], half_side=data["half_side"])
        return cls("polygon", vertices=data["vertices"])

    @property
    def barycenter(self) -> np.ndarray:
        return self.center

    def boundary_points(self, n: int = 256) -> np.ndarray:
        """Sampled outline for plotting/export."""
        if self.kind == "circle":
            ang = np.linspace(0.0, 2.0 * np.pi, n)
            return self.center + self.radius * np.column_stack([np.cos(ang), np.sin(ang)])
        if self.kind == "square":
            r = self.half_side
            corners = np.array([[r, r], [-r, r], [-r, -r], [r, -r], [r, r]]) + self.center
            segs = []
            per_side = max(2, n // 4)
            for a, b in zip(corners[:-1], corners[1:]):
                t = np.linspace(0, 1, per_side)[:, None]
                segs.append(a + t * (b - a))
            return np.vstack(segs)
        verts = np.vstack([self.vertices, self.vertices[:1]])
        segs = []
        per_side = max(2, n // len(self.vertices))
        for a, b in zip(verts[:-1], verts[1:]):
            t = np.linspace(0, 1, per_side)[:, None]
            segs.append(a + t * (b - a))
        return np.vstack(segs)


def _circle_sdf(p, center, radius):
    d = p - center
    r = np.linalg.norm(d, axis=-1)
    dist = r - radius
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = np.where(r[..., None] > 0.0, d / np.maximum(r, 1e-300)[..., None], 0.0)
    return dist, grad


def _square_sdf(p, center, half):
    """Exact SDF of an axis-aligned square; corner regions use vertex distance."""
    d = np.abs(p - center) - half
    outside = np.maximum(d, 0.0)
    out_norm = np.linalg.norm(outside, axis=-1)
    inside = np.minimum(np.maximum(d[..., 0], d[..., 1]), 0.0)
    dist = out_norm + inside

    sign = np.sign(p - center)
    sign = np.where(sign == 0.0, 1.0, sign)
    grad = np.zeros_like(np.broadcast_to(p, d.shape)).copy()
    is_out = out_norm > 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        g_out = sign * outside / np.maximum(out_norm, 1e-300)[..., None]
    # inside: unit step toward the nearest face (the larger component of d)
    pick_x = d[..., 0] >= d[..., 1]
    g_in = np.zeros_like(g_out)
    g_in[..., 0] = np.where(pick_x, sign[..., 0], 0.0)
    g_in[..., 1] = np.where(~pick_x, sign[..., 1], 0.0)
    grad = np.where(is_out[..., None], g_out, g_in)
    return dist, grad


def _polygon_sdf(p, vertices):
    """Signed distance to a convex, positively oriented polygon boundary."""
    p = np.atleast_2d(p)
    m = vertices.shape[0]
    dist2 = np.full(p.shape[0], np.inf)
    closest = np.zeros_like(p)
    inside = np.ones(p.shape[0], dtype=bool)
    for i in range(m):
        a = vertices[i]
        b = vertices[(i + 1) % m]
        ab = b - a
        t = np.clip(((p - a) @ ab) / float(ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d2 = np.einsum("ij,ij->i", p - proj, p - proj)
        better = d2 < dist2
        dist2[better] = d2[better]
        closest[better] = proj[better]
        # positive orientation: inside means left of every edge
        crossz = ab[0] * (p[:, 1] - a[1]) - ab[1] * (p[:, 0] - a[0])
        inside &= crossz >= 0.0
    d = np.sqrt(dist2)
    sign = np.where(inside, -1.0, 1.0)
    diff = p - closest
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = sign[:, None] * diff / np.maximum(d, 1e-300)[:, None]
    return sign * d, grad


def signed_distance(p, target: GraspTarget):
    """Signed distance to the target boundary and its gradient.

    Negative inside, positive outside; the gradient is the unit outward
    direction almost everywhere (vertex direction in corner regions).
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    if target.kind == "circle":
        dist, grad = _circle_sdf(pts, target.center, target.radius)
    elif target.kind == "square":
        dist, grad = _square_sdf(pts, target.center, target.half_side)
    else:
        dist, grad = _polygon_sdf(pts, target.vertices)
    if single:
        return float(dist[0]), grad[0]
    return dist, grad


def signed_distance_hessian(p, target: GraspTarget) -> np.ndarray:
    """Hessian of the signed distance, (n, 2, 2).

    Zero along flat faces; (I - n n^T)/r around circular boundaries and in
    the corner regions of squares/polygons (r = distance to the center or the
    nearest vertex).
    """
    pts = np.atleast_2d(np.asarray(p, dtype=float))
    out = np.zeros((pts.shape[0], 2, 2))

    def curved(idx, centers):
        u = pts[idx] - centers
        r = np.linalg.norm(u, axis=-1)
        good = r > 1e-12
        n = np.zeros_like(u)
        n[good] = u[good] / r[good, None]
        P = np.eye(2)[None, :, :] - np.einsum("ia,ib->iab", n, n)
        out[idx] = P / np.maximum(r, 1e-12)[:, None, None]

    if target.kind == "circle":
        curved(np.arange(pts.shape[0]), target.center[None, :])
    elif target.kind == "square":
        d = np.abs(pts - target.center) - target.half_side
        corner = (d[:, 0] > 0) & (d[:, 1] > 0)
        if np.any(corner):
            corners = target.center + np.sign(pts[corner] - target.center) * target.half_side
            curved(np.flatnonzero(corner), corners)
    else:
        verts = target.vertices
        m = verts.shape[0]
        # a point is in a vertex region when its edge-parameter clamps at the
        # same vertex for both adjacent edges
        for i in range(m):
            v = verts[i]
            prev_edge = v - verts[i - 1]
            next_edge = verts[(i + 1) % m] - v
            rel = pts - v
            in_region = (rel @ prev_edge > 0) & (rel @ next_edge < 0)
            if np.any(in_region):
                curved(np.flatnonzero(in_region), v[None, :])
    return out


# ---------------------------------------------------------------------------
# Grasp weights
# ---------------------------------------------------------------------------


class GraspWeight:
    """Nonnegative weight selecting the preferred contact portion.

    Either the indicator of [s0, 1] or a finite sum of unit point masses;
    point masses snap to grid nodes (warning beyond ds/2).
    """

    def __init__(self, kind: str, *, start: float | None = None, points=None):
        self.kind = kind
        if kind == "interval":
            if start is None or not (0.0 <= start <= 1.0):
                raise ValueError("interval weight needs 0 <= start <= 1")
            self.start = float(start)
        elif kind == "points":
            pts = tuple(float(p) for p in (points or ()))
            if not pts or not all(0.0 <= p <= 1.0 for p in pts):
                raise ValueError("point weights must lie in [0, 1]")
            self.points = pts
        else:
            raise ValueError(f"unknown weight kind {kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "GraspWeight":
        if data["kind"] == "interval":
            return cls("interval", start=data["start"])
        return cls("points", points=data["points"])

    def interval_indicator(self, grid: Grid) -> np.ndarray:
        """Nodal indicator of the weighted interval (zero for point masses)."""
        if self.kind != "interval":
            return np.zeros(grid.n_nodes)
        return (grid.s >= self.start - 1e-12).astype(float)

    def point_nodes(self, grid: Grid) -> np.ndarray:
        """Grid node indices of the point masses (snapped)."""
        if self.kind != "points":
            return np.array([], dtype=int)
        idx = []
        for p in self.points:
            i = int(round(p / grid.ds))
            i = min(max(i, 0), grid.n_nodes - 1)
            if abs(grid.s[i] - p) > 0.5 * grid.ds + 1e-12:
                warnings.warn(f"grasp point mass {p} snapped to node {grid.s[i]:.6g}")
            idx.append(i)
        return np.asarray(sorted(set(idx)), dtype=int)


# ---------------------------------------------------------------------------
# Cost and solver
# ---------------------------------------------------------------------------


def contact_energy(points: np.ndarray, grid: Grid, target: GraspTarget, weight: GraspWeight,
                   tau: float, include_obstacle: bool = True):
    """Contact part of the grasp cost: value, nodal gradient and split.

    (1/2 tau) * [ integral of dist^2 (chi_inside + mu0 chi_outside) ds
                 + sum over point masses of dist^2 chi_outside ].
    """
    dist, gradd = signed_distance(points, target)
    inside = dist < 0.0
    w = grid.weights
    mu0 = weight.interval_indicator(grid)
    obstacle_density = np.where(inside, dist**2, 0.0) if include_obstacle else np.zeros_like(dist)
    attract_density = np.where(~inside, dist**2, 0.0) * mu0
    obstacle = 0.5 / tau * float(np.dot(w, obstacle_density))
    attraction = 0.5 / tau * float(np.dot(w, attract_density))

    coeff = np.where(inside, 1.0 if include_obstacle else 0.0, mu0) * w
    nodes = weight.point_nodes(grid)
    point_term = 0.0
    if nodes.size:
        outside_pts = ~inside[nodes]
        point_term = 0.5 / tau * float(np.sum(np.where(outside_pts, dist[nodes] ** 2, 0.0)))
        coeff = coeff.copy()
        coeff[nodes] += np.where(outside_pts, 1.0, 0.0)
    grad = (coeff * dist / tau)[:, None] * gradd
    value = obstacle + attraction + point_term
    return {
        "value": value,
        "grad": grad,
        "obstacle_energy": obstacle,
        "attraction_energy": attraction + point_term,
        "penetration": float(np.max(positive_part(-dist))),
        "dist": dist,
    }


def grasp_cost(curve: DiscretizedCurve, control, target: GraspTarget, weight: GraspWeight,
               mask: Mask | None = None, tau: float = 1e-4,
               include_obstacle: bool = True) -> dict:
    """Grasp functional value and components for a given shape and control."""
    grid = curve.grid
    u = control.values if isinstance(control, ControlField) else np.asarray(control, dtype=float)
    dead = (mask or Mask.none()).deactivated(grid)
    u = np.where(dead, 0.0, u)
    energy = 0.5 * grid.integrate(u * u)
    contact = contact_energy(curve.points, grid, target, weight, tau, include_obstacle)
    return {
        "control_energy": energy,
        "obstacle_energy": contact["obstacle_energy"],
        "attraction_energy": contact["attraction_energy"],
        "contact_energy": contact["value"],
        "total": energy + contact["value"],
        "penetration": contact["penetration"],
    }


class GraspProblem(StaticProblem):
    """Static grasping: contact energy replaces the tip-target term."""

    def __init__(self, params, target: GraspTarget, weight: GraspWeight,
                 mask: Mask | None = None, drop_curvature_bound: bool = False,
                 include_obstacle: bool = True):
        super().__init__(params, mask, target.barycenter, drop_curvature_bound)
        self.shape = target
        self.weight = weight
        self.include_obstacle = include_obstacle


def solve_static_grasping(problem: GraspProblem, options: SolverOptions | None = None,
                          initial_curve: DiscretizedCurve | None = None):
    """Minimize the grasp functional in elastica form.

    Returns (control, curve, report); same machinery and guarantees as
    solve_static_reachability.  Warm start: the converged reachability
    solution toward the target barycenter.
    """
    opts = options or SolverOptions()
    tau = problem.params.tau
    grid = problem.grid

    def task(q):
        contact = contact_energy(q, grid, problem.shape, problem.weight, tau,
                                 problem.include_obstacle)
        return contact["value"], contact["grad"]

    def task_gn_hess(q):
        # full contact curvature: (1/tau) coeff (grad_d grad_d^T + d Hess d);
        # the second term matters near curved boundaries (scale d/r0).
        dist, gradd = signed_distance(q, problem.shape)
        hess = signed_distance_hessian(q, problem.shape)
        inside = dist < 0.0
        mu0 = problem.weight.interval_indicator(grid)
        coeff = np.where(inside, 1.0 if problem.include_obstacle else 0.0, mu0) * grid.weights
        nodes = problem.weight.point_nodes(grid)
        if nodes.size:
            coeff = coeff.copy()
            coeff[nodes] += np.where(~inside[nodes], 1.0, 0.0)
        blocks = np.einsum("ia,ib->iab", gradd, gradd) + dist[:, None, None] * hess
        return (coeff / tau)[:, None, None] * blocks

    started = time.perf_counter()
    if initial_curve is None:
        reach_opts = SolverOptions(
            tol_constraint=min(1e-6, opts.tol_constraint * 100),
            tol_stationarity=max(opts.tol_stationarity, 1e-5),
            max_outer=opts.max_outer,
            raise_on_failure=False,
        )
        reach_problem = StaticProblem(problem.params, problem.mask, problem.shape.barycenter,
                                      problem.drop_curvature_bound)
        _, initial_curve, _ = solve_static_reachability(reach_problem, reach_opts)

    engine = _ElasticaAL(problem, task, opts, task_gn_hess=task_gn_hess)
    nodes = problem.weight.point_nodes(grid)
    if nodes.size:
        # Point-mass attraction switches off inside the target, so refinement
        # steps must not carry a marked node across the boundary in one go.
        def limiter(q, step_free):
            cap = 1.0
            d, gradd = signed_distance(q[nodes], problem.shape)
            for j, i in enumerate(nodes):
                if i < 2:
                    continue
                dd = float(gradd[j] @ step_free[i - 2])
                if d[j] > 0.0 and dd < 0.0:
                    cap = min(cap, 0.8 * d[j] / (-dd))
            return cap

        engine.step_limiter = limiter
    q, info = engine.solve(initial_curve.points)
    curve = DiscretizedCurve(q, problem.grid)
    u = _recover_control(curve, problem)
    cost = grasp_cost(curve, u, problem.shape, problem.weight, problem.mask, tau,
                      problem.include_obstacle)
    C = curve.second_derivative()
    bend = 0.5 * float(np.sum(engine.bend_w * np.einsum("ij,ij->i", C, C)))
    dist, _ = signed_distance(curve.points, problem.shape)
    report = ConvergenceReport(
        converged=info["converged"],
        outer_iterations=info["outer"],
        inner_evaluations=info["evaluations"],
        cost=bend + cost["contact_energy"],
        cost_components={
            "curvature_energy": bend,
            "control_energy": cost["control_energy"],
            "obstacle_energy": cost["obstacle_energy"],
            "attraction_energy": cost["attraction_energy"],
            "contact_energy": cost["contact_energy"],
        },
        residuals=info["residuals"],
        stationarity=info["stationarity"],
        runtime=time.perf_counter() - started,
        message=info["message"],
        extras={
            "penetration": cost["penetration"],
            "contact_nodes": int(np.sum(np.abs(dist) <= 1e-3)),
        },
    )
    if not report.converged and opts.raise_on_failure:
        raise NonConvergenceError(
            f"grasp solve did not converge: {info['message']} (residuals {report.residuals})",
            report=report,
            curve=curve,
        )
    control = ControlField(u, problem.grid, problem.mask,
                           enforce_bound=not problem.drop_curvature_bound)
    return control, curve, report
