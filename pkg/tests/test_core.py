"""Grid calculus, planar helpers and value-type invariants."""

import numpy as np
import pytest

from softmanip.core import (
    ControlField,
    DiscretizedCurve,
    Grid,
    GridSizeError,
    Mask,
    ModelParams,
    control_H,
    cross2,
    d1,
    d2,
    d3,
    d4,
    heaviside,
    perp,
    positive_part,
    reaction_G,
    signed_curvature,
)


def circle_curve(grid, radius, kappa_sign=+1.0, phase=0.0):
    """Unit-speed circle sample with signed curvature kappa_sign/radius."""
    theta = phase + kappa_sign * grid.s / radius
    x = radius * kappa_sign * (np.sin(theta) - np.sin(phase))
    y = -radius * kappa_sign * (np.cos(theta) - np.cos(phase))
    return DiscretizedCurve(np.column_stack([x, y]), grid)


class TestGrid:
    def test_nodes_cover_unit_interval(self):
        g = Grid(51)
        assert g.ds == pytest.approx(0.02)
        assert g.s[0] == 0.0 and g.s[-1] == 1.0
        assert np.allclose(np.diff(g.s), g.ds)

    def test_from_spacing(self):
        assert Grid.from_spacing(0.02).n_nodes == 51
        with pytest.raises(GridSizeError):
            Grid.from_spacing(0.03)

    def test_too_small(self):
        with pytest.raises(GridSizeError):
            Grid(1)
        with pytest.raises(GridSizeError):
            Grid(4).diff(np.zeros(4), 4)


class TestFiniteDifferences:
    def test_d1_linear_exact(self):
        g = Grid(51)
        assert np.max(np.abs(d1(g.s, g) - 1.0)) < 1e-12

    def test_d2_quadratic_exact(self):
        g = Grid(51)
        assert np.max(np.abs(d2(g.s**2, g) - 2.0)) < 1e-10

    def test_d2_constant_exactly_zero(self):
        g = Grid(41)
        assert np.all(d2(np.ones(41), g) == 0.0)

    def test_d3_cubic_d4_quartic(self):
        g = Grid(51)
        assert np.max(np.abs(d3(g.s**3, g) - 6.0)) < 1e-7
        assert np.max(np.abs(d4(g.s**4, g) - 24.0)) < 1e-5

    def test_d2_richardson_second_order(self):
        errs = {}
        for n in (51, 101):
            g = Grid(n)
            f = np.sin(2 * np.pi * g.s)
            exact = -((2 * np.pi) ** 2) * f
            errs[n] = np.max(np.abs(d2(f, g) - exact))
        order = np.log2(errs[51] / errs[101])
        assert order >= 1.9
        # interior stencils refine at the textbook factor of ~4
        interior = {}
        for n in (51, 101):
            g = Grid(n)
            f = np.sin(2 * np.pi * g.s)
            exact = -((2 * np.pi) ** 2) * f
            interior[n] = np.max(np.abs((d2(f, g) - exact))[2:-2])
        assert interior[51] / interior[101] == pytest.approx(4.0, rel=0.2)

    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    def test_all_orders_converge_at_two(self, order):
        errs = []
        for n in (81, 161):
            g = Grid(n)
            f = np.cos(2 * np.pi * g.s)
            exact = np.real((2j * np.pi) ** order) * np.cos(2 * np.pi * g.s) + np.imag(
                (2j * np.pi) ** order
            ) * -np.sin(2 * np.pi * g.s)
            errs.append(np.max(np.abs(g.diff(f, order) - exact)))
        assert np.log2(errs[0] / errs[1]) >= 1.9

    def test_vector_fields(self):
        g = Grid(31)
        f = np.column_stack([g.s**2, g.s**3])
        out = d2(f, g)
        assert out.shape == (31, 2)
        assert np.max(np.abs(out[:, 0] - 2.0)) < 1e-9


class TestPlanarHelpers:
    def test_perp_convention(self):
        assert np.allclose(perp([1.0, 0.0]), [0.0, -1.0])
        assert np.allclose(perp([0.0, 1.0]), [1.0, 0.0])

    def test_perp_involution_and_isometry(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(20, 2))
        assert np.allclose(perp(perp(a)), -a)
        assert np.allclose(np.linalg.norm(perp(a), axis=1), np.linalg.norm(a, axis=1))

    def test_cross2_matches_formula(self):
        # a x b := a . perp(b); for the canonical basis this gives +1
        assert cross2((1.0, 0.0), (0.0, 1.0)) == pytest.approx(1.0)
        assert cross2((1.0, 0.0), (0.0, 1.0)) == pytest.approx(
            np.dot([1.0, 0.0], perp([0.0, 1.0]))
        )

    def test_cross2_antisymmetric(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(50, 2))
        b = rng.normal(size=(50, 2))
        assert np.allclose(cross2(a, b), -cross2(b, a))
        assert np.allclose(cross2(a, a), 0.0)

    def test_positive_part_and_heaviside(self):
        assert positive_part(-3.0) == 0.0
        assert positive_part(2.0) == 2.0
        assert heaviside(0.0) == 1.0
        assert heaviside(-1e-300) == 0.0
        assert np.allclose(heaviside(np.array([-1.0, 0.0, 2.0])), [0.0, 1.0, 1.0])


class TestSignedCurvature:
    def test_straight_segment_zero(self):
        g = Grid(51)
        q = DiscretizedCurve.straight_rest(g)
        assert np.max(np.abs(signed_curvature(q))) < 1e-12

    @pytest.mark.parametrize("sign", [+1.0, -1.0])
    def test_circle_magnitude_and_sign(self, sign):
        g = Grid(101)
        r = 0.4
        q = circle_curve(g, r, kappa_sign=sign, phase=-np.pi / 2)
        k = signed_curvature(q)
        assert np.max(np.abs(k - sign / r)) < 0.01 / r

    def test_circle_second_order_convergence(self):
        errs = []
        for n in (51, 101):
            g = Grid(n)
            q = circle_curve(g, 0.3, phase=0.3)
            errs.append(np.max(np.abs(signed_curvature(q) - 1 / 0.3)))
        assert np.log2(errs[0] / errs[1]) >= 1.9


def _params(grid, **over):
    base = dict(rho=1.0, omega=4.0, eps=0.1, nu=0.5, mu=0.3, beta=0.0, gamma=0.0, tau=1e-4)
    base.update(over)
    return ModelParams(grid, **base)


class TestReactionAndControlMaps:
    def test_straight_line_values(self):
        g = Grid(51)
        p = _params(g)
        q = DiscretizedCurve.straight_rest(g)
        u = 0.5 * np.ones(g.n_nodes)
        assert np.allclose(reaction_G(q, p), p.eps)
        assert np.allclose(control_H(q, u, p), p.mu * p.omega * 0.5)

    def test_positive_part_inactive_below_bound(self):
        g = Grid(101)
        p = _params(g, omega=10.0)
        q = circle_curve(g, 0.5)  # |q_ss| = 2 < 10
        assert np.allclose(reaction_G(q, p), p.eps)

    def test_reaction_bounded_below_by_eps(self):
        g = Grid(101)
        p = _params(g, omega=1.0)
        q = circle_curve(g, 0.2)  # curvature 5 > omega: positive part active
        G = reaction_G(q, p)
        assert np.all(G >= p.eps - 1e-15)
        assert G.max() > p.eps[0] if hasattr(p.eps, "ndim") else True

    def test_matched_control_cancels_H(self):
        g = Grid(201)
        p = _params(g, omega=8.0)
        kappa0 = 4.0
        q = circle_curve(g, 1.0 / kappa0, phase=0.1)
        u = (kappa0 / 8.0) * np.ones(g.n_nodes)
        H = control_H(q, u, p)
        assert np.max(np.abs(H)) < 5e-3 * p.mu.max() * 8.0


class TestMask:
    def test_interval_membership(self):
        g = Grid(51)
        m = Mask(intervals=[(0.35, 0.65)])
        dead = m.deactivated(g)
        assert dead[18] and dead[32]
        assert not dead[17] and not dead[33]

    def test_union_of_intervals(self):
        g = Grid(51)
        m = Mask(intervals=[(0.25, 0.4), (0.6, 0.75)])
        dead = m.deactivated(g)
        assert dead[13] and dead[20] and dead[30] and dead[37]
        assert not dead[25]

    def test_all_but_points_snaps(self):
        g = Grid(51)
        m = Mask.all_but_points([0.0, 0.25, 0.5, 0.75])
        dead = m.deactivated(g)
        active = np.flatnonzero(~dead)
        assert 0 in active and 25 in active
        assert len(active) == 4

    def test_snap_warning_beyond_half_spacing(self):
        g = Grid(11)  # ds = 0.1
        with pytest.warns(UserWarning, match="snapped"):
            Mask.all_but_points([0.234]).deactivated(g)

    def test_roundtrip(self):
        m = Mask(intervals=[(0.1, 0.2)])
        assert Mask.from_dict(m.to_dict()).intervals == m.intervals


class TestControlField:
    def test_bound_enforced(self):
        g = Grid(11)
        with pytest.raises(ValueError, match="bound"):
            ControlField(1.5 * np.ones(11), g)
        ControlField(1.5 * np.ones(11), g, enforce_bound=False)  # opt-out

    def test_mask_zeroing(self):
        g = Grid(51)
        m = Mask(intervals=[(0.35, 0.65)])
        u = ControlField(np.ones(51), g, m)
        assert np.all(u.values[m.deactivated(g)] == 0.0)
        assert u.values[0] == 1.0

    def test_dynamic_shape(self):
        g = Grid(11)
        u = ControlField.zero(g, n_steps=5)
        assert u.is_dynamic and u.values.shape == (5, 11)
        assert np.all(u.at_step(3) == 0.0)


class TestModelParams:
    def test_validation(self):
        g = Grid(11)
        with pytest.raises(ValueError, match="positive"):
            _params(g, eps=0.0)
        with pytest.raises(ValueError, match="nonnegative"):
            _params(g, nu=-1.0)
        with pytest.raises(ValueError, match="tau"):
            _params(g, tau=0.0)

    def test_masking_zeroes_mu(self):
        g = Grid(51)
        p = _params(g)
        masked = p.masked(Mask(intervals=[(0.35, 0.65)]))
        dead = Mask(intervals=[(0.35, 0.65)]).deactivated(g)
        assert np.all(masked.mu[dead] == 0.0)
        assert np.all(masked.mu[~dead] == p.mu[~dead])

    def test_omega_bar_zero_on_dead_nodes(self):
        g = Grid(51)
        p = _params(g).masked(Mask(intervals=[(0.3, 0.5)]))
        ob = p.omega_bar()
        dead = Mask(intervals=[(0.3, 0.5)]).deactivated(g)
        assert np.all(ob[dead] == 0.0)
        assert np.all(ob[~dead] > 0.0)

    def test_curve_immutable(self):
        g = Grid(11)
        q = DiscretizedCurve.straight_rest(g)
        with pytest.raises(ValueError):
            q.points[0, 0] = 1.0

    def test_inextensibility_residual(self):
        g = Grid(21)
        q = DiscretizedCurve.straight_rest(g)
        assert q.inextensibility_residual() < 1e-14
        pts = q.points.copy()
        pts[5] = pts[5] + [0.01, 0.0]
        assert DiscretizedCurve(pts, g).inextensibility_residual() > 1e-3
