import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmid import lorentz as L
from hmid.lorentz import DegenerateAngleError, GeometryError, LorentzPoint

# high-precision reference values (mpmath, 30 digits)
COSH1 = 1.54308063481524377847790562076
SINH1 = 1.1752011936438014568823818506
SINH2 = 3.6268604078470187676682139828


def minkowski(a, b):
    return -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], axis=-1)


def angle_oracle(x: LorentzPoint, y: LorentzPoint, c: float) -> np.ndarray:
    """pi minus the angle at x between the geodesics toward y and toward the root,
    measured between tangent vectors obtained by projecting onto T_x."""
    X, Y = x.coords(), y.coords()
    O = np.zeros_like(X)
    O[..., 0] = 1.0 / math.sqrt(c)
    u = Y + c * minkowski(X, Y)[..., None] * X
    w = O + c * minkowski(X, O)[..., None] * X
    cos = minkowski(u, w) / np.sqrt(minkowski(u, u) * minkowski(w, w))
    return math.pi - np.arccos(np.clip(cos, -1.0, 1.0))


def random_points(rng, n, dim=3, scale=1.0, c=1.0):
    return L.lift(rng.normal(scale=scale, size=(n, dim)), c)


class TestLift:
    def test_origin(self):
        p = L.lift(np.zeros(2), 1.0)
        assert float(p.time) == 1.0

    def test_cosh_sinh(self):
        p = L.lift(np.array([SINH1, 0.0]), 1.0)
        assert abs(float(p.time) - COSH1) < 1e-15

    def test_constraint_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for c in (0.1, 1.0, 7.5):
            p = random_points(rng, 200, c=c)
            np.testing.assert_allclose(L.lorentz_inner(p, p), -1.0 / c, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(GeometryError):
            L.lift(np.array([np.nan, 0.0]), 1.0)

    def test_rejects_non_positive_curvature(self):
        with pytest.raises(GeometryError):
            L.lift(np.zeros(2), 0.0)


class TestDistance:
    def test_self_distance_is_zero(self):
        p = random_points(np.random.default_rng(1), 100)
        assert np.all(L.lorentz_distance(p, p, 1.0) == 0.0)

    def test_unit_geodesic(self):
        y = L.lift(np.array([SINH1, 0.0]), 1.0)
        assert abs(float(L.lorentz_distance(L.origin(2), y, 1.0)) - 1.0) < 1e-12

    def test_matches_naive_formula_for_separated_points(self):
        rng = np.random.default_rng(2)
        x, y = random_points(rng, 100, scale=2), random_points(rng, 100, scale=2)
        naive = np.arccosh(-minkowski(x.coords(), y.coords()))
        np.testing.assert_allclose(L.lorentz_distance(x, y, 1.0), naive, rtol=1e-9)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(3)
        for c in (0.5, 2.0):
            x, y, z = (random_points(rng, 1000, c=c) for _ in range(3))
            d = lambda a, b: L.lorentz_distance(a, b, c)
            assert np.all(d(x, z) <= d(x, y) + d(y, z) + 1e-9)

    def test_pairwise_matches_pointwise(self):
        rng = np.random.default_rng(4)
        x, y = random_points(rng, 6, scale=1.5), random_points(rng, 5, scale=1.5)
        full = L.pairwise_distance(x, y, 1.0)
        for i in range(6):
            for j in range(5):
                assert abs(full[i, j] - float(L.lorentz_distance(x[i], y[j], 1.0))) < 1e-9

    def test_off_manifold_input_raises(self):
        bad = LorentzPoint(np.array(2.0), np.array([0.1, 0.0]))
        with pytest.raises(GeometryError):
            L.lorentz_distance(bad, L.origin(2), 1.0)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(GeometryError):
            L.lorentz_inner(L.origin(2), L.origin(3))


class TestInner:
    def test_bilinear(self):
        rng = np.random.default_rng(5)
        x, z, y = (LorentzPoint(rng.normal(size=4), rng.normal(size=(4, 3))) for _ in range(3))
        a, b = 0.7, -1.3
        combo = LorentzPoint(a * x.time + b * z.time, a * x.space + b * z.space)
        lhs = L.lorentz_inner(combo, y)
        rhs = a * L.lorentz_inner(x, y) + b * L.lorentz_inner(z, y)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(L.lorentz_inner(x, y), L.lorentz_inner(y, x))


class TestExpMap:
    def test_zero_maps_to_origin_exactly(self):
        p = L.exp_map_origin(np.zeros(3), 1.0)
        assert float(p.time) == 1.0 and np.all(p.space == 0)

    def test_unit_vector(self):
        p = L.exp_map_origin(np.array([1.0, 0.0]), 1.0)
        assert abs(float(p.time) - COSH1) < 1e-12
        np.testing.assert_allclose(p.space, [SINH1, 0.0], atol=1e-12)

    def test_series_branch_is_continuous(self):
        tiny = np.array([[1e-8, 0.0], [1.1e-6, 0.0]])
        p = L.exp_map_origin(tiny, 1.0)
        np.testing.assert_allclose(p.space, tiny, rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0.05, 10.0))
    def test_arc_length(self, v, c):
        v = np.array(v)
        p = L.exp_map_origin(v, c)
        d = float(L.lorentz_distance(L.origin(3, c), p, c))
        assert abs(d - np.linalg.norm(v)) <= 1e-9 * max(1.0, np.linalg.norm(v))

    def test_log_map_inverts(self):
        rng = np.random.default_rng(6)
        v = rng.normal(size=(50, 4))
        np.testing.assert_allclose(L.log_map_origin(L.exp_map_origin(v, 2.0), 2.0), v, atol=1e-10)


class TestGeodesic:
    def test_endpoints(self):
        rng = np.random.default_rng(7)
        x, y = random_points(rng, 10), random_points(rng, 10)
        g0, g1 = L.geodesic_interpolate(x, y, 0.0, 1.0), L.geodesic_interpolate(x, y, 1.0, 1.0)
        np.testing.assert_array_equal(g0.space, x.space)
        np.testing.assert_array_equal(g1.space, y.space)

    def test_radial_midpoint(self):
        y = L.lift(np.array([SINH2, 0.0]), 1.0)
        mid = L.geodesic_interpolate(L.origin(2), y, 0.5, 1.0)
        np.testing.assert_allclose(mid.space, [SINH1, 0.0], atol=1e-12)

    def test_additivity_and_defect(self):
        rng = np.random.default_rng(8)
        x, y = random_points(rng, 100, scale=1.5), random_points(rng, 100, scale=1.5)
        d = L.lorentz_distance(x, y, 1.0)
        for t in np.linspace(0, 1, 50):
            g = L.geodesic_interpolate(x, y, t, 1.0)
            assert np.max(L.manifold_defect(g, 1.0)) <= 1e-9
            total = L.lorentz_distance(x, g, 1.0) + L.lorentz_distance(g, y, 1.0)
            np.testing.assert_allclose(total, d, atol=1e-8)
            np.testing.assert_allclose(L.lorentz_distance(x, g, 1.0), t * d, atol=1e-8)

    def test_coincident_points_fall_back(self):
        x = random_points(np.random.default_rng(9), 3)
        g = L.geodesic_interpolate(x, x, 0.3, 1.0)
        np.testing.assert_allclose(g.space, x.space, atol=1e-14)


class TestCones:
    def test_aperture_reference(self):
        x = L.lift(np.array([0.4, 0.0]), 1.0)
        assert abs(float(L.half_aperture(x, 1.0, 0.1)) - math.pi / 6) < 1e-12

    def test_aperture_clamped_at_unit_argument(self):
        x = L.lift(np.array([0.2, 0.0]), 1.0)
        assert float(L.half_aperture(x, 1.0, 0.1)) == pytest.approx(math.asin(1 - L.EPS_TRIG))

    def test_aperture_decreasing(self):
        norms = np.linspace(0.3, 10, 200)
        pts = L.lift(np.stack([norms, np.zeros_like(norms)], axis=1), 1.0)
        assert np.all(np.diff(L.half_aperture(pts, 1.0)) < 0)

    def test_aperture_at_root_raises(self):
        with pytest.raises(GeometryError):
            L.half_aperture(L.origin(2), 1.0)

    def test_radial_beyond_and_before(self):
        x, y = L.lift(np.array([0.5, 0.0]), 1.0), L.lift(np.array([1.5, 0.0]), 1.0)
        assert float(L.exterior_angle(x, y, 1.0)) == pytest.approx(0.0, abs=1e-3)
        assert float(L.exterior_angle(y, x, 1.0)) == pytest.approx(math.pi, abs=1e-3)

    def test_matches_tangent_oracle(self):
        rng = np.random.default_rng(10)
        for c in (0.3, 1.0, 4.0):
            x, y = random_points(rng, 500, scale=1.2, c=c), random_points(rng, 500, scale=1.2, c=c)
            np.testing.assert_allclose(L.exterior_angle(x, y, c), angle_oracle(x, y, c), atol=1e-6)

    def test_coincident_points_raise(self):
        x = L.lift(np.array([0.5, 0.1]), 1.0)
        with pytest.raises(DegenerateAngleError):
            L.exterior_angle(x, x, 1.0)

    def test_orthogonal_pair_violates(self):
        x, y = L.lift(np.array([0.4, 0.0]), 1.0), L.lift(np.array([0.0, 0.4]), 1.0)
        chk = L.cone_check(x, y, 1.0, 0.1)
        assert float(chk.violation) > 0
        assert abs(float(chk.violation) - (float(chk.exterior_angle) - math.pi / 6)) < 1e-12

    def test_violation_never_negative(self):
        rng = np.random.default_rng(11)
        x, y = random_points(rng, 10_000, scale=2), random_points(rng, 10_000, scale=2)
        assert np.all(L.cone_check(x, y, 1.0).violation >= 0)

    def test_radial_chain_transitivity(self):
        d = np.array([0.6, 0.8])
        x, y, z = (L.lift(s * d, 1.0) for s in (1.0, 2.0, 3.5))
        assert float(L.cone_check(x, y, 1.0).violation) == 0.0
        assert float(L.cone_check(x, z, 1.0).violation) == 0.0
