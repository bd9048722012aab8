"""Local polynomial smoothers, quadrature, CV bandwidths, KDE."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsefda import (
    Curve,
    cv_bandwidth,
    default_grid,
    estimate_sigma2,
    kde_1d,
    local_bilinear_2d,
    local_linear_1d,
    local_plane_at,
    local_quadratic_1d,
    trapezoid_weights,
)
from sparsefda.errors import (
    ConfigError,
    LocalRankError,
    NoValidBandwidthError,
)
from sparsefda.kernelsmooth import local_linear_at

from conftest import make_sample

# Fixed dataset matching the frozen weighted-least-squares oracle values.
ORACLE_T = np.array([0.0, 0.7, 1.1, 2.3, 3.0, 4.2, 5.0, 6.1, 7.4, 8.0])
ORACLE_Y = np.array([1.0, 0.2, -0.4, 1.9, 2.4, 1.7, 3.1, 2.2, 4.0, 3.5])


class TestLocalLinear:
    def test_matches_weighted_least_squares_oracle(self):
        est = local_linear_at(ORACLE_T, ORACLE_Y, 1.5,
                              np.array([2.0, 6.5]))
        assert est[0] == pytest.approx(1.2151265030871712, rel=1e-12)
        assert est[1] == pytest.approx(3.0690643383057727, rel=1e-12)

    @pytest.mark.parametrize("bw", [0.5, 1.0, 2.0, 4.0])
    def test_reproduces_affine_exactly(self, bw, rng):
        t = rng.uniform(0, 12, 400)
        y = 2.5 - 0.75 * t
        grid = default_grid(0, 12, 51)
        curve = local_linear_1d(t, y, bw, grid)
        expect = 2.5 - 0.75 * grid
        err = np.abs(curve.values - expect) / np.maximum(np.abs(expect), 1.0)
        assert err.max() <= 1e-10

    def test_affine_equivariance(self, rng):
        t = rng.uniform(0, 10, 200)
        y = np.sin(t)
        grid = default_grid(0, 10, 21)
        base = local_linear_1d(t, y, 1.0, grid).values
        shifted = local_linear_1d(t, y + 5.0, 1.0, grid).values
        scaled = local_linear_1d(t, 3.0 * y, 1.0, grid).values
        np.testing.assert_allclose(shifted, base + 5.0, atol=1e-10)
        np.testing.assert_allclose(scaled, 3.0 * base, atol=1e-10)

    def test_observation_weights_change_the_fit(self, rng):
        t = rng.uniform(0, 10, 100)
        y = rng.normal(0, 1, 100)
        grid = default_grid(0, 10, 11)
        w = np.ones_like(t)
        w[:50] = 10.0
        a = local_linear_1d(t, y, 2.0, grid).values
        b = local_linear_1d(t, y, 2.0, grid, weights=w).values
        assert not np.allclose(a, b)

    def test_no_support_raises(self):
        t = np.array([0.0, 0.1, 0.2])
        y = np.array([1.0, 2.0, 3.0])
        with pytest.raises((LocalRankError, NoValidBandwidthError)):
            local_linear_1d(t, y, 0.01, np.array([9.0]))


class TestLocalQuadratic:
    def test_matches_weighted_least_squares_oracle(self):
        curve = local_quadratic_1d(ORACLE_T, ORACLE_Y, 1.5,
                                   np.array([2.0, 6.5]))
        assert curve.values[0] == pytest.approx(1.2899616193734535,
                                                rel=1e-12)
        assert curve.values[1] == pytest.approx(2.954218375651577,
                                                rel=1e-12)

    def test_reproduces_quadratic_exactly(self, rng):
        t = rng.uniform(0, 10, 300)
        y = 1.0 + 0.5 * t - 0.2 * t * t
        grid = default_grid(0, 10, 31)
        curve = local_quadratic_1d(t, y, 2.0, grid)
        expect = 1.0 + 0.5 * grid - 0.2 * grid * grid
        np.testing.assert_allclose(curve.values, expect, rtol=1e-9,
                                   atol=1e-9)


class TestSurfaceSmoothers:
    def test_local_plane_matches_oracle(self):
        gen = np.random.default_rng(42)
        s = gen.uniform(0, 8, 60)
        t = gen.uniform(0, 8, 60)
        c = 1.0 + 0.5 * s - 0.25 * t + 0.1 * s * t
        est = local_plane_at(s, t, c, (2.0, 2.0),
                             np.array([[3.0, 5.0]]))
        assert est[0] == pytest.approx(2.8269410792767498, rel=1e-12)

    @pytest.mark.parametrize("bw", [0.5, 1.0, 2.0, 4.0])
    def test_reproduces_plane_exactly(self, bw, rng):
        s = rng.uniform(0, 12, 500)
        t = rng.uniform(0, 12, 500)
        c = 2.0 - 0.3 * s + 0.8 * t
        grid = default_grid(0, 12, 13)
        surf = local_bilinear_2d(s, t, c, (bw, bw), grid)
        gs, gt = np.meshgrid(grid, grid, indexing="ij")
        expect = 2.0 - 0.3 * gs + 0.8 * gt
        err = np.abs(surf.values - expect) / np.maximum(np.abs(expect), 1.0)
        assert err.max() <= 1e-10

    def test_plane_at_equals_full_surface(self, rng):
        s = rng.uniform(0, 10, 300)
        t = rng.uniform(0, 10, 300)
        c = np.sin(s) * np.cos(t)
        grid = default_grid(0, 10, 5)
        surf = local_bilinear_2d(s, t, c, (2.0, 2.0), grid)
        pts = np.column_stack([np.repeat(grid, grid.size),
                               np.tile(grid, grid.size)])
        flat = local_plane_at(s, t, c, (2.0, 2.0), pts)
        np.testing.assert_allclose(surf.values.ravel(), flat, atol=1e-10)


class TestQuadrature:
    def test_uneven_grid_weights(self):
        w = trapezoid_weights(np.array([0.0, 1.0, 3.0, 4.0]))
        np.testing.assert_allclose(w, [0.5, 1.5, 1.5, 0.5])

    def test_matches_numpy_trapezoid(self, rng):
        grid = np.sort(rng.uniform(0, 5, 40))
        f = rng.normal(0, 1, 40)
        w = trapezoid_weights(grid)
        assert w @ f == pytest.approx(np.trapezoid(f, grid), rel=1e-12)

    def test_weights_sum_to_width(self):
        g = default_grid(2.0, 9.0, 51)
        assert trapezoid_weights(g).sum() == pytest.approx(7.0)


class TestCurve:
    def test_interpolates_linearly(self):
        c = Curve(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 0.0]))
        assert c(0.5) == pytest.approx(1.0)
        assert c(np.array([1.5]))[0] == pytest.approx(1.0)

    def test_rejects_unsorted_grid(self):
        with pytest.raises(ConfigError):
            Curve(np.array([1.0, 0.0]), np.array([0.0, 1.0]))

    def test_json_round_trip(self):
        c = Curve(np.array([0.0, 1.0]), np.array([2.0, 3.0]),
                  meta={"bandwidth": 1.5})
        d = c.to_json_dict()
        back = Curve.from_json_dict(d)
        np.testing.assert_array_equal(back.grid, c.grid)
        np.testing.assert_array_equal(back.values, c.values)
        assert back.meta["bandwidth"] == 1.5


class TestCvBandwidth:
    def _subject_points(self, n, rng):
        out = {}
        for i in range(n):
            t = np.sort(rng.uniform(0, 10, 6))
            y = np.sin(t) + rng.normal(0, 0.3, t.size)
            out[f"s{i}"] = (t, y)
        return out

    def test_picks_a_candidate_at_least_the_minimizer(self, rng):
        pts = self._subject_points(60, rng)
        cands = (0.3, 0.6, 1.2, 2.4)
        spec = cv_bandwidth(pts, cands, folds=5, seed=0)
        sel = spec.selection
        assert spec.value in cands
        errs = np.array(sel.mean_errors)
        best = int(np.argmin(errs))
        # one-SE rule can only move toward larger bandwidths
        assert spec.value >= cands[best]
        limit = errs[best] + sel.std_errors[best]
        chosen = cands.index(spec.value)
        assert errs[chosen] <= limit + 1e-12

    def test_deterministic_given_seed(self, rng):
        pts = self._subject_points(40, rng)
        a = cv_bandwidth(pts, (0.5, 1.0, 2.0), folds=4, seed=3)
        b = cv_bandwidth(pts, (0.5, 1.0, 2.0), folds=4, seed=3)
        assert a.value == b.value
        assert a.selection.mean_errors == b.selection.mean_errors

    def test_all_candidates_failing_raises(self):
        pts = {"a": (np.array([0.0, 5.0]), np.array([1.0, 2.0])),
               "b": (np.array([1.0, 6.0]), np.array([2.0, 1.0]))}
        with pytest.raises(NoValidBandwidthError):
            cv_bandwidth(pts, (1e-6,), folds=2, seed=0)


class TestSigma2:
    def test_noiseless_data_gives_zero(self):
        from sparsefda import fit_moments

        gen = np.random.default_rng(5)
        pts = {}
        for i in range(80):
            t = np.sort(gen.uniform(0, 10, 5))
            pts[f"s{i}"] = (t, 1.0 + 0.5 * t)
        moments = fit_moments(make_sample(pts), 1.5, (2.0, 2.0))
        assert moments.sigma2 <= 1e-6
        assert moments.sigma2_detail.clamped or moments.sigma2 >= 0.0

    def test_interval_is_central_half_of_window(self, small_cohort):
        from sparsefda import fit_moments

        cohort, _ = small_cohort
        m = fit_moments(cohort.samples["x"], 1.0, (1.0, 1.0))
        lo, hi = m.sigma2_detail.interval
        assert lo == pytest.approx(3.0)   # 12 * 0.25
        assert hi == pytest.approx(9.0)   # 12 * 0.75
        assert float(m.sigma2_detail) == m.sigma2


class TestKde:
    def test_density_integrates_to_one(self, rng):
        vals = rng.normal(0, 1, 500)
        curve = kde_1d(vals)
        total = np.trapezoid(curve.values, curve.grid)
        assert total == pytest.approx(1.0, abs=2e-3)

    def test_density_nonnegative_and_centered(self, rng):
        vals = rng.normal(3.0, 0.5, 400)
        curve = kde_1d(vals)
        assert (curve.values >= 0).all()
        peak = curve.grid[np.argmax(curve.values)]
        assert abs(peak - 3.0) < 0.3


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 10.0))
def test_local_linear_affine_property(intercept, slope):
    t = np.linspace(0, 10, 80)
    y = intercept + slope * t
    grid = np.linspace(0, 10, 9)
    got = local_linear_1d(t, y, 1.0, grid).values
    np.testing.assert_allclose(got, intercept + slope * grid,
                               rtol=1e-8, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 30))
def test_trapezoid_weights_positive(m):
    g = default_grid(0.0, 7.0, m)
    w = trapezoid_weights(g)
    assert (w > 0).all()
    assert w.sum() == pytest.approx(7.0)
