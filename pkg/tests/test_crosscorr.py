"""Cross-covariance surfaces, correlation clamping, bootstrap trajectories."""

import dataclasses
import math

import numpy as np
import pytest

from sparsefda import (
    Curve,
    FsBootstrapPlan,
    Surface,
    correlation_surface,
    correlation_trajectory_fs,
    crosscov_ff,
    crosscov_fs,
    default_grid,
    simulate_cohort,
)
from sparsefda.crosscorr import CrossCovSurface
from sparsefda.errors import (
    AlignmentError,
    DegenerateScalarError,
    DegenerateVarianceError,
)
from sparsefda.fpca import SmoothedMoments
from sparsefda.simulate import KlComponent, MeanSpec, VariableSpec

from conftest import make_sample, two_component_spec


def _two_variable_spec(n, rho=0.6, noise=(0.3, 0.3)):
    """Two 1-component variables with correlated scores."""
    a = VariableSpec("a", MeanSpec("constant", (0.0,)),
                     (KlComponent(3.0, "cos", 0),), noise_sd=noise[0])
    b = VariableSpec("b", MeanSpec("constant", (0.0,)),
                     (KlComponent(2.0, "cos", 1),), noise_sd=noise[1])
    spec = two_component_spec(n)
    spec = dataclasses.replace(
        spec, variables=(a, b),
        score_correlation=((1.0, rho), (rho, 1.0)))
    return spec


@pytest.fixture(scope="module")
def correlated_cohort():
    spec = _two_variable_spec(500)
    cohort, truth = simulate_cohort(spec, seed=31)
    return spec, cohort, truth


class TestCrossCovFF:
    def test_recovers_true_cross_surface(self, correlated_cohort):
        spec, cohort, truth = correlated_cohort
        cc = crosscov_ff(cohort.samples["a"], cohort.samples["b"], 2.0,
                         grid_size=21)
        a = truth.variable("a")
        b = truth.variable("b")
        fa = a.basis_callables(spec.window)[0]
        fb = b.basis_callables(spec.window)[0]
        # Cov(xi_a, xi_b) = rho * sqrt(lam_a * lam_b)
        want_scale = 0.6 * math.sqrt(3.0 * 2.0)
        gs, gt = np.meshgrid(cc.grid_s, cc.grid_t, indexing="ij")
        want = want_scale * fa(gs) * fb(gt)
        interior = (slice(3, -3), slice(3, -3))
        err = np.abs(cc.surface.values[interior] - want[interior])
        assert err.max() < 0.25

    def test_alignment_requires_shared_subjects(self):
        s1 = make_sample({"a": ([1.0, 2.0], [1.0, 2.0])})
        s2 = make_sample({"zzz": ([1.0, 2.0], [1.0, 2.0])}, name="y")
        with pytest.raises(AlignmentError):
            crosscov_ff(s1, s2, 2.0)

    def test_diagonal_flag_changes_pair_count(self, correlated_cohort):
        _, cohort, _ = correlated_cohort
        sub = cohort.samples["a"].subset(cohort.samples["a"].subject_ids[:60])
        with_diag = crosscov_ff(sub, sub, 2.0, grid_size=11)
        without = crosscov_ff(sub, sub, 2.0, grid_size=11,
                              include_diagonal=False)
        assert with_diag.n_pairs > without.n_pairs
        assert with_diag.include_diagonal
        assert not without.include_diagonal

    def test_meta_and_rows(self, correlated_cohort):
        _, cohort, _ = correlated_cohort
        cc = crosscov_ff(cohort.samples["a"], cohort.samples["b"], 2.0,
                         grid_size=5)
        rows = list(cc.csv_rows())
        assert len(rows) == 25
        s, t, v = rows[7]
        assert v == pytest.approx(cc.surface.values[1, 2])
        d = cc.to_json_dict()
        assert d["variable_s"] == "a" and d["variable_t"] == "b"


class TestCrossCovFS:
    def test_recovers_score_covariance_curve(self, correlated_cohort):
        spec, cohort, truth = correlated_cohort
        # scalar = first score of "a" (known covariance with the curve)
        z = {sid: float(truth.scores["a"][i, 0])
             for i, sid in enumerate(truth.subject_ids)}
        cc = crosscov_fs(cohort.samples["a"], z, 2.0)
        fa = truth.variable("a").basis_callables(spec.window)[0]
        want = 3.0 * fa(cc.grid)
        err = np.abs(cc.values - want)[3:-3]
        assert err.max() < 0.2

    def test_meta_matches_numpy_moments(self, correlated_cohort):
        _, cohort, truth = correlated_cohort
        z = {sid: float(truth.scores["a"][i, 0])
             for i, sid in enumerate(truth.subject_ids)}
        cc = crosscov_fs(cohort.samples["a"], z, 2.0)
        ids = cohort.samples["a"].subject_ids
        vals = np.array([z[sid] for sid in ids])
        assert cc.meta["scalar_mean"] == pytest.approx(vals.mean())
        assert cc.meta["scalar_variance"] == pytest.approx(
            vals.var(ddof=1))
        assert cc.meta["n_subjects"] == len(ids)

    def test_independent_scalar_gives_flat_zero(self, correlated_cohort):
        _, cohort, _ = correlated_cohort
        gen = np.random.default_rng(9)
        z = {sid: float(gen.normal()) for sid
             in cohort.samples["a"].subject_ids}
        cc = crosscov_fs(cohort.samples["a"], z, 2.0)
        assert np.abs(cc.values).max() < 0.35

    def test_explicit_grid_is_respected(self, correlated_cohort):
        _, cohort, truth = correlated_cohort
        z = {sid: float(truth.scores["a"][i, 0])
             for i, sid in enumerate(truth.subject_ids)}
        grid = np.array([1.0, 3.0, 7.0, 11.0])
        cc = crosscov_fs(cohort.samples["a"], z, 2.0, grid=grid)
        np.testing.assert_array_equal(cc.grid, grid)


class TestCorrelationSurface:
    def _self_crosscov(self, moments):
        return CrossCovSurface(
            surface=Surface(moments.grid, moments.grid,
                            moments.autocov.values.copy()),
            name_s="x", name_t="x", bandwidths=(1.0, 1.0),
            include_diagonal=True, n_pairs=0,
        )

    def _analytic_moments(self):
        grid = default_grid(0.0, 1.0, 21)
        gs, gt = np.meshgrid(grid, grid, indexing="ij")
        cov = np.minimum(gs, gt) + 0.05   # bounded away from zero
        return SmoothedMoments(mean=Curve(grid, np.zeros(21)),
                               autocov=Surface(grid, grid, cov),
                               sigma2=0.0)

    def test_self_correlation_diagonal_is_one(self):
        m = self._analytic_moments()
        cs = correlation_surface(self._self_crosscov(m), m, m)
        np.testing.assert_allclose(np.diagonal(cs.surface.values), 1.0,
                                   atol=1e-12)
        assert not np.diagonal(cs.clamped).any()

    def test_values_clamped_and_flagged(self):
        m = self._analytic_moments()
        cc = self._self_crosscov(m)
        cc.surface.values *= 1.5        # inflate -> |corr| > 1 somewhere
        cs = correlation_surface(cc, m, m)
        assert np.abs(cs.surface.values).max() <= 1.0
        assert cs.clamped.any()
        assert cs.surface.meta["clamp_count"] == int(cs.clamped.sum())

    def test_zero_variance_names_the_point(self):
        grid = default_grid(0.0, 1.0, 5)
        gs, gt = np.meshgrid(grid, grid, indexing="ij")
        cov = np.minimum(gs, gt)        # zero variance at t = 0
        m = SmoothedMoments(mean=Curve(grid, np.zeros(5)),
                            autocov=Surface(grid, grid, cov),
                            sigma2=0.0)
        with pytest.raises(DegenerateVarianceError) as err:
            correlation_surface(self._self_crosscov(m), m, m)
        assert "0.0" in str(err.value)

    def test_csv_rows_include_clamp_flag(self):
        m = self._analytic_moments()
        cs = correlation_surface(self._self_crosscov(m), m, m)
        row = next(iter(cs.csv_rows()))
        assert len(row) == 4


@pytest.fixture(scope="module")
def setup():
    spec = _two_variable_spec(250)
    cohort, truth = simulate_cohort(spec, seed=41)
    from sparsefda import fit_moments

    moments = fit_moments(cohort.samples["a"], 1.0, (1.0, 1.0))
    z = {sid: float(truth.scores["a"][i, 0] + 0.2)
         for i, sid in enumerate(truth.subject_ids)}
    ids = cohort.samples["a"].subject_ids
    vals = np.array([z[sid] for sid in ids])
    cxz = crosscov_fs(cohort.samples["a"], z, 2.0, mean=moments.mean,
                      grid=moments.grid)
    return cohort, moments, z, cxz, float(vals.var(ddof=1))


class TestCorrelationTrajectory:
    def test_point_estimate_without_plan(self, setup):
        _, moments, _, cxz, var_z = setup
        traj = correlation_trajectory_fs(cxz, moments, var_z)
        assert traj.bands == {}
        assert np.abs(traj.estimate.values).max() <= 1.0
        # scalar IS essentially the first score: high correlation inside
        assert np.abs(traj.estimate.values[10:40]).max() > 0.7

    def test_bootstrap_bands_bracket_estimate(self, setup):
        cohort, moments, z, cxz, var_z = setup
        plan = FsBootstrapPlan(cohort.samples["a"], z, k_boot=40, seed=5,
                               bandwidth=2.0)
        traj = correlation_trajectory_fs(cxz, moments, var_z, plan)
        est = traj.estimate.values
        assert (traj.bands["lo95"] <= est + 1e-12).all()
        assert (traj.bands["hi95"] >= est - 1e-12).all()
        assert (traj.bands["lo95"] <= traj.bands["lo50"] + 1e-12).all()
        assert (traj.bands["hi50"] <= traj.bands["hi95"] + 1e-12).all()
        assert traj.k_boot == 40

    def test_deterministic_given_seed(self, setup):
        cohort, moments, z, cxz, var_z = setup
        plan = FsBootstrapPlan(cohort.samples["a"], z, k_boot=15, seed=9,
                               bandwidth=2.0)
        t1 = correlation_trajectory_fs(cxz, moments, var_z, plan)
        t2 = correlation_trajectory_fs(cxz, moments, var_z, plan)
        for key in t1.bands:
            np.testing.assert_array_equal(t1.bands[key], t2.bands[key])

    def test_threads_do_not_change_bands(self, setup):
        cohort, moments, z, cxz, var_z = setup
        p1 = FsBootstrapPlan(cohort.samples["a"], z, k_boot=12, seed=3,
                             bandwidth=2.0, threads=1)
        p4 = dataclasses.replace(p1, threads=4)
        t1 = correlation_trajectory_fs(cxz, moments, var_z, p1)
        t4 = correlation_trajectory_fs(cxz, moments, var_z, p4)
        for key in t1.bands:
            np.testing.assert_array_equal(t1.bands[key], t4.bands[key])

    def test_csv_rows_shape(self, setup):
        cohort, moments, z, cxz, var_z = setup
        plan = FsBootstrapPlan(cohort.samples["a"], z, k_boot=8, seed=1,
                               bandwidth=2.0)
        traj = correlation_trajectory_fs(cxz, moments, var_z, plan)
        rows = list(traj.csv_rows())
        assert rows[0] == ("time", "correlation", "lo95", "lo50",
                           "hi50", "hi95", "clamped")
        assert len(rows) == 1 + moments.grid.size


class TestDegenerateScalars:
    def test_constant_scalar_raises(self, correlated_cohort):
        _, cohort, _ = correlated_cohort
        z = {sid: 5.0 for sid in cohort.samples["a"].subject_ids}
        with pytest.raises(DegenerateScalarError):
            crosscov_fs(cohort.samples["a"], z, 2.0)

    def test_no_shared_subjects_raises(self, correlated_cohort):
        _, cohort, _ = correlated_cohort
        with pytest.raises(AlignmentError):
            crosscov_fs(cohort.samples["a"], {"nope": 1.0}, 2.0)
