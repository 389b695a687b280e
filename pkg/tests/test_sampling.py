import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from radiofield.sampling import (NUDGE, T_ORIGIN, DepthPartition, PiecewiseLinearCDF, Ray, SamplerConfig,
                                 angles_from_direction, build_cdf, cdf_values, direction_from_angles,
                                 enforce_increasing, filter_weights, fine_depths, frustum_batch, frustum_gaussian,
                                 frustum_moments, inverse_cdf_sample, stratified_coarse, stratified_depths)

NODES, QW = np.polynomial.legendre.leggauss(64)


def quadrature_moments(a, b, rdot):
    """Moments of a uniform cone slice: axial density ~ t^2, disk radius rdot*t."""
    t = 0.5 * (b - a) * NODES + 0.5 * (a + b)
    w = QW * t**2
    z = w.sum()
    mean = (w * t).sum() / z
    var = (w * (t - mean) ** 2).sum() / z
    radial = (w * (rdot * t) ** 2 / 4).sum() / z
    return mean, var, radial


class _MidpointRng:
    def random(self, shape):
        return np.full(shape, 0.5)


class TestRays:
    def test_angle_round_trip(self):
        rng = np.random.default_rng(1)
        theta = rng.uniform(0.01, np.pi - 0.01, 50)
        phi = rng.uniform(-np.pi + 0.01, np.pi - 0.01, 50)
        th2, ph2 = angles_from_direction(direction_from_angles(theta, phi))
        np.testing.assert_allclose(th2, theta, atol=1e-12)
        np.testing.assert_allclose(ph2, phi, atol=1e-12)

    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))

    def test_partition_validation(self):
        with pytest.raises(ValueError):
            DepthPartition(np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            DepthPartition(np.array([T_ORIGIN, 1.0, 1.0]))


class TestStratified:
    def test_midpoint_example(self):
        cfg = SamplerConfig(m=2, t_near=0.0, t_far=10.0)
        np.testing.assert_array_equal(stratified_coarse(cfg, _MidpointRng()).depths, [T_ORIGIN, 2.5, 7.5])

    def test_within_strata(self):
        cfg = SamplerConfig(m=64, t_near=T_ORIGIN, t_far=15.0)
        d = stratified_depths(cfg, np.random.default_rng(3), (20,))
        edges = np.linspace(cfg.t_near, cfg.t_far, cfg.m + 1)
        assert d.shape == (20, 65)
        assert np.all(d[:, 0] == T_ORIGIN)
        assert np.all(np.diff(d, axis=1) > 0)
        assert np.all((d[:, 1:] >= edges[:-1] - NUDGE * 64) & (d[:, 1:] <= edges[1:] + NUDGE * 64))

    def test_deterministic(self):
        cfg = SamplerConfig(m=16)
        a = stratified_coarse(cfg, np.random.default_rng(9)).depths
        b = stratified_coarse(cfg, np.random.default_rng(9)).depths
        np.testing.assert_array_equal(a, b)

    def test_enforce_increasing_nudges_ties(self):
        out = enforce_increasing(np.array([1.0, 2.0, 2.0, 2.0, 3.0]))
        np.testing.assert_allclose(out, [1.0, 2.0, 2.0 + NUDGE, 2.0 + 2 * NUDGE, 3.0], rtol=0, atol=1e-15)


class TestFilter:
    def test_examples(self):
        np.testing.assert_array_equal(filter_weights([0.0, 1.0, 0.0]), [0.5, 1.0, 0.5])
        np.testing.assert_array_equal(filter_weights([2.0] * 5), [2.0] * 5)
        np.testing.assert_array_equal(filter_weights(np.zeros(4)), np.zeros(4))

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30))
    def test_dominates_input(self, w):
        assert np.all(filter_weights(w) >= np.asarray(w))


class TestCDF:
    def test_zero_weights_give_linear_cdf(self):
        d = np.array([T_ORIGIN, 1.0, 3.0, 6.0])
        values = cdf_values(d, np.zeros(3), 0.01)
        np.testing.assert_allclose(values, (d - d[0]) / (d[-1] - d[0]), atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            cdf_values(np.array([T_ORIGIN, 1.0, 2.0]), np.zeros(2), 0.0)

    def test_concentrated_flat_outside(self):
        d = np.array([T_ORIGIN, 1.0, 2.0, 3.0, 4.0])
        v = cdf_values(d, np.array([0.0, 0.0, 5.0, 0.0]), 0.0)
        np.testing.assert_array_equal(v, [0.0, 0.0, 0.0, 1.0, 1.0])

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        d = enforce_increasing(np.concatenate([[T_ORIGIN], np.sort(rng.uniform(0, 15, 40))]))
        cdf = build_cdf(DepthPartition(d), filter_weights(rng.exponential(size=40)), 0.01)
        u = np.linspace(0, 1, 10001)
        np.testing.assert_allclose(cdf(cdf.inverse(u)), u, atol=1e-10)
        assert cdf.inverse(0.0) == pytest.approx(T_ORIGIN)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(5)
        d = stratified_depths(SamplerConfig(m=12), rng, (6,))
        w = rng.exponential(size=(6, 12))
        batch = fine_depths(d, w, 0.01, 30, np.random.default_rng(8))
        u = np.random.default_rng(8).random((6, 30))
        for r in range(6):
            cdf = PiecewiseLinearCDF(d[r], cdf_values(d[r], filter_weights(w[r]), 0.01))
            expect = enforce_increasing(np.concatenate([[T_ORIGIN], np.sort(cdf.inverse(u[r]))]))
            np.testing.assert_allclose(batch[r], expect, rtol=0, atol=1e-12)


def reference_cdf(depths, w_filtered, eps):
    """Target distribution written directly from its density: eps + w'_k / dt_k on each interval."""
    dt = np.diff(depths)
    density = eps + w_filtered / dt
    mass = np.concatenate([[0.0], np.cumsum(density * dt)])
    return lambda t: np.interp(t, depths, mass / mass[-1])


class TestFineSampling:
    @pytest.mark.parametrize("seed", range(5))
    def test_ks_against_target_density(self, seed):
        rng = np.random.default_rng(seed)
        part = stratified_coarse(SamplerConfig(m=24, t_far=15.0), rng)
        wf = filter_weights(rng.exponential(size=24) * (rng.random(24) < 0.5))
        cdf = build_cdf(part, wf, 0.01)
        draws = cdf.inverse(rng.random(20000))
        assert stats.kstest(draws, reference_cdf(part.depths, wf, 0.01)).pvalue > 0.01

    def test_concentrated_mass(self):
        part = stratified_coarse(SamplerConfig(m=10), np.random.default_rng(2))
        w = np.zeros(10)
        w[6] = 1.0
        cdf = build_cdf(part, w, 0.0)
        fine = inverse_cdf_sample(cdf, 500, np.random.default_rng(3)).depths[1:]
        lo, hi = part.depths[6], part.depths[7]
        assert np.all((fine >= lo) & (fine <= hi + 500 * NUDGE))

    def test_fine_partition_valid(self):
        part = stratified_coarse(SamplerConfig(m=8), np.random.default_rng(0))
        cdf = build_cdf(part, filter_weights(np.ones(8)), 0.01)
        fine = inverse_cdf_sample(cdf, 64, np.random.default_rng(1))
        assert fine.stage == "fine" and fine.m == 64


class TestFrustum:
    def test_worked_example(self):
        mu_t, s_t, s_r = frustum_moments(1.0, 2.0, 0.1)
        assert mu_t == pytest.approx(45 / 28, rel=1e-14)
        assert s_t == pytest.approx(0.6 * 31 / 7 - (45 / 28) ** 2, rel=1e-12)
        assert s_r == pytest.approx(3 * 0.01 / 20 * 31 / 7, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(1e-3, 30.0), frac=st.floats(1e-3, 5.0), rdot=st.floats(1e-4, 0.5))
    def test_against_quadrature(self, a, frac, rdot):
        b = a * (1 + frac)
        got = frustum_moments(a, b, rdot)
        np.testing.assert_allclose(got, quadrature_moments(a, b, rdot), rtol=1e-9)

    def test_thin_limit(self):
        a = 3.0
        mu_t, s_t, s_r = frustum_moments(a, a * (1 + 1e-6), 0.01)
        assert mu_t == pytest.approx(a, rel=1e-6)
        assert 0 <= s_t < 1e-12
        assert s_r == pytest.approx(0.01**2 * a**2 / 4, rel=1e-5)
        # exact thin-slice variance is h^2/3 to leading order
        assert s_t == pytest.approx((a * 0.5e-6) ** 2 / 3, rel=1e-5)

    def test_homogeneity(self):
        m1 = np.array(frustum_moments(0.7, 1.9, 0.02))
        m2 = np.array(frustum_moments(2.1, 5.7, 0.02))
        np.testing.assert_allclose(m2, m1 * [3, 9, 9], rtol=1e-13)

    @pytest.mark.parametrize("bounds", [(0.0, 1.0), (2.0, 2.0), (3.0, 1.0)])
    def test_invalid_bounds(self, bounds):
        with pytest.raises(ValueError):
            frustum_moments(*bounds, 0.01)

    def test_gaussian_example(self):
        g = frustum_gaussian(Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.1), 1.0, 2.0)
        np.testing.assert_allclose(g.mu, [0, 0, 45 / 28], atol=1e-15)
        np.testing.assert_allclose(g.diag_world, [g.sigma_r, g.sigma_r, g.sigma_t])

    @given(theta=st.floats(0, np.pi), phi=st.floats(-np.pi, np.pi))
    def test_trace_identity(self, theta, phi):
        g = frustum_gaussian(Ray.from_angles(np.ones(3), theta, phi), 0.5, 0.9)
        assert g.diag_world.sum() == pytest.approx(g.sigma_t + 2 * g.sigma_r, rel=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        origins = rng.uniform(0, 5, (4, 3))
        dirs = direction_from_angles(rng.uniform(0, np.pi, 4), rng.uniform(-np.pi, np.pi, 4))
        depths = stratified_depths(SamplerConfig(m=6), rng, (4,))
        mu, diag, mu_t = frustum_batch(origins, dirs, depths, 0.0017)
        g = frustum_gaussian(Ray(origins[2], dirs[2], 0.0017), depths[2, 3], depths[2, 4])
        np.testing.assert_allclose(mu[2, 3], g.mu, rtol=1e-14)
        np.testing.assert_allclose(diag[2, 3], g.diag_world, rtol=1e-14)
        assert mu_t[2, 3] == g.mu_t
