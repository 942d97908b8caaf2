import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lobliq.stats import (DomainError, FitError, delta_scan, equal_count_binning, exp_weights,
                          imbalance_conditionals, linear_fit, log_binning, power_law_fit)


def lognormal_cloud(rng, n, K, alpha, noise=0.3):
    L = np.exp(rng.normal(0, 1, n))
    return L, K * L ** (-alpha) * np.exp(noise * rng.standard_normal(n))


class TestLinearFit:
    def test_exact_line(self):
        x = np.array([0.0, 10, 20, 40, 80])
        f = linear_fit(x, 0.5 * x + 10)
        assert f.slope == pytest.approx(0.5, abs=1e-12)
        assert f.intercept == pytest.approx(10, abs=1e-9)
        assert f.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_needs_three_points(self):
        with pytest.raises(FitError):
            linear_fit([1, 2], [1, 2])

    def test_constant_abscissa(self):
        with pytest.raises(FitError):
            linear_fit([3, 3, 3], [1, 2, 3])

    def test_noisy_slope_within_3se(self):
        rng = np.random.default_rng(0)
        x = rng.exponential(100, 2000)
        f = linear_fit(x, 0.7 * x + 5 + rng.normal(0, 20, len(x)))
        assert abs(f.slope - 0.7) < 3 * f.se_slope


class TestPowerLaw:
    def test_exact(self):
        L = np.geomspace(0.1, 10, 50)
        f = power_law_fit(L, 2 * L ** -0.5)
        assert f.K == pytest.approx(2, rel=1e-12)
        assert f.alpha == pytest.approx(0.5, rel=1e-12)
        assert f.r_squared == pytest.approx(1, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_noisy_recovery(self, seed):
        rng = np.random.default_rng(seed)
        L, r = lognormal_cloud(rng, 5000, 0.3, 0.28)
        f = power_law_fit(L, r)
        assert abs(f.alpha - 0.28) < 3 * f.se_alpha
        assert abs(f.K - 0.3) < 3 * f.se_K

    def test_nonlinear_mode_agrees_on_exact_data(self):
        L = np.geomspace(0.1, 10, 40)
        f = power_law_fit(L, 1.5 * L ** -0.8, method="nonlinear")
        assert f.method == "nonlinear"
        assert f.alpha == pytest.approx(0.8, rel=1e-8)
        assert f.K == pytest.approx(1.5, rel=1e-8)

    @pytest.mark.parametrize("L,r", [([1, 0, 2], [1, 1, 1]), ([1, 2, 3], [1, -1, 1])])
    def test_domain(self, L, r):
        with pytest.raises(DomainError):
            power_law_fit(L, r)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 100), st.integers(0, 10**6))
    def test_rescaling_equivariance(self, c, seed):
        rng = np.random.default_rng(seed)
        L, r = lognormal_cloud(rng, 200, 0.5, 0.4)
        a, b = power_law_fit(L, r), power_law_fit(c * L, r)
        assert b.alpha == pytest.approx(a.alpha, rel=1e-9, abs=1e-12)
        assert b.r_squared == pytest.approx(a.r_squared, rel=1e-9, abs=1e-12)
        assert b.K == pytest.approx(a.K * c ** a.alpha, rel=1e-9)

    def test_se_scales_as_inverse_sqrt_n(self):
        rng = np.random.default_rng(1)
        se = {}
        for n in (10**3, 10**4, 10**5):
            L, r = lognormal_cloud(rng, n, 0.3, 0.3)
            se[n] = power_law_fit(L, r).se_alpha
        for n in (10**3, 10**4):
            ratio = se[n] / se[10 * n]
            assert ratio == pytest.approx(np.sqrt(10), rel=0.2)


class TestLogBinning:
    def test_one_point_per_bin(self):
        c = log_binning([1, 10, 100], [1, 2, 3], 3, min_count=1)
        assert c.counts.tolist() == [1, 1, 1]
        assert c.means.tolist() == [1, 2, 3]

    def test_constant_ordinate(self):
        rng = np.random.default_rng(2)
        c = log_binning(np.exp(rng.normal(0, 1, 2000)), np.full(2000, 4.5), 10)
        assert np.all(c.means == 4.5)
        assert np.all(c.se == 0)

    def test_small_bins_merge(self):
        rng = np.random.default_rng(3)
        x = np.exp(rng.normal(0, 1, 500))
        c = log_binning(x, x, 30, min_count=30)
        assert c.counts.sum() == 500
        assert np.all(c.counts >= 30)
        assert np.all(np.diff(c.edges) > 0)

    def test_binned_means_follow_exact_power_law(self):
        L = np.geomspace(0.05, 20, 20000)
        r = 0.3 * L ** -0.28
        fit = power_law_fit(L, r)
        c = log_binning(L, r, 15)
        # a bin mean differs from the curve at the bin centre only by curvature within the bin
        width = np.log(c.edges[1:] / c.edges[:-1])
        bound = (fit.alpha * width) ** 2 / 8 * 1.5
        assert np.all(np.abs(np.log(c.means / fit.predict(c.bin_centers))) <= bound + 1e-12)


def test_equal_count_binning():
    x = np.arange(100, dtype=float)
    c = equal_count_binning(x, 2 * x, 10)
    assert c.counts.tolist() == [10] * 10
    assert np.allclose(c.means, 2 * c.bin_centers)


def planted_windows(rng, n, delta=5.0, depth=40, noise=0.2):
    ask = rng.poisson(rng.exponential(60, (n, 1)) * np.ones(depth))
    bid = rng.poisson(rng.exponential(60, (n, 1)) * np.ones(depth))
    # independent level-by-level scale so that different deltas give different orderings
    ask = (ask * np.exp(rng.normal(0, 0.8, (n, depth)))).round()
    bid = (bid * np.exp(rng.normal(0, 0.8, (n, depth)))).round()
    ask[:, 0] += 1  # keep every side non-empty so L > 0
    bid[:, 0] += 1
    la = ask @ exp_weights(delta, depth) / 100
    lb = bid @ exp_weights(delta, depth) / 100
    sign = rng.choice([-1.0, 1.0], n)
    mag = np.where(sign > 0, 0.002 * la ** -0.4, 0.002 * lb ** -0.4) * np.exp(noise * rng.standard_normal(n))
    return ask, bid, sign * mag


class TestDeltaScan:
    def test_planted_delta(self):
        rng = np.random.default_rng(4)
        ask, bid, r = planted_windows(rng, 4000)
        deltas = list(range(1, 21))
        for sign in (1, -1):
            scan = delta_scan(ask, bid, r, deltas, sign, norm=100)
            assert scan.best_delta == 5

    def test_null_is_flat(self):
        rng = np.random.default_rng(5)
        ask, bid, _ = planted_windows(rng, 4000)
        r = rng.choice([-1, 1], 4000) * np.exp(rng.normal(-6, 0.5, 4000))
        scan = delta_scan(ask, bid, r, [1, 2, 5, 10, 20], 1, norm=100)
        # R^2 ~ 1/n under the null; 0.005 is many standard deviations out
        assert np.all(scan.r_squared < 0.005)

    def test_workers_give_identical_results(self):
        rng = np.random.default_rng(6)
        ask, bid, r = planted_windows(rng, 1000)
        a = delta_scan(ask, bid, r, range(1, 21), 1, 100, workers=1)
        b = delta_scan(ask, bid, r, range(1, 21), 1, 100, workers=4)
        assert np.array_equal(a.r_squared, b.r_squared)

    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            delta_scan(np.ones((5, 3)), np.ones((5, 3)), np.ones(5), [0, 1])


class TestImbalanceConditionals:
    def test_zero_returns(self):
        rng = np.random.default_rng(7)
        c, f = imbalance_conditionals(rng.uniform(-1, 1, 5000), np.zeros(5000), 10)
        assert np.all(c.means == 0)
        assert np.all(f.zero == 1)

    def test_cubic_rule_recovered(self):
        rng = np.random.default_rng(8)
        li = rng.uniform(-1, 1, 40000)
        r = 0.004 * li ** 3 + rng.normal(0, 0.001, len(li))
        c, _ = imbalance_conditionals(li, r, 20)
        which = np.clip(np.floor((li + 1) / 2 * 20).astype(int), 0, 19)
        truth = np.array([np.mean(0.004 * li[which == k] ** 3) for k in range(20)])
        assert np.all(np.abs(c.means - truth) < 3 * c.se)
        # monotone wherever the true step between neighbouring bins is resolvable
        resolvable = np.diff(truth) > 4 * np.hypot(c.se[1:], c.se[:-1])
        assert resolvable.sum() >= 10
        assert np.all(np.diff(c.means)[resolvable] > 0)

    def test_frequencies_sum_to_one_exactly(self):
        rng = np.random.default_rng(9)
        li = rng.uniform(-1, 1, 3000)
        r = rng.choice([-1.0, 0.0, 1.0], 3000)
        _, f = imbalance_conditionals(li, r, 12)
        assert np.array_equal(f.n_positive + f.n_zero + f.n_negative, f.counts)
        assert np.allclose(f.positive + f.zero + f.negative, 1, rtol=0, atol=4 * np.finfo(float).eps)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(10)
        li = rng.uniform(-1, 1, 6000)
        r = 0.002 * li + rng.normal(0, 0.001, 6000)
        c, f = imbalance_conditionals(li, r, 10, min_count=1)
        cm, fm = imbalance_conditionals(-li, -r, 10, min_count=1)
        # bin edges are symmetric, so only values exactly on an edge could move; there are none here
        assert np.allclose(cm.means[::-1], -c.means, rtol=1e-12, atol=1e-18)
        assert np.array_equal(fm.n_positive[::-1], f.n_negative)
        assert np.array_equal(fm.n_negative[::-1], f.n_positive)

    def test_sparse_bins_dropped_with_warning(self):
        li = np.concatenate([np.full(100, 0.5), [-0.9]])
        with pytest.warns(RuntimeWarning):
            c, _ = imbalance_conditionals(li, np.ones(101), 10)
        assert c.counts.tolist() == [100]

    def test_nan_imbalance_ignored(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            c, _ = imbalance_conditionals([np.nan] * 40 + [0.1] * 40, [1.0] * 80, 4)
        assert c.counts.sum() == 40

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            imbalance_conditionals([1.5] * 40, [0.0] * 40, 4)
