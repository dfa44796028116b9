import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from claimcast import autodiff as ad
from claimcast import distributions as D


def random_params(rng, n):
    raw = np.column_stack([
        rng.uniform(-3, 3, n), rng.uniform(-3, 3, n),
        rng.uniform(-2, 3, n), rng.uniform(-300, 300, n),
    ])
    return D.MixtureParams(raw)


class TestMixingWeights:
    def test_equal_logits(self):
        assert D.mixing_weights(0.0, 0.0) == (0.5, 0.5)

    @pytest.mark.parametrize("t", [-50.0, -1.0, 3.7, 800.0])
    def test_shift_invariance(self, t):
        w1, w2 = D.mixing_weights(t, t)
        assert w1 == 0.5 and w2 == 0.5

    def test_large_logit_against_high_precision(self):
        w1, w2 = D.mixing_weights(1000.0, 0.0)
        mpmath.mp.dps = 50
        ref2 = mpmath.exp(0) / (mpmath.exp(1000) + mpmath.exp(0))
        assert w1 == pytest.approx(1.0)
        assert w2 == pytest.approx(float(ref2), rel=1e-12)
        assert math.isfinite(w1) and math.isfinite(w2)


class TestLognormalScale:
    def test_at_zero(self):
        assert D.lognormal_scale(0.0) == pytest.approx(0.351, abs=1e-15)

    def test_limits(self):
        assert D.lognormal_scale(1e5) == pytest.approx(0.701)
        assert D.lognormal_scale(-1e5) == pytest.approx(0.001)

    def test_monotone(self):
        v = np.linspace(-1000, 1000, 2001)
        assert np.all(np.diff(D.lognormal_scale(v)) > 0)


class TestMixtureLogprob:
    def test_pure_atom(self):
        p = D.MixtureParams(np.array([-40.0, 40.0, 0.0, 0.0]))
        assert D.mixture_logprob(0.0, p) == pytest.approx(0.0, abs=1e-30)

    def test_positive_value_against_scipy(self):
        mu = math.log(5.001)
        p = D.MixtureParams(np.array([50.0, -50.0, mu, 0.0]))
        ref = stats.lognorm(s=0.351, scale=math.exp(mu)).logpdf(5.001)
        assert D.mixture_logprob(5.0, p) == pytest.approx(ref, rel=1e-12)

    def test_zero_with_equal_weights(self):
        p = D.MixtureParams(np.array([0.0, 0.0, 0.5, 0.0]))
        f0 = stats.lognorm(s=0.351, scale=math.exp(0.5)).pdf(0.001)
        assert D.mixture_logprob(0.0, p) == pytest.approx(math.log(0.5 * f0 + 0.5), rel=1e-12)

    def test_negative_target_rejected(self):
        p = D.MixtureParams(np.zeros(4))
        with pytest.raises(ValueError):
            D.mixture_logprob(-1.0, p)
        with pytest.raises(ValueError):
            D.shifted_lognormal_logpdf(-0.002, 0.0, 0.3)

    def test_normalizes_to_one(self):
        rng = np.random.default_rng(1)
        p = random_params(rng, 50)
        for i in range(50):
            mu, s, w1, w2 = p.mu[i], p.sigma_ln[i], p.w1[i], p.w2[i]
            peak = math.exp(mu) - D.SHIFT
            f = lambda y: w1 * math.exp(D.shifted_lognormal_logpdf(y, mu, s))  # noqa: E731
            lo = integrate.quad(f, -D.SHIFT, peak, limit=200, epsabs=1e-12)[0]
            hi = integrate.quad(f, peak, math.inf, limit=200, epsabs=1e-12)[0]
            assert abs(lo + hi + w2 - 1.0) < 1e-6

    def test_continuity_in_params(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, 20)
        y = rng.uniform(0.5, 20, 20)
        bumped = D.MixtureParams(p.raw + 1e-8)
        assert np.max(np.abs(D.mixture_logprob(y, p) - D.mixture_logprob(y, bumped))) < 1e-4

    def test_graph_matches_numpy(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 12)
        y = np.where(rng.random(12) < 0.4, 0.0, rng.uniform(0, 30, 12))
        node = D.mixture_logprob_graph(y, ad.constant(p.raw))
        np.testing.assert_allclose(node.value, D.mixture_logprob(y, p), rtol=1e-12)


class TestMixtureMean:
    def test_no_payment_weight(self):
        p = D.MixtureParams.from_components(0.0, 1.0, 0.3)
        assert D.mixture_mean(p) == 0.0

    def test_degenerate_lognormal(self):
        p = D.MixtureParams.from_components(1.0, 0.0, 0.0010001)
        assert D.mixture_mean(p) == pytest.approx(0.999, abs=1e-6)

    def test_monte_carlo(self):
        p = D.MixtureParams.from_components(0.5, 1.0, 0.5)
        draws = D.mixture_sample(p, np.random.default_rng(7), size=10**6)
        assert draws.mean() == pytest.approx(float(D.mixture_mean(p)), rel=5e-3)


class TestMixtureSample:
    def test_point_mass(self):
        p = D.MixtureParams(np.array([-60.0, 60.0, 2.0, 0.0]))
        assert np.all(D.mixture_sample(p, np.random.default_rng(0), size=1000) == 0)

    def test_zero_frequency_binomial(self):
        p = D.MixtureParams.from_components(0.3, 1.0, 0.4)
        n = 10**5
        draws = D.mixture_sample(p, np.random.default_rng(3), size=n)
        w2 = float(p.w2)
        sd = math.sqrt(n * w2 * (1 - w2))
        assert abs(np.sum(draws == 0) - n * w2) < 3 * sd

    def test_mean_of_many_draws(self):
        p = D.MixtureParams.from_components(0.7, 0.2, 0.6)
        draws = D.mixture_sample(p, np.random.default_rng(5), size=10**6)
        assert draws.mean() == pytest.approx(float(D.mixture_mean(p)), rel=1e-2)

    def test_shape(self):
        p = random_params(np.random.default_rng(0), 3)
        assert D.mixture_sample(p, np.random.default_rng(1), size=4).shape == (4, 3)


def kl_monte_carlo(mean, scale, n, rng):
    z = rng.standard_normal((n, mean.size))
    w = mean + scale * z
    log_q = stats.norm.logpdf(w, mean, scale).sum(axis=1)
    log_p = stats.norm.logpdf(w).sum(axis=1)
    return float(np.mean(log_q - log_p))


class TestGaussianKL:
    def test_identical(self):
        assert D.gaussian_kl_std_normal(D.GaussianPosterior.from_scale(0.0, 1.0)) == pytest.approx(0.0, abs=1e-15)

    def test_unit_shift(self):
        assert D.gaussian_kl_std_normal(D.GaussianPosterior.from_scale(1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)

    def test_monte_carlo(self):
        post = D.GaussianPosterior.from_scale(np.array([0.3]), np.array([0.8]))
        mc = kl_monte_carlo(np.array([0.3]), np.array([0.8]), 10**6, np.random.default_rng(0))
        assert D.gaussian_kl_std_normal(post) == pytest.approx(mc, rel=1e-2)

    def test_graph_matches_numpy(self):
        rng = np.random.default_rng(9)
        m, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        node = D.gaussian_kl_graph(ad.constant(m), ad.constant(r))
        assert float(node.value) == pytest.approx(D.gaussian_kl_std_normal(D.GaussianPosterior(m, r)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.lists(st.floats(0.05, 4), min_size=5, max_size=5))
def test_kl_nonnegative(means, scales):
    post = D.GaussianPosterior.from_scale(np.array(means), np.array(scales[:len(means)]))
    assert D.gaussian_kl_std_normal(post) >= -1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_scale_strictly_inside_bounds(v4):
    s = D.lognormal_scale(v4)
    assert 0.001 < s < 0.701


@pytest.mark.parametrize("seed", range(5))
def test_sample_mean_matches_closed_form(seed):
    rng = np.random.default_rng(100 + seed)
    p = D.MixtureParams.from_components(rng.uniform(0.1, 0.9), rng.uniform(-1, 2), rng.uniform(0.05, 0.7))
    draws = D.mixture_sample(p, rng, size=4 * 10**5)
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - float(D.mixture_mean(p))) < 5 * se
