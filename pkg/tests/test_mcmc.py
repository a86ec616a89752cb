import math
import warnings

import numpy as np
import pytest
from scipy import stats

from nemprice.errors import ValidationError
from nemprice.mcmc import (
    Block,
    RegressionData,
    RegressionFit,
    Sampler,
    SamplerConfig,
    SamplerState,
    dirichlet_weights,
    fit_data,
    fit_regression,
    inclusion_probability,
    neg_loglik,
    quadratic_interval,
)
from nemprice.market import MarketNetwork
from nemprice.spline import SplineBasis, build_LJ
from nemprice import truncnorm


def flat_data(y, m=3):
    y = np.asarray(y, dtype=float)
    basis = SplineBasis(np.arange(1, m + 1) / (m + 1))
    return RegressionData(y, [Block("supply", basis, np.zeros((len(y), basis.dim)), (0.0, 1.0))])


def state_for(data, labels, weights=(0.5, 0.3, 0.2), means=(0.0, -1.0, 1.0), variances=(1.0, 4.0, 4.0), z=np.inf):
    J = [np.zeros(b.dim, bool) for b in data.blocks]
    g = [np.zeros(b.dim) for b in data.blocks]
    return SamplerState(np.asarray(labels, dtype=np.int64), np.array(weights, float), np.array(means, float),
                        np.array(variances, float), J, g, z)


def oracle_neg_loglik(y, mu, labels, means, variances):
    sd = np.sqrt(np.asarray(variances))[labels]
    return -np.sum(stats.norm.logpdf(y, loc=mu + np.asarray(means)[labels], scale=sd))


# ------------------------------------------------------------------ neg_loglik
def test_neg_loglik_examples():
    d1 = flat_data([0.0])
    assert neg_loglik(state_for(d1, [0], variances=(1, 4, 4)), d1) == pytest.approx(0.5 * math.log(2 * math.pi))
    d2 = flat_data([1.0, -1.0])
    st = state_for(d2, [0, 0], variances=(1, 4, 4))
    assert neg_loglik(st, d2) == pytest.approx(math.log(2 * math.pi) + 1.0)
    st.variances[0] = 0.0
    with pytest.raises(ValidationError):
        neg_loglik(st, d2)


def test_neg_loglik_matches_density_product(rng):
    T, m = 200, 5
    x = rng.uniform(0, 1, T)
    y = 0.3 * x + rng.normal(0, 0.1, T)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=m)
    blk = data.blocks[0]
    J = rng.random(blk.dim) < 0.6
    J[0] = True
    gamma = np.zeros(blk.dim)
    gamma[J] = rng.uniform(0, 1, J.sum())
    st = SamplerState(rng.integers(0, 3, T), np.array([0.6, 0.3, 0.1]), np.array([0.0, -0.2, 0.3]),
                      np.array([0.01, 0.05, 0.09]), [J], [gamma])
    beta = np.linalg.inv(build_LJ(J, blk.basis.knots)) @ gamma[J]
    mu = blk.X[:, J] @ beta
    expect = oracle_neg_loglik(y, mu, st.labels, st.means, st.variances)
    assert neg_loglik(st, data) == pytest.approx(expect, rel=1e-10, abs=1e-10)


# ------------------------------------------------------------------ step 1
def test_step1(rng):
    data = flat_data(rng.normal(size=20))
    sm = Sampler(data, SamplerConfig(seed=1), state_for(data, np.zeros(20, int)))
    assert sm.step1_slice(0.0) == sm.s
    gaps = np.array([sm.step1_slice() - sm.s for _ in range(100_000)])
    assert gaps.min() >= 0
    assert stats.kstest(gaps, "expon").pvalue > 0.01


# ------------------------------------------------------------------ step 2
def _costs(e, means, variances):
    return 0.5 * np.log(2 * np.pi * np.asarray(variances)) + (e - np.asarray(means)) ** 2 / (2 * np.asarray(variances))


@pytest.mark.parametrize("slack_mode", ["all", "two", "current"])
def test_step2_label_frequencies(slack_mode):
    e = 0.3
    data = flat_data([e])
    means, variances, weights = (0.0, -1.0, 1.0), (1.0, 4.0, 4.0), (0.5, 0.3, 0.2)
    c = _costs(e, means, variances)
    # slack chosen so that the feasible set is all, {0, 2} or only the current label 0
    gaps = c - c[0]
    slack = {"all": gaps.max() + 0.1, "two": (gaps[2] + gaps[1]) / 2, "current": min(gaps[1], gaps[2]) / 2}[slack_mode]
    feasible = gaps < slack
    feasible[0] = True
    sm = Sampler(data, SamplerConfig(seed=0), state_for(data, [0], weights, means, variances))
    rng = np.random.default_rng(7)
    n = 100_000
    counts = np.zeros(3)
    for u in rng.random(n):
        sm.state.labels[0] = 0
        sm.s = c[0]
        sm.state.z = c[0] + slack
        sm.step2_labels(np.array([u]))
        counts[sm.state.labels[0]] += 1
    p = np.where(feasible, weights, 0.0)
    p /= p.sum()
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * se + 1e-12)
    if slack_mode == "current":
        assert counts[0] == n


# ------------------------------------------------------------------ step 3
def test_dirichlet_prior_uniform_on_simplex():
    rng = np.random.default_rng(3)
    w = np.array([dirichlet_weights([0, 0, 0], rng) for _ in range(20_000)])
    # marginal of Dirichlet(1,1,1) is Beta(1,2)
    assert stats.kstest(w[:, 0], stats.beta(1, 2).cdf).pvalue > 0.01


def test_step3_moment():
    labels = np.r_[np.zeros(7, int), np.ones(2, int), np.full(1, 2)]
    data = flat_data(np.zeros(10))
    sm = Sampler(data, SamplerConfig(seed=5), state_for(data, labels))
    w = np.array([sm.step3_weights().copy() for _ in range(100_000)])
    expect = (np.array([7, 2, 1]) + 1) / 13
    se = w.std(axis=0) / np.sqrt(len(w))
    assert np.all(np.abs(w.mean(axis=0) - expect) < 3 * se)


# ------------------------------------------------------------------ step 4
def _mixture_state(rng, T=60):
    y = rng.normal(0, 1, T)
    labels = rng.integers(0, 3, T)
    data = flat_data(y)
    st = state_for(data, labels, means=(0.1, -0.8, 1.2), variances=(0.5, 2.5, 3.0))
    return data, st


def _bisect(f, a, b, n=200):
    fa = f(a)
    for _ in range(n):
        mid = 0.5 * (a + b)
        if (f(mid) > 0) == (fa > 0):
            a, fa = mid, f(mid)
        else:
            b = mid
    return 0.5 * (a + b)


def test_step4_interval_matches_bisection(rng):
    data, st = _mixture_state(rng)
    sm = Sampler(data, SamplerConfig(seed=0), st)
    sm.step1_slice(2.0)
    for l in range(3):
        cur = st.means[l]

        def f(a, l=l):
            s2 = st.copy()
            s2.means[l] = a
            return neg_loglik(s2, data) - st.z

        lo = _bisect(f, cur, cur - 50)
        hi = _bisect(f, cur, cur + 50)
        bl, bu = sm.mean_interval(l)
        assert bl == pytest.approx(lo, abs=1e-8)
        assert bu == pytest.approx(hi, abs=1e-8)


def test_step4_empty_component_is_prior_and_order_only(rng):
    data = flat_data(rng.normal(size=10))
    st = state_for(data, np.zeros(10, int), means=(0.0, -1.0, 1.0))
    sm = Sampler(data, SamplerConfig(seed=0), st)
    assert sm.mean_interval(1) == (-np.inf, np.inf)
    draws = np.array([sm.step4_means(1) for _ in range(2000)])
    assert np.all(draws < st.means[0])
    # prior N(0, 100^2) truncated below alpha_1 = 0: half normal with sd 100
    assert stats.kstest(-draws, stats.halfnorm(scale=100).cdf).pvalue > 0.01


def test_step4_draws_truncated_normal(rng):
    data, st = _mixture_state(rng)
    sm = Sampler(data, SamplerConfig(seed=11), st)
    sm.step1_slice(1.5)
    z, s, a0 = st.z, sm.s, st.means.copy()
    bl, bu = sm.mean_interval(0)
    lo, hi = max(bl, a0[1]), min(bu, a0[2])
    draws = np.empty(100_000)
    for k in range(len(draws)):
        st.means[:] = a0
        sm.s, st.z = s, z
        draws[k] = sm.step4_means(0)
    ref = stats.truncnorm(lo / 100, hi / 100, scale=100)
    assert draws.min() > lo and draws.max() < hi
    assert stats.kstest(draws, ref.cdf).pvalue > 0.01


# ------------------------------------------------------------------ step 5
def test_step5_interval_matches_bracketing(rng):
    data, st = _mixture_state(rng)
    sm = Sampler(data, SamplerConfig(seed=0), st)
    sm.step1_slice(2.0)
    for l in range(3):
        cur = st.variances[l]

        def f(logv, l=l):
            s2 = st.copy()
            s2.variances[l] = math.exp(logv)
            return neg_loglik(s2, data) - st.z

        lo = math.exp(_bisect(f, math.log(cur), math.log(cur) - 30))
        hi = math.exp(_bisect(f, math.log(cur), math.log(cur) + 30))
        bl, bu = sm.var_interval(l)
        assert bl == pytest.approx(lo, rel=1e-8)
        assert bu == pytest.approx(hi, rel=1e-8)


def test_step5_constraints_and_uniformity(rng):
    data, st = _mixture_state(rng)
    sm = Sampler(data, SamplerConfig(seed=2), st)
    sm.step1_slice(1.0)
    z, s, v0 = st.z, sm.s, st.variances.copy()
    lo_c, hi_c = 0.0, 0.25 * min(v0[1], v0[2])
    lo, hi = sm.var_interval(0, lo_c, hi_c)
    draws = np.empty(100_000)
    for k in range(len(draws)):
        st.variances[:] = v0
        sm.s, st.z = s, z
        draws[k] = sm.step5_vars(0)
    assert draws.max() <= 0.25 * min(v0[1], v0[2])
    assert stats.kstest(draws, stats.uniform(lo, hi - lo).cdf).pvalue > 0.01


def test_step5_empty_component():
    data = flat_data(np.zeros(5))
    st = state_for(data, np.zeros(5, int), variances=(0.5, 3.0, 4.0))
    sm = Sampler(data, SamplerConfig(seed=0), st)
    assert sm.var_interval(2, 2.0, 100.0) == (2.0, 100.0)
    draws = [sm.step5_vars(2) for _ in range(500)]
    assert min(draws) >= 4 * st.variances[0] and max(draws) <= 100.0


# ------------------------------------------------------------------ step 6
def test_inclusion_probability_cases():
    assert inclusion_probability(True, None, 1.0, 0.8) == 0.0
    assert inclusion_probability(True, (0.0, np.inf), 3.0, 0.8) == pytest.approx(0.2)
    assert inclusion_probability(False, (0.0, 1.0), 3.0, 0.8) == 1.0
    mass = 2 * (stats.norm.cdf(1.0 / 3.0) - 0.5)
    assert inclusion_probability(True, (0.0, 1.0), 3.0, 0.8) == pytest.approx(0.2 * mass / (0.8 + 0.2 * mass))


def test_quadratic_interval():
    lo, hi = quadratic_interval(2.0, -6.0, 4.0)  # 2(x-1)(x-2)
    assert (lo, hi) == pytest.approx((1.0, 2.0))
    assert quadratic_interval(1.0, 0.0, 1.0) is None
    assert quadratic_interval(0.0, 2.0, -4.0) == (-np.inf, 2.0)


def test_step6_interval_is_slice(rng):
    T = 300
    x = rng.uniform(0, 1, T)
    y = 0.5 * x + 0.5 * np.maximum(x - 0.5, 0) ** 2 + rng.normal(0, 0.05, T)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=4)
    sm = Sampler(data, SamplerConfig(seed=3, check_slice=True))
    for _ in range(5):
        sm.sweep()
    sm.step1_slice(1.0)
    for j in range(data.blocks[0].dim):
        feasible0, eta0, iv, p, q = sm.coef_conditional(0, j)
        assert iv is not None
        lo, hi = iv
        for g in np.linspace(lo, min(hi, lo + 5), 7)[1:-1]:
            st = sm.state.copy()
            st.J[0][j] = True
            st.gamma[0][j] = g
            assert neg_loglik(st, data) < st.z
        if np.isfinite(hi):
            st = sm.state.copy()
            st.J[0][j] = True
            st.gamma[0][j] = hi * 1.01 + 1e-6
            assert neg_loglik(st, data) > st.z
        sm.step6_coef(0, j)


def test_truncated_mass_matches_rejection_in_context(rng):
    sd = 0.7
    lo, hi = 0.2, 0.9
    draws = np.abs(rng.normal(0, sd, 1_000_000))
    p = np.mean((draws > lo) & (draws < hi))
    se = np.sqrt(p * (1 - p) / len(draws))
    assert abs(2 * math.exp(truncnorm.log_mass(lo, hi, sd)) - p) < 3 * se


# ------------------------------------------------------------------ full sampler
def _curve_data(rng, T=400, noise=0.02):
    x = rng.uniform(500, 1500, T)
    b = (x - x.min()) / (x.max() - x.min())
    y = 6.9 + 0.2 * b + np.maximum(b - 0.5, 0) ** 2 + rng.normal(0, noise, T)
    return x, y


def test_invariants_every_sweep(rng):
    x, y = _curve_data(rng)
    y = y + np.where(rng.random(len(y)) < 0.1, rng.normal(0.3, 0.3, len(y)), 0)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=6)
    sm = Sampler(data, SamplerConfig(seed=4, check_slice=True))
    grid = np.linspace(0, 1, 401)
    blk = data.blocks[0]
    for it in range(60):
        sm.sweep()
        st = sm.state
        assert st.means[1] < st.means[0] < st.means[2]
        assert st.variances[0] < min(st.variances[1], st.variances[2])
        assert np.all(st.gamma[0] >= 0)
        assert np.all(st.gamma[0][~st.J[0]] == 0)
        assert sm.s < st.z
        beta = np.zeros(blk.dim)
        if st.J[0].any():
            beta[st.J[0]] = np.linalg.solve(build_LJ(st.J[0], blk.basis.knots), st.gamma[0][st.J[0]])
        f = blk.basis.matrix(grid) @ beta
        assert np.all(np.diff(f) >= -1e-12)


def test_reproducible_and_serializable(rng):
    x, y = _curve_data(rng, T=200)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=5)
    cfg = SamplerConfig(sweeps=60, burn_in=20, seed=9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = fit_data(data, cfg)
        b = fit_data(data, cfg)
    assert a.to_dict() == b.to_dict()
    back = RegressionFit.from_dict(a.to_dict(include_labels=True))
    np.testing.assert_allclose(back.supply_fn(x), a.supply_fn(x))
    np.testing.assert_allclose(back.label_probs.sum(axis=1), 1.0)
    assert back.mixture == a.mixture


def test_pure_noise_shrinkage(rng):
    T = 1000
    x = rng.uniform(0, 1, T)
    y = 6.9 + rng.normal(0, 0.05, T)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_data(data, SamplerConfig(sweeps=1500, burn_in=500, seed=1))
    assert np.all(fit.inclusion["supply"] < 0.35)


def test_label_switching_init_same_posterior(rng):
    from nemprice.mixture import MixtureParams

    T = 1500
    mp = MixtureParams((0.85, 0.1, 0.05), (0.0, -0.1, 0.4), (0.01, 0.05, 0.3))
    x = rng.uniform(0, 1, T)
    y = 0.2 * x + mp.sample(T, rng)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=5)
    cfg = SamplerConfig(sweeps=2000, burn_in=1000, seed=2)
    sm1 = Sampler(data, cfg)
    st2 = sm1.state.copy()
    swap = {0: 0, 1: 2, 2: 1}
    st2.labels = np.array([swap[v] for v in sm1.state.labels], dtype=np.int64)
    sm2 = Sampler(data, cfg, st2)
    from nemprice.mcmc import summarize

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f1 = summarize(sm1.run(), data, cfg)
        f2 = summarize(sm2.run(), data, cfg)
    np.testing.assert_allclose(f1.mixture.weights, f2.mixture.weights, atol=0.02)
    np.testing.assert_allclose(f1.mixture.means, f2.mixture.means, atol=0.05)
    np.testing.assert_allclose(np.log(f1.mixture.sds), np.log(f2.mixture.sds), atol=0.2)


def test_fit_regression_on_panel():
    from conftest import make_panel

    net = MarketNetwork.nem()
    ds = make_panel(net, T=300, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_regression(ds, "NSW", "VIC", SamplerConfig(sweeps=30, burn_in=10, n_knots=5))
    assert set(fit.cost_fns) == {"v5"}
    assert fit.supply_region == "NSW" and fit.price_region == "VIC"
    assert fit.eta_from_dataset(ds).shape == (300,)
    own = fit_regression(ds, "QLD", "QLD", SamplerConfig(sweeps=5, burn_in=5, n_knots=5))
    assert own.cost_fns == {}


def test_alpha_bar_is_per_sweep_disturbance_mean(rng):
    x, y = _curve_data(rng, T=200)
    data = RegressionData.from_covariates(y, {"supply": x}, n_knots=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit, summary = fit_data(data, SamplerConfig(sweeps=80, burn_in=20, seed=2), return_summary=True)
    per_sweep = [float(np.dot(summary.weights[k], summary.means[k])) for k in range(summary.n)]
    assert fit.alpha_bar == pytest.approx(np.mean(per_sweep), rel=1e-12)
    assert RegressionFit.from_dict(fit.to_dict()).alpha_bar == fit.alpha_bar


def test_summary_ignores_prior_only_draws_of_empty_component():
    from nemprice.mcmc import PosteriorSummary, summarize

    data = flat_data(np.linspace(6.8, 7.0, 50))
    n = 4
    summary = PosteriorSummary.empty(data, n, False)
    summary.n = n
    summary.weights[:] = [0.9, 0.08, 0.02]
    summary.means[:] = [6.9, 6.85, 7.3]
    summary.means[2:, 2] = 60.0  # component 3 empty in the last two sweeps
    summary.variances[:] = [1e-4, 1e-2, 0.25]
    summary.counts[:] = [45, 4, 1]
    summary.counts[2:] = [46, 4, 0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = summarize(summary, data, SamplerConfig())
    assert fit.mixture.means[2] == pytest.approx(7.3)
    assert fit.mixture.means[0] == pytest.approx(6.9)
    assert fit.alpha_bar == pytest.approx(np.mean(np.sum(summary.weights * summary.means, axis=1)))
