import math

import numpy as np
import pytest

from rsnl.core import (
    AdjustmentPrior,
    AdjustmentSettings,
    TrainingSet,
    build_joint_target,
    joint_log_density,
    run_rsnl,
    run_snl,
    snl_log_density,
    standardize,
    update_adjustment_prior,
)
from rsnl.flow import TrainConfig, init_flow, zero_conditioner_outputs
from rsnl.mcmc import McmcConfig
from rsnl.priors import ConditionalIntervalPrior, IndependentPrior


def make_training_set(thetas, summaries):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float).T).T
    summaries = np.atleast_2d(np.asarray(summaries, dtype=float).T).T
    return TrainingSet(thetas, summaries, np.zeros(len(thetas), dtype=int))


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


def test_standardize_two_points():
    data = make_training_set([[0.0], [1.0]], [[1.0], [3.0]])
    std_data, obs_std, stats = standardize(data, np.array([3.0]))
    assert stats.mean[0] == 2.0
    assert np.isclose(stats.std[0], math.sqrt(2.0))  # n-1 denominator
    assert np.isclose(obs_std[0], (3.0 - 2.0) / math.sqrt(2.0))
    assert np.allclose(std_data.summaries.mean(axis=0), 0.0)


def test_standardize_twice_is_idempotent():
    rng = np.random.default_rng(0)
    data = make_training_set(rng.standard_normal((50, 1)), rng.normal(3, 2, (50, 1)))
    std_data, _, _ = standardize(data, np.zeros(1))
    _, _, stats2 = standardize(std_data, np.zeros(1))
    assert np.allclose(stats2.mean, 0.0, atol=1e-12)
    assert np.allclose(stats2.std, 1.0, atol=1e-12)


def test_standardize_recovers_sampling_moments():
    rng = np.random.default_rng(1)
    data = make_training_set(rng.standard_normal((1000, 1)), rng.normal(5.0, 2.0, (1000, 1)))
    _, _, stats = standardize(data, np.array([5.0]))
    assert 4.8 <= stats.mean[0] <= 5.2
    assert 1.9 <= stats.std[0] <= 2.1


def test_standardize_floors_zero_variance():
    data = make_training_set([[0.0], [1.0], [2.0]], [[4.0], [4.0], [4.0]])
    with pytest.warns(UserWarning):
        _, obs_std, stats = standardize(data, np.array([4.0]))
    assert stats.std[0] > 0
    assert np.isfinite(obs_std[0])


# ---------------------------------------------------------------------------
# adjustment prior
# ---------------------------------------------------------------------------


def test_adjustment_prior_data_driven_scales():
    ap = update_adjustment_prior(np.array([0.0, 4.0]), tau=0.3)
    assert np.allclose(ap.scales, [0.01, 1.2])


def test_adjustment_prior_initial_round_is_unit_laplace():
    ap = update_adjustment_prior(np.array([3.0, -7.0]), initial=True)
    assert np.allclose(ap.scales, [1.0, 1.0])


def test_adjustment_prior_fixed_mode():
    ap = update_adjustment_prior(np.array([3.0, -7.0]), mode="fixed", fixed_scale=0.5)
    assert np.allclose(ap.scales, [0.5, 0.5])


def test_adjustment_prior_log_pdf_and_grad():
    ap = AdjustmentPrior(np.array([0.5, 2.0]))
    g = np.array([0.25, -1.0])
    expected = (-math.log(1.0) - 0.5) + (-math.log(4.0) - 0.5)
    assert np.isclose(ap.log_pdf(g), expected)
    assert np.allclose(ap.grad(g), [-2.0, 0.5])
    assert np.allclose(ap.grad(np.zeros(2)), 0.0)  # subgradient at the kink


# ---------------------------------------------------------------------------
# joint density
# ---------------------------------------------------------------------------


def _identity_setup(d=1, d_theta=1):
    from rsnl.core import StandardizationStats

    fp = zero_conditioner_outputs(init_flow(d, d_theta, np.random.default_rng(0)))
    stats = StandardizationStats(
        mean=np.zeros(d), std=np.ones(d), context_mean=np.zeros(d_theta), context_std=np.ones(d_theta)
    )
    return fp, stats


def test_joint_log_density_gamma_zero_is_laplace_mode_value():
    fp, stats = _identity_setup(d=2)
    ap = AdjustmentPrior(np.array([0.7, 1.3]))
    prior = IndependentPrior([("normal", 0.0, 10.0)])
    obs = np.array([0.5, -0.25])
    value, _, _ = joint_log_density(np.array([0.2]), np.zeros(2), fp, stats, ap, prior, obs)
    flow_term = -0.5 * np.sum(obs**2) - math.log(2 * math.pi)
    expected = flow_term + prior.log_pdf(np.array([0.2])) - np.log(2 * ap.scales).sum()
    assert np.isclose(value, expected)


def test_joint_log_density_identity_flow_shift_cancels():
    fp, stats = _identity_setup(d=1)
    ap = AdjustmentPrior(np.ones(1))
    prior = IndependentPrior([("normal", 0.0, 10.0)])
    value, _, _ = joint_log_density(
        np.array([0.0]), np.array([2.0]), fp, stats, ap, prior, np.array([2.0])
    )
    flow_term = value - prior.log_pdf(np.zeros(1)) - ap.log_pdf(np.array([2.0]))
    assert np.isclose(flow_term, -0.9189385332046727, atol=1e-10)


@pytest.mark.parametrize("seed", [0, 1])
def test_joint_log_density_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, d_theta = 3, 2
    fp = init_flow(d, d_theta, rng)
    from rsnl.core import StandardizationStats

    stats = StandardizationStats(
        mean=rng.standard_normal(d),
        std=rng.uniform(0.5, 2.0, d),
        context_mean=rng.standard_normal(d_theta),
        context_std=rng.uniform(0.5, 2.0, d_theta),
    )
    ap = AdjustmentPrior(rng.uniform(0.3, 1.5, d))
    prior = IndependentPrior([("normal", 0.0, 5.0), ("normal", 1.0, 2.0)])
    obs = rng.standard_normal(d)
    theta = rng.standard_normal(d_theta)
    gamma = rng.uniform(0.2, 0.8, d)  # stay away from the |.| kink

    value, g_t, g_g = joint_log_density(theta, gamma, fp, stats, ap, prior, obs)
    eps = 1e-5

    def f(th, ga):
        return joint_log_density(th, ga, fp, stats, ap, prior, obs)[0]

    for i in range(d_theta):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        fd = (f(tp, gamma) - f(tm, gamma)) / (2 * eps)
        assert abs(g_t[i] - fd) <= 1e-4 * max(abs(fd), 1e-2)
    for i in range(d):
        gp, gm = gamma.copy(), gamma.copy()
        gp[i] += eps
        gm[i] -= eps
        fd = (f(theta, gp) - f(theta, gm)) / (2 * eps)
        assert abs(g_g[i] - fd) <= 1e-4 * max(abs(fd), 1e-2)


def test_gamma_gradient_is_negated_summary_gradient_plus_laplace_score():
    from rsnl.core import StandardizationStats
    from rsnl.flow import flow_log_prob_grad

    rng = np.random.default_rng(3)
    d, d_theta = 2, 1
    fp = init_flow(d, d_theta, rng)
    stats = StandardizationStats(np.zeros(d), np.ones(d), np.zeros(d_theta), np.ones(d_theta))
    ap = AdjustmentPrior(np.array([0.9, 0.4]))
    prior = IndependentPrior([("normal", 0.0, 10.0)])
    obs = rng.standard_normal(d)
    theta = rng.standard_normal(d_theta)
    gamma = rng.uniform(-0.5, 0.5, d)

    _, _, g_g = joint_log_density(theta, gamma, fp, stats, ap, prior, obs)
    gx, _ = flow_log_prob_grad(fp, obs - gamma, theta)
    assert np.allclose(g_g, -gx + ap.grad(gamma), atol=1e-10)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


def test_independent_prior_uniform_support():
    prior = IndependentPrior([("uniform", -1.0, 1.0)])
    assert prior.log_pdf(np.array([0.3])) == pytest.approx(-math.log(2))
    assert prior.log_pdf(np.array([1.5])) == -np.inf
    draws = prior.sample(np.random.default_rng(0), 500)
    assert draws.min() >= -1 and draws.max() <= 1


def test_conditional_interval_prior_sampling_respects_ordering():
    prior = ConditionalIntervalPrior(0.5)
    draws = prior.sample(np.random.default_rng(1), 2000)
    rate1, rate2 = draws[:, 0], draws[:, 1]
    assert np.all(rate1 >= rate2)
    assert np.all((rate2 >= 0) & (rate1 <= 0.5))
    # rate2 marginal is U(0, 0.5)
    assert abs(rate2.mean() - 0.25) < 0.01


def test_conditional_interval_prior_pullback_matches_finite_differences():
    prior = ConditionalIntervalPrior(0.5)
    t = prior.transform()
    mu = np.array([0.2, 0.1])

    def lp_x(x):
        return float(-10.0 * np.sum((x - mu) ** 2)) + prior.log_pdf(x)

    def grad_x(x):
        return -20.0 * (x - mu) + prior.log_pdf_grad(x)

    u = np.array([0.3, -0.6])

    def lp_u(uv):
        return lp_x(t.inverse(uv)) + t.log_jacobian(uv)

    g = t.pullback_grad(u, grad_x(t.inverse(u)))
    eps = 1e-6
    for i in range(2):
        up, um = u.copy(), u.copy()
        up[i] += eps
        um[i] -= eps
        fd = (lp_u(up) - lp_u(um)) / (2 * eps)
        assert abs(g[i] - fd) < 1e-5


def test_triangle_transform_round_trip():
    t = ConditionalIntervalPrior(0.5).transform()
    x = np.array([0.3, 0.1])
    u, _ = t.forward(x)
    assert np.allclose(t.inverse(u), x, atol=1e-12)


# ---------------------------------------------------------------------------
# smoke runs of the sequential loop
# ---------------------------------------------------------------------------


def _gaussian_example():
    def simulate(theta, rng):
        return theta[0] + rng.standard_normal(40)

    def summarize(y):
        return np.array([np.mean(y), np.var(y, ddof=1)])

    prior = IndependentPrior([("normal", 0.0, 5.0)])
    observed = np.zeros(40) + 1.0
    return simulate, summarize, prior, observed


def smoke_configs():
    flow_cfg = TrainConfig(max_epochs=40, patience=8)
    mcmc_cfg = McmcConfig(chains=4, iterations=400, burn_in=200, thin=10)
    return flow_cfg, mcmc_cfg


def test_run_rsnl_smoke_shapes():
    simulate, summarize, prior, observed = _gaussian_example()
    flow_cfg, mcmc_cfg = smoke_configs()
    art = run_rsnl(
        simulate, summarize, prior, observed,
        n_rounds=1, n_sims_per_round=100,
        flow_config=flow_cfg, mcmc_config=mcmc_cfg,
        rng=np.random.default_rng(7),
    )
    # joint dimension: 1 theta + 2 summaries
    assert art.final_chains.draws.shape[0] == 4
    assert art.final_chains.draws.shape[2] == 3
    assert art.theta_samples.shape[1] == 1
    assert art.gamma_samples.shape[1] == 2
    assert art.n_simulations == 100
    assert art.method == "rsnl"
    assert len(art.rounds) == 1


def test_run_snl_smoke_shapes():
    simulate, summarize, prior, observed = _gaussian_example()
    flow_cfg, mcmc_cfg = smoke_configs()
    art = run_snl(
        simulate, summarize, prior, observed,
        n_rounds=1, n_sims_per_round=100,
        flow_config=flow_cfg, mcmc_config=mcmc_cfg,
        rng=np.random.default_rng(7),
    )
    assert art.final_chains.draws.shape[2] == 1
    assert art.gamma_samples is None
    assert art.final_adjustment is None


def test_run_rsnl_reproducible():
    simulate, summarize, prior, observed = _gaussian_example()
    flow_cfg, mcmc_cfg = smoke_configs()
    kwargs = dict(
        n_rounds=1, n_sims_per_round=60, flow_config=flow_cfg, mcmc_config=mcmc_cfg
    )
    a = run_rsnl(simulate, summarize, prior, observed, rng=np.random.default_rng(5), **kwargs)
    b = run_rsnl(simulate, summarize, prior, observed, rng=np.random.default_rng(5), **kwargs)
    assert np.array_equal(a.final_chains.draws, b.final_chains.draws)
    assert a.n_simulations == b.n_simulations


def test_run_budget_accounting_with_flaky_simulator():
    calls = {"n": 0}

    def simulate(theta, rng):
        calls["n"] += 1
        y = theta[0] + rng.standard_normal(30)
        if rng.uniform() < 0.1:
            y = y * np.nan  # non-finite simulation must be rejected and retried
        return y

    def summarize(y):
        return np.array([np.mean(y), np.var(y, ddof=1)])

    prior = IndependentPrior([("normal", 0.0, 5.0)])
    flow_cfg, mcmc_cfg = smoke_configs()
    art = run_rsnl(
        simulate, summarize, prior, np.ones(30),
        n_rounds=2, n_sims_per_round=50,
        flow_config=flow_cfg, mcmc_config=mcmc_cfg,
        rng=np.random.default_rng(11),
    )
    assert art.n_simulations == 100
    assert art.n_retries > 0
    assert calls["n"] == art.n_simulations + art.n_retries


def test_observed_summary_override():
    simulate, summarize, prior, observed = _gaussian_example()
    flow_cfg, mcmc_cfg = smoke_configs()
    fixture = np.array([0.013, 0.006])
    art = run_snl(
        simulate, summarize, prior, None,
        n_rounds=1, n_sims_per_round=60,
        flow_config=flow_cfg, mcmc_config=mcmc_cfg,
        rng=np.random.default_rng(3),
        observed_summary=fixture,
    )
    assert np.array_equal(art.observed_summary, fixture)


def test_well_specified_gamma_posteriors_match_priors():
    # with compatible summaries every adjustment posterior stays at its prior
    from rsnl.diagnostics import prior_posterior_distance
    from rsnl.simulators import get_simulator

    spec = get_simulator("well_specified_gaussian")
    # seed 2 gives a typical observation (summaries within 1 sampling sd of
    # their expectations); an atypical draw would legitimately shift the
    # adjustments, since their data-driven prior widens with |observed|
    observed_raw = spec.true_dgp(spec.theta_true, np.random.default_rng(2))
    art = run_rsnl(
        spec.simulate, spec.summarize, spec.prior, observed_raw,
        n_rounds=2, n_sims_per_round=250,
        flow_config=TrainConfig(max_epochs=150, patience=15),
        mcmc_config=McmcConfig(iterations=1000, burn_in=400),
        rng=np.random.default_rng(31),
    )
    report = prior_posterior_distance(
        art.gamma_samples, art.final_adjustment, rng=np.random.default_rng(32)
    )
    assert np.all(report.distances <= 0.2)
