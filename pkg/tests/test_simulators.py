import math

import numpy as np
import pytest
import scipy.stats
from scipy.integrate import solve_ivp

from rsnl.simulators import (
    SimulatorSpec,
    SirConfig,
    autocov_summaries,
    cn_simulate,
    cn_summaries,
    cn_true_simulate,
    get_simulator,
    ma1_simulate,
    simulator_names,
    sir_simulate,
    sir_summaries,
    sir_true_simulate,
    slcp_contaminate,
    slcp_simulate,
    stable_sample,
    sv_true_simulate,
    toad_simulate,
    toad_summaries,
)


# ---------------------------------------------------------------------------
# contaminated normal
# ---------------------------------------------------------------------------


def test_cn_simulate_moments():
    y = cn_simulate(0.0, n=10_000, rng=np.random.default_rng(0))
    assert -0.04 <= y.mean() <= 0.04
    assert 0.95 <= y.var(ddof=1) <= 1.05


def test_cn_mean_summary_map_is_theta_one():
    # expected summaries b(theta) = (theta, 1)
    rng = np.random.default_rng(1)
    sums = np.array([cn_summaries(cn_simulate(1.0, rng=rng)) for _ in range(2000)])
    assert abs(sums[:, 0].mean() - 1.0) < 0.02
    assert abs(sums[:, 1].mean() - 1.0) < 0.02


def test_cn_simulate_deterministic():
    a = cn_simulate(0.3, rng=np.random.default_rng(7))
    b = cn_simulate(0.3, rng=np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_cn_true_simulate_degenerate_mixture_matches_assumed():
    a = cn_true_simulate(0.5, omega=1.0, n=10_000, rng=np.random.default_rng(2))
    b = cn_simulate(0.5, n=10_000, rng=np.random.default_rng(3))
    assert scipy.stats.ks_2samp(a, b).pvalue > 0.001


def test_cn_true_simulate_mixture_variance():
    # 0.8 * 1 + 0.2 * 2.5^2 = 2.05
    rng = np.random.default_rng(4)
    vars_ = [cn_true_simulate(1.0, rng=rng).var(ddof=1) for _ in range(2000)]
    assert abs(np.mean(vars_) - 2.05) < 0.05


def test_cn_variance_summary_is_incompatible():
    rng = np.random.default_rng(5)
    sums = np.array([cn_summaries(cn_true_simulate(1.0, rng=rng)) for _ in range(500)])
    assert sums[:, 1].mean() > 1.5  # far from the assumed model's value 1


def test_cn_summaries_hand_values():
    assert np.allclose(cn_summaries(np.array([1.0, 2.0, 3.0])), [2.0, 1.0])
    assert cn_summaries(np.full(10, 3.3))[1] == 0.0


def test_cn_summaries_large_sample():
    y = np.random.default_rng(6).standard_normal(100_000)
    s = cn_summaries(y)
    assert abs(s[0]) < 0.02 and abs(s[1] - 1.0) < 0.02


def test_cn_summaries_raw_mode():
    y = np.random.default_rng(7).standard_normal(100)
    assert np.array_equal(cn_summaries(y, raw=True), y)


# ---------------------------------------------------------------------------
# MA(1) and stochastic volatility
# ---------------------------------------------------------------------------


def test_ma1_white_noise_case():
    y = ma1_simulate(0.0, T=100_000, rng=np.random.default_rng(8))
    assert abs(autocov_summaries(y)[1]) < 0.02


def test_ma1_expected_summaries():
    # b(theta) = (1 + theta^2, theta); lag-1 carries the (T-1)/T factor
    rng = np.random.default_rng(9)
    sums = np.array([autocov_summaries(ma1_simulate(0.5, rng=rng)) for _ in range(10_000)])
    mean = sums.mean(axis=0)
    assert abs(mean[0] - 1.25) < 0.03
    assert abs(mean[1] - 0.5 * 99 / 100) < 0.03


def test_ma1_domain_error():
    with pytest.raises(ValueError):
        ma1_simulate(1.5, rng=np.random.default_rng(0))


def test_ma1_deterministic():
    a = ma1_simulate(0.4, rng=np.random.default_rng(10))
    b = ma1_simulate(0.4, rng=np.random.default_rng(10))
    assert np.array_equal(a, b)


def test_sv_expected_first_summary():
    # E zeta_0 = exp(omega/(1-kappa) + sigma_v^2/(2(1-kappa^2))) ~= 0.000702
    expected = math.exp(-0.76 / 0.1 + 0.36**2 / (2 * (1 - 0.81)))
    assert abs(expected - 0.0007) < 5e-5  # sanity on the closed form
    rng = np.random.default_rng(11)
    sums = np.array([autocov_summaries(sv_true_simulate(rng=rng)) for _ in range(3000)])
    assert abs(sums[:, 0].mean() - expected) < 5e-5
    assert abs(sums[:, 1].mean()) < 5e-5


def test_sv_degenerate_volatility_is_white_noise():
    y = sv_true_simulate(omega=0.0, kappa=0.5, sigma_v=1e-6, T=10_000,
                         rng=np.random.default_rng(12))
    assert abs(y.var(ddof=1) - 1.0) < 0.05
    assert abs(autocov_summaries(y)[1]) < 0.05


def test_autocov_hand_computation():
    assert np.allclose(autocov_summaries(np.ones(4)), [1.0, 0.75])


def test_autocov_white_noise():
    x = np.random.default_rng(13).standard_normal(100_000)
    s = autocov_summaries(x)
    assert abs(s[0] - 1.0) < 0.02 and abs(s[1]) < 0.02


# ---------------------------------------------------------------------------
# SLCP
# ---------------------------------------------------------------------------


def test_slcp_identity_covariance_case():
    rng = np.random.default_rng(14)
    draws = np.array([slcp_simulate(np.array([0, 0, 1, 1, 0.0]), rng, 1) for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)
    cov = np.cov(draws.T)
    assert np.all(np.abs(cov - np.eye(2)) < 0.05)


def test_slcp_extreme_correlation_stays_valid():
    rng = np.random.default_rng(15)
    draws = np.array([slcp_simulate(np.array([0, 0, 1, 1, 50.0]), rng, 1) for _ in range(4000)])
    corr = np.corrcoef(draws.T)[0, 1]
    assert corr > 0.99


def test_slcp_reference_covariance():
    theta = np.array([0.7, -2.9, -1.0, -0.9, 0.6])
    s1, s2, rho = 1.0, 0.81, math.tanh(0.6)
    analytic = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    rng = np.random.default_rng(16)
    draws = np.array([slcp_simulate(theta, rng, 1) for _ in range(100_000)])
    cov = np.cov(draws.T)
    assert np.all(np.abs(cov - analytic) <= 0.02 * np.abs(analytic).max())
    assert np.all(np.abs(draws.mean(axis=0) - theta[:2]) < 0.02)


def test_slcp_contamination_variance():
    rng = np.random.default_rng(17)
    x5 = np.zeros(2)
    draws = np.array([slcp_contaminate(x5, rng) for _ in range(20_000)])
    # contamination adds 100 z with z ~ N(0, 100 I): variance 100^2 * 100
    assert np.all(np.abs(draws.var(axis=0) - 1e6) < 0.05e6)


def test_slcp_contaminate_zero_noise_is_identity():
    class _ZeroRng:
        def standard_normal(self, size):
            return np.zeros(size)

    x5 = np.array([1.5, -2.0])
    assert np.array_equal(slcp_contaminate(x5, _ZeroRng()), x5)


def test_slcp_observed_fixture_draw():
    spec = get_simulator("contaminated_slcp")
    raw, summary = spec.observed(np.random.default_rng(0))
    assert summary.shape == (10,)
    assert np.allclose(summary[8:], [23.41, -178.90])


# ---------------------------------------------------------------------------
# SIR
# ---------------------------------------------------------------------------


def test_sir_deterministic_matches_reference_integrator():
    cfg = SirConfig(volatility=0.0)
    beta, eta = 0.15, 0.1
    i0 = cfg.initial_infected / cfg.population
    sol = solve_ivp(
        lambda t, y: [-beta * y[0] * y[1], beta * y[0] * y[1] - eta * y[1]],
        (0, cfg.days),
        [1 - i0, i0],
        t_eval=np.arange(1, cfg.days + 1),
        rtol=1e-10,
        atol=1e-12,
    )
    ref = sol.y[1] * cfg.population
    em = sir_simulate(beta, eta, cfg, np.random.default_rng(0))
    assert np.max(np.abs(em - ref)) / ref.max() <= 0.01


def test_sir_no_growth_at_threshold():
    cfg0 = SirConfig(volatility=0.0)
    peak = sir_simulate(0.2, 0.2, cfg0, np.random.default_rng(1)).max()
    assert peak <= 100.0 * 1.5
    peak_stoch = sir_simulate(0.2, 0.2, rng=np.random.default_rng(2)).max()
    assert peak_stoch <= 100.0 * 1.5


def test_sir_autocorrelation_tightly_concentrated_near_one():
    rng = np.random.default_rng(3)
    acs = []
    for _ in range(20):
        infected = sir_simulate(0.15, 0.1, rng=rng)
        s = sir_summaries(infected)
        assert np.all(np.isfinite(s))
        acs.append(s[5])
    acs = np.array(acs)
    assert np.all(acs > 0.995)
    assert acs.std() < 0.002


def test_sir_true_artifact_disabled_is_identity():
    a = sir_simulate(0.15, 0.1, rng=np.random.default_rng(4))
    b = sir_true_simulate(0.15, 0.1, rng=np.random.default_rng(4), apply_artifact=False)
    assert np.array_equal(a, b)


def test_sir_true_weekly_periodicity():
    infected = sir_true_simulate(0.15, 0.1, rng=np.random.default_rng(5))
    d = np.diff(infected)
    spec = np.abs(np.fft.rfft(d - d.mean()))
    week = len(d) / 7.0
    harmonics = {round(h * week) + o for h in (1, 2, 3) for o in (-1, 0, 1)}
    # the dominant line sits on a weekly harmonic and the fundamental is strong
    assert int(np.argmax(spec[1:]) + 1) in harmonics
    med = np.median(spec[1:])
    assert spec[round(week)] > 3 * med
    energy = sum(spec[k] ** 2 for k in harmonics if k < spec.size)
    assert energy / np.sum(spec[1:] ** 2) > 0.3


def test_sir_true_autocorrelation_below_assumed():
    rng = np.random.default_rng(6)
    ac_true = np.mean(
        [sir_summaries(sir_true_simulate(0.15, 0.1, rng=rng))[5] for _ in range(10)]
    )
    ac_assumed = np.mean(
        [sir_summaries(sir_simulate(0.15, 0.1, rng=rng))[5] for _ in range(10)]
    )
    assert 0.99 < ac_true < ac_assumed  # reporting artifact lowers persistence


def test_sir_summaries_hand_values():
    infected = np.array([1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 0.0])
    s = sir_summaries(infected)
    assert s[2] == 3.0  # max
    assert s[3] == 2.0  # day of max (0-indexed)
    assert s[4] == 2.0  # cumsum (1,3,6,...) first exceeds 4.5 at index 2


def test_sir_summaries_ramp_half_day():
    infected = np.arange(100, dtype=float)
    s = sir_summaries(infected)
    assert abs(s[4] - 100 / math.sqrt(2)) <= 2.0


def test_sir_summaries_constant_flagged():
    with pytest.warns(UserWarning):
        s = sir_summaries(np.full(30, 7.0))
    assert s[5] == 0.0


# ---------------------------------------------------------------------------
# alpha-stable and toads
# ---------------------------------------------------------------------------


def test_stable_alpha2_is_gaussian_with_variance_2d2():
    delta = 1.3
    x = stable_sample(2.0, delta, np.random.default_rng(18), size=100_000)
    assert abs(x.var() - 2 * delta**2) / (2 * delta**2) < 0.05


def test_stable_alpha2_normality():
    x = stable_sample(2.0, 1.0, np.random.default_rng(19), size=10_000)
    result = scipy.stats.anderson(x, dist="norm")
    # statistic below the 1% critical value implies p > 0.01 > 0.001
    assert result.statistic < result.critical_values[-1]


def test_stable_alpha1_is_cauchy():
    delta = 0.8
    x = stable_sample(1.0, delta, np.random.default_rng(20), size=100_000)
    iqr = np.quantile(x, 0.75) - np.quantile(x, 0.25)
    assert abs(iqr - 2 * delta) / (2 * delta) < 0.05


def test_stable_symmetry():
    x = stable_sample(1.5, 1.0, np.random.default_rng(21), size=50_000)
    assert abs(np.median(x)) < 0.05


def test_toad_always_return_degenerate():
    m = toad_simulate(1.7, 35.0, 1.0, rng=np.random.default_rng(22))
    assert np.array_equal(m, np.zeros_like(m))


def test_toad_never_return_is_stable_walk():
    rng = np.random.default_rng(23)
    m = toad_simulate(1.6, 30.0, 0.0, ndays=63, ntoads=66, rng=rng)
    steps = (m[1:] - m[:-1]).ravel()
    fresh = stable_sample(1.6, 30.0, np.random.default_rng(24), size=steps.size)
    assert scipy.stats.ks_2samp(steps, fresh).pvalue > 0.001


def test_toad_default_shape():
    m = toad_simulate(1.7, 35.0, 0.6, rng=np.random.default_rng(25))
    assert m.shape == (63, 66)


def test_toad_summaries_all_short_displacements():
    m = np.cumsum(np.full((12, 3), 0.01), axis=0)
    with pytest.warns(UserWarning):
        s = toad_summaries(m)
    assert s.shape == (48,)
    assert s[0] == 11 * 3  # lag-1 displacement count
    assert np.all(s[1:12] == 0.0)


def test_toad_summaries_known_quantiles():
    # lag-1 displacements are exactly 20 * 2^k, k = 0..10: the 0, 0.1, ..., 1
    # quantiles hit the sorted values and all log-differences equal log 2
    ndays = 12
    m = np.zeros((ndays, 1))
    for d in range(1, ndays):
        m[d, 0] = m[d - 1, 0] + 20.0 * 2 ** (d - 1)
    s = toad_summaries(m)
    assert s[0] == 0.0  # no displacement below 10 m at lag 1
    assert s[1] == 20.0 * 2**5  # median of 11 values
    assert np.allclose(s[2:12], math.log(2.0))


def test_toad_summaries_dimension():
    m = toad_simulate(1.7, 35.0, 0.6, rng=np.random.default_rng(26))
    assert toad_summaries(m).shape == (48,)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def test_registry_names_and_unknown_error():
    names = simulator_names()
    assert "contaminated_normal" in names and "toad" in names
    with pytest.raises(KeyError):
        get_simulator("nope")


def test_ma1_observed_summary_comes_from_fixture():
    spec = get_simulator("misspecified_ma1")
    raw, summary = spec.observed(np.random.default_rng(0))
    assert raw is None
    assert np.allclose(summary, [0.013, 0.006])


@pytest.mark.parametrize("name", [n for n in simulator_names()])
def test_every_simulator_is_deterministic_and_well_shaped(name):
    spec = get_simulator(name)
    theta = spec.theta_true
    a = spec.summarize(spec.simulate(theta, np.random.default_rng(42)))
    b = spec.summarize(spec.simulate(theta, np.random.default_rng(42)))
    assert np.array_equal(a, b)
    assert a.shape == (spec.summary_dim,)
    assert np.all(np.isfinite(a))
