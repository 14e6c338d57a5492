"""Benchmark data-generating processes and their summary statistics.

Each example ships an assumed simulator (used for inference), a true
generator (used to synthesize observed data, possibly with a deliberate
mismatch), the exact summary map, the parameter prior and a reference
parameter value. `get_simulator` returns the registry entry by name.
"""

from __future__ import annotations

import importlib.resources
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import yaml

from .exceptions import ShapeError, SimulationError
from .priors import ConditionalIntervalPrior, IndependentPrior


def _load_fixture(name: str) -> dict:
    path = importlib.resources.files("rsnl") / "fixtures" / name
    with path.open() as fh:
        return yaml.safe_load(fh)


# ---------------------------------------------------------------------------
# contaminated normal
# ---------------------------------------------------------------------------


def cn_simulate(theta: float, n: int = 100, rng: np.random.Generator | None = None) -> np.ndarray:
    """Assumed DGP: n iid draws from N(theta, 1)."""
    if n < 2:
        raise ValueError("need n >= 2")
    rng = rng or np.random.default_rng()
    return theta + rng.standard_normal(n)


def cn_true_simulate(
    theta: float,
    omega: float = 0.8,
    sigma_eps: float = 2.5,
    n: int = 100,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """True DGP: mixture of N(theta, 1) w.p. omega and N(theta, sigma_eps^2)."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    rng = rng or np.random.default_rng()
    wide = rng.uniform(size=n) >= omega
    eps = rng.standard_normal(n)
    return theta + np.where(wide, sigma_eps * eps, eps)


def cn_summaries(y: np.ndarray, raw: bool = False) -> np.ndarray:
    """(sample mean, sample variance); `raw=True` returns the data unchanged."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise ValueError("need at least 2 observations")
    if raw:
        return y.copy()
    return np.array([y.mean(), y.var(ddof=1)])


# ---------------------------------------------------------------------------
# moving average / stochastic volatility
# ---------------------------------------------------------------------------


def ma1_simulate(theta: float, T: int = 100, rng: np.random.Generator | None = None) -> np.ndarray:
    """MA(1) series y_t = w_t + theta w_{t-1} with standard normal innovations."""
    if not -1.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [-1, 1]")
    rng = rng or np.random.default_rng()
    w = rng.standard_normal(T + 1)
    return w[1:] + theta * w[:-1]


def sv_true_simulate(
    omega: float = -0.76,
    kappa: float = 0.90,
    sigma_v: float = 0.36,
    T: int = 100,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Stochastic-volatility series y_t = exp(z_t / 2) u_t with AR(1) log-variance.

    z is initialized from its stationary distribution.
    """
    if not (0.0 < kappa < 1.0 and 0.0 < sigma_v < 1.0):
        raise ValueError("kappa and sigma_v must lie in (0, 1)")
    rng = rng or np.random.default_rng()
    mean_z = omega / (1.0 - kappa)
    sd_z = sigma_v / math.sqrt(1.0 - kappa * kappa)
    z = mean_z + sd_z * rng.standard_normal()
    out = np.empty(T)
    for t in range(T):
        z = omega + kappa * z + sigma_v * rng.standard_normal()
        out[t] = math.exp(z / 2.0) * rng.standard_normal()
    return out


def autocov_summaries(x: np.ndarray) -> np.ndarray:
    """Non-centered autocovariances at lags 0 and 1, both normalized by 1/T."""
    x = np.asarray(x, dtype=float)
    T = x.size
    if T < 2:
        raise ValueError("need at least 2 observations")
    return np.array([np.sum(x * x) / T, np.sum(x[1:] * x[:-1]) / T])


# ---------------------------------------------------------------------------
# simple-likelihood complex-posterior model
# ---------------------------------------------------------------------------

SLCP_JITTER = 1e-6


def slcp_simulate(theta: np.ndarray, rng: np.random.Generator, ndraws: int = 4) -> np.ndarray:
    """Concatenated iid bivariate normal draws with a nonlinear parameterization.

    mean (theta1, theta2); scales theta3^2, theta4^2; correlation tanh(theta5).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (5,):
        raise ShapeError("theta must have 5 components")
    s1 = theta[2] ** 2
    s2 = theta[3] ** 2
    rho = math.tanh(theta[4])
    cov = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    cov[0, 0] += SLCP_JITTER
    cov[1, 1] += SLCP_JITTER
    chol = np.linalg.cholesky(cov)
    z = rng.standard_normal((ndraws, 2))
    return (theta[:2] + z @ chol.T).ravel()


def slcp_contaminate(x5: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Additive heavy contamination: x5 + 100 z with z ~ N(0, 100 I2)."""
    z = 10.0 * rng.standard_normal(2)
    return np.asarray(x5, dtype=float) + 100.0 * z


# ---------------------------------------------------------------------------
# stochastic SIR epidemic
# ---------------------------------------------------------------------------


@dataclass
class SirConfig:
    days: int = 365
    dt: float = 0.1
    population: float = 100_000.0
    initial_infected: float = 100.0
    reversion: float = 0.5
    volatility: float = 0.5
    diffusion: str = "state"  # "state": sigma sqrt(Re_t); "initial": sigma sqrt(Re_0)


def sir_simulate(
    beta: float, eta: float, cfg: SirConfig | None = None, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Daily infected counts from the SIR model with a mean-reverting
    stochastic reproduction number (Euler-Maruyama, reflecting at zero)."""
    cfg = cfg or SirConfig()
    rng = rng or np.random.default_rng()
    if not 0.0 < eta <= beta < 0.5 + 1e-12:
        raise ValueError("need 0 < eta <= beta < 0.5")
    s = 1.0 - cfg.initial_infected / cfg.population
    i = cfg.initial_infected / cfg.population
    r = 0.0
    re_mean = beta / eta
    re = re_mean
    sqrt_dt = math.sqrt(cfg.dt)
    steps_per_day = int(round(1.0 / cfg.dt))
    out = np.empty(cfg.days)
    for day in range(cfg.days):
        for _ in range(steps_per_day):
            beta_eff = re * eta
            inc = beta_eff * s * i
            rec = eta * i
            s -= inc * cfg.dt
            i += (inc - rec) * cfg.dt
            r += rec * cfg.dt
            if cfg.volatility > 0.0:
                level = re if cfg.diffusion == "state" else re_mean
                re += cfg.reversion * (re_mean - re) * cfg.dt + cfg.volatility * math.sqrt(
                    max(level, 0.0)
                ) * sqrt_dt * rng.standard_normal()
                re = abs(re)  # reflect at zero
            if not (math.isfinite(s) and math.isfinite(i)) or s < -1e-6 or i < -1e-6:
                raise SimulationError("SIR state left the simplex")
            s = max(s, 0.0)
            i = max(i, 0.0)
        out[day] = i * cfg.population
    return out


def sir_true_simulate(
    beta: float,
    eta: float,
    cfg: SirConfig | None = None,
    rng: np.random.Generator | None = None,
    apply_artifact: bool = True,
) -> np.ndarray:
    """True DGP: the assumed model plus a weekly reporting artifact.

    Days are indexed with day 0 a Monday; weekend counts (indices 5, 6 mod 7)
    are reduced by 5% and Mondays increased by 10%.
    """
    counts = sir_simulate(beta, eta, cfg, rng)
    if not apply_artifact:
        return counts
    idx = np.arange(counts.size)
    dow = idx % 7
    factors = np.where(np.isin(dow, (5, 6)), 0.95, np.where(dow == 0, 1.10, 1.0))
    return counts * factors


def sir_summaries(infected: np.ndarray) -> np.ndarray:
    """(mean, median, max, day of max, half-mass day, lag-1 autocorrelation)."""
    x = np.asarray(infected, dtype=float)
    mean = x.mean()
    median = float(np.median(x))
    peak = x.max()
    peak_day = float(np.argmax(x))
    csum = np.cumsum(x)
    half_day = float(np.argmax(csum > 0.5 * csum[-1]))
    if np.all(x == x[0]):
        warnings.warn("constant infected series; autocorrelation set to 0")
        ac = 0.0
    else:
        ac = float(np.corrcoef(x[:-1], x[1:])[0, 1])
    return np.array([mean, median, peak, peak_day, half_day, ac])


# ---------------------------------------------------------------------------
# toad movement
# ---------------------------------------------------------------------------


def stable_sample(
    alpha: float, delta: float, rng: np.random.Generator, size: int | None = None
):
    """Symmetric alpha-stable draw(s) with stability alpha and scale delta
    (Chambers-Mallows-Stuck construction)."""
    if not 1.0 <= alpha <= 2.0:
        raise ValueError("alpha must lie in [1, 2]")
    if delta <= 0:
        raise ValueError("delta must be positive")
    shape = () if size is None else (size,)
    u = rng.uniform(-math.pi / 2, math.pi / 2, size=shape)
    w = rng.exponential(1.0, size=shape)
    if alpha == 1.0:
        x = np.tan(u)
    else:
        x = (np.sin(alpha * u) / np.cos(u) ** (1.0 / alpha)) * (
            np.cos((1.0 - alpha) * u) / w
        ) ** ((1.0 - alpha) / alpha)
    out = delta * x
    return float(out) if size is None else out


def toad_simulate(
    alpha: float,
    delta: float,
    p0: float,
    ndays: int = 63,
    ntoads: int = 66,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Daily refuge positions (ndays x ntoads) under the nearest-return model.

    Every night the toad forages an alpha-stable step from its refuge; with
    probability p0 it then returns to the previously used refuge nearest to
    its overnight position, otherwise the overnight position becomes a new
    refuge.
    """
    rng = rng or np.random.default_rng()
    m = np.zeros((ndays, ntoads))
    for t in range(ntoads):
        refuges = [0.0]
        for day in range(1, ndays):
            step = stable_sample(alpha, delta, rng)
            pos = m[day - 1, t] + step
            if rng.uniform() < p0:
                arr = np.asarray(refuges)
                m[day, t] = arr[np.argmin(np.abs(arr - pos))]
            else:
                m[day, t] = pos
                refuges.append(pos)
    return m


TOAD_LAGS = (1, 2, 4, 8)
RETURN_DISTANCE = 10.0  # meters


def toad_summaries(m: np.ndarray) -> np.ndarray:
    """48 summaries: per lag in {1, 2, 4, 8}, the count of displacements under
    10 m, the median of the rest, and the 10 successive log-differences of
    their 0, 0.1, ..., 1 quantiles. Lags with no long displacement produce
    zero sentinels with a warning."""
    m = np.asarray(m, dtype=float)
    if m.shape[0] <= max(TOAD_LAGS):
        raise ValueError("need more days than the largest lag")
    out = []
    for lag in TOAD_LAGS:
        disp = np.abs(m[lag:, :] - m[:-lag, :]).ravel()
        returned = disp < RETURN_DISTANCE
        moved = disp[~returned]
        if moved.size == 0:
            warnings.warn(f"lag {lag}: no displacement above {RETURN_DISTANCE} m")
            out.extend([float(returned.sum())] + [0.0] * 11)
            continue
        quantiles = np.quantile(moved, np.linspace(0.0, 1.0, 11))
        out.append(float(returned.sum()))
        out.append(float(np.median(moved)))
        out.extend(np.diff(np.log(quantiles)).tolist())
    return np.array(out)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclass
class SimulatorSpec:
    """One benchmark problem: priors, simulators, summaries, reference data."""

    name: str
    theta_dim: int
    summary_dim: int
    prior: object
    theta_true: np.ndarray
    simulate: Callable  # assumed DGP: (theta, rng) -> raw data
    true_dgp: Callable  # observed-data generator: (theta, rng) -> raw data
    summarize: Callable  # raw data -> summary vector
    observed_summary_fixture: np.ndarray | None = None
    replicate_dgp: Callable | None = None  # coverage replicates; defaults to true_dgp

    def observed(self, rng: np.random.Generator) -> tuple[np.ndarray | None, np.ndarray]:
        """(raw observed data or None, observed summary)."""
        if self.observed_summary_fixture is not None:
            return None, self.observed_summary_fixture.copy()
        raw = self.true_dgp(self.theta_true, rng)
        return raw, self.summarize(raw)

    def replicate_observed(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh observed summary from the true process (for coverage studies)."""
        gen = self.replicate_dgp or self.true_dgp
        return self.summarize(gen(self.theta_true, rng))


def _spec_contaminated_normal(raw_summaries: bool = False, well_specified: bool = False):
    n = 100

    def simulate(theta, rng):
        return cn_simulate(float(theta[0]), n=n, rng=rng)

    def true_dgp(theta, rng):
        if well_specified:
            return cn_simulate(float(theta[0]), n=n, rng=rng)
        return cn_true_simulate(float(theta[0]), n=n, rng=rng)

    def summarize(y):
        return cn_summaries(y, raw=raw_summaries)

    if raw_summaries:
        name, d = "contaminated_normal_raw", n
    elif well_specified:
        name, d = "well_specified_gaussian", 2
    else:
        name, d = "contaminated_normal", 2
    return SimulatorSpec(
        name=name,
        theta_dim=1,
        summary_dim=d,
        prior=IndependentPrior([("normal", 0.0, 10.0)]),
        theta_true=np.array([1.0]),
        simulate=simulate,
        true_dgp=true_dgp,
        summarize=summarize,
    )


def _spec_ma1():
    fixture = _load_fixture("ma1_observed.yaml")

    def simulate(theta, rng):
        return ma1_simulate(float(theta[0]), T=100, rng=rng)

    def true_dgp(theta, rng):
        return sv_true_simulate(T=100, rng=rng)

    return SimulatorSpec(
        name="misspecified_ma1",
        theta_dim=1,
        summary_dim=2,
        prior=IndependentPrior([("uniform", -1.0, 1.0)]),
        theta_true=np.array([0.0]),  # pseudo-true value
        simulate=simulate,
        true_dgp=true_dgp,
        summarize=autocov_summaries,
        observed_summary_fixture=np.asarray(fixture["summary"], dtype=float),
    )


def _spec_slcp():
    fixture = _load_fixture("slcp_observed.yaml")
    theta_true = np.asarray(fixture["theta_true"], dtype=float)
    contaminated = np.asarray(fixture["contaminated_draw"], dtype=float)

    def simulate(theta, rng):
        return slcp_simulate(theta, rng, ndraws=5)

    def replicate_dgp(theta, rng):
        data = slcp_simulate(theta, rng, ndraws=5)
        data[8:] = slcp_contaminate(data[8:], rng)
        return data

    def observed_dgp(theta, rng):
        # canonical observation: four seeded clean draws plus the fixture draw
        clean = slcp_simulate(theta, rng, ndraws=4)
        return np.concatenate([clean, contaminated])

    def summarize(y):
        y = np.asarray(y, dtype=float)
        if y.size != 10:
            raise ShapeError("expected five concatenated bivariate draws")
        return y.copy()

    return SimulatorSpec(
        name="contaminated_slcp",
        theta_dim=5,
        summary_dim=10,
        prior=IndependentPrior([("uniform", -3.0, 3.0)] * 5),
        theta_true=theta_true,
        simulate=simulate,
        true_dgp=observed_dgp,
        summarize=summarize,
        replicate_dgp=replicate_dgp,
    )


def _spec_sir():
    fixture = _load_fixture("sir_reference.yaml")
    cfg = SirConfig()

    def simulate(theta, rng):
        return sir_simulate(float(theta[0]), float(theta[1]), cfg, rng)

    def true_dgp(theta, rng):
        return sir_true_simulate(float(theta[0]), float(theta[1]), cfg, rng)

    return SimulatorSpec(
        name="misspecified_sir",
        theta_dim=2,
        summary_dim=6,
        prior=ConditionalIntervalPrior(0.5),
        theta_true=np.asarray(fixture["theta_true"], dtype=float),
        simulate=simulate,
        true_dgp=true_dgp,
        summarize=sir_summaries,
    )


def _spec_toad():
    fixture = _load_fixture("toad_reference.yaml")

    def simulate(theta, rng):
        return toad_simulate(float(theta[0]), float(theta[1]), float(theta[2]), rng=rng)

    return SimulatorSpec(
        name="toad",
        theta_dim=3,
        summary_dim=48,
        prior=IndependentPrior(
            [("uniform", 1.0, 2.0), ("uniform", 20.0, 70.0), ("uniform", 0.4, 0.9)]
        ),
        theta_true=np.asarray(fixture["theta_true"], dtype=float),
        simulate=simulate,
        true_dgp=simulate,  # simulated-data study: observed data is well-specified
        summarize=toad_summaries,
    )


_REGISTRY: dict[str, Callable[[], SimulatorSpec]] = {
    "contaminated_normal": lambda: _spec_contaminated_normal(),
    "contaminated_normal_raw": lambda: _spec_contaminated_normal(raw_summaries=True),
    "well_specified_gaussian": lambda: _spec_contaminated_normal(well_specified=True),
    "misspecified_ma1": _spec_ma1,
    "contaminated_slcp": _spec_slcp,
    "misspecified_sir": _spec_sir,
    "toad": _spec_toad,
}


def simulator_names() -> list[str]:
    return sorted(_REGISTRY)


def get_simulator(name: str) -> SimulatorSpec:
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown example {name!r}; registered: {', '.join(simulator_names())}"
        )
    return _REGISTRY[name]()
