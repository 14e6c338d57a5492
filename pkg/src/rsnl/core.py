"""Sequential neural likelihood loop with and without adjustment parameters.

One round = propose parameters (prior draws in round 0, thinned NUTS draws
of the current surrogate posterior afterwards), simulate, re-standardize the
accumulated training set, retrain the flow. The robust variant samples the
joint of (theta, gamma) where gamma shifts the observed summary before it
enters the surrogate; each gamma component carries an independent Laplace
prior whose scale is recomputed from the standardized observed summary every
round, so incompatible summaries can drift away from zero while compatible
ones stay pinned.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, SimulationError
from .flow import FlowParams, TrainConfig, flow_log_prob_and_grad, train_flow
from .mcmc import (
    ChainSet,
    McmcConfig,
    TargetDensity,
    effective_sample_size,
    nuts_run,
    rank_normalized_rhat,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
RHAT_GATE = 1.05


@dataclass
class TrainingSet:
    """Accumulated (theta, summary) pairs in raw units, tagged by round."""

    thetas: np.ndarray  # (n, d_theta)
    summaries: np.ndarray  # (n, d)
    rounds: np.ndarray  # (n,)

    @classmethod
    def empty(cls, d_theta: int, d_summary: int) -> "TrainingSet":
        return cls(
            np.empty((0, d_theta)), np.empty((0, d_summary)), np.empty(0, dtype=int)
        )

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def extend(self, thetas: np.ndarray, summaries: np.ndarray, round_tag: int) -> "TrainingSet":
        return TrainingSet(
            np.vstack([self.thetas, thetas]),
            np.vstack([self.summaries, summaries]),
            np.concatenate([self.rounds, np.full(thetas.shape[0], round_tag, dtype=int)]),
        )


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    context_mean: np.ndarray
    context_std: np.ndarray


def standardize(
    data: TrainingSet, observed: np.ndarray
) -> tuple[TrainingSet, np.ndarray, StandardizationStats]:
    """Zero-mean/unit-std (n-1 denominator) rescaling of summaries and thetas.

    The observed summary is mapped with the same statistics. Zero-variance
    dimensions get a floored std and a warning.
    """
    if len(data) < 2:
        raise ValueError("need at least 2 training pairs to standardize")
    observed = np.asarray(observed, dtype=float)
    if observed.shape != (data.summaries.shape[1],):
        raise ShapeError("observed summary dimension does not match the training set")

    def _stats(a):
        mean = a.mean(axis=0)
        std = a.std(axis=0, ddof=1)
        low = std < STD_FLOOR
        if np.any(low):
            warnings.warn(f"{int(low.sum())} zero-variance dimension(s); std floored")
            std = np.where(low, STD_FLOOR, std)
        return mean, std

    mean, std = _stats(data.summaries)
    cmean, cstd = _stats(data.thetas)
    stats = StandardizationStats(mean, std, cmean, cstd)
    standardized = TrainingSet(
        (data.thetas - cmean) / cstd, (data.summaries - mean) / std, data.rounds.copy()
    )
    return standardized, (observed - mean) / std, stats


@dataclass
class AdjustmentPrior:
    """Independent Laplace(0, scale_i) priors on the summary adjustments."""

    scales: np.ndarray
    mode: str = "data_driven"
    tau: float = 0.3

    def log_pdf(self, gamma: np.ndarray) -> float:
        return float(np.sum(-np.log(2.0 * self.scales) - np.abs(gamma) / self.scales))

    def grad(self, gamma: np.ndarray) -> np.ndarray:
        # subgradient 0 at the kink
        return -np.sign(gamma) / self.scales

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.laplace(0.0, self.scales, size=(n, self.scales.size))


def update_adjustment_prior(
    observed_std: np.ndarray,
    mode: str = "data_driven",
    tau: float = 0.3,
    fixed_scale: float = 1.0,
    floor: float = 0.01,
    initial: bool = False,
) -> AdjustmentPrior:
    """Per-round Laplace scales: |tau * standardized observed summary|, floored.

    `initial` (round 0) and fixed mode use a constant scale instead.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    observed_std = np.asarray(observed_std, dtype=float)
    d = observed_std.size
    if initial:
        return AdjustmentPrior(np.ones(d), mode=mode, tau=tau)
    if mode == "fixed":
        return AdjustmentPrior(np.full(d, float(fixed_scale)), mode="fixed", tau=tau)
    if mode != "data_driven":
        raise ValueError(f"unknown adjustment prior mode {mode!r}")
    return AdjustmentPrior(
        np.maximum(np.abs(tau * observed_std), floor), mode="data_driven", tau=tau
    )


def joint_log_density(
    theta: np.ndarray,
    gamma: np.ndarray,
    fp: FlowParams,
    stats: StandardizationStats,
    ap: AdjustmentPrior,
    prior,
    observed_std: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log of the adjusted joint posterior kernel and its exact gradients.

    value = flow log-density of (observed_std - gamma) given standardized
    theta, plus the theta prior and the Laplace adjustment prior.
    """
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    lp_prior = prior.log_pdf(theta)
    if not np.isfinite(lp_prior):
        return -np.inf, np.zeros_like(theta), np.zeros_like(gamma)
    theta_std = (theta - stats.context_mean) / stats.context_std
    lp_flow, g_point, g_ctx = flow_log_prob_and_grad(fp, observed_std - gamma, theta_std)
    value = lp_flow + lp_prior + ap.log_pdf(gamma)
    grad_theta = g_ctx / stats.context_std + prior.log_pdf_grad(theta)
    grad_gamma = -g_point + ap.grad(gamma)
    return value, grad_theta, grad_gamma


def snl_log_density(
    theta: np.ndarray,
    fp: FlowParams,
    stats: StandardizationStats,
    prior,
    observed_std: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Plain surrogate posterior kernel (no adjustment parameters)."""
    theta = np.asarray(theta, dtype=float)
    lp_prior = prior.log_pdf(theta)
    if not np.isfinite(lp_prior):
        return -np.inf, np.zeros_like(theta)
    theta_std = (theta - stats.context_mean) / stats.context_std
    lp_flow, _, g_ctx = flow_log_prob_and_grad(fp, observed_std, theta_std)
    return lp_flow + lp_prior, g_ctx / stats.context_std + prior.log_pdf_grad(theta)


class _JointTransform:
    """Theta transform on the first block, identity on the gamma block."""

    def __init__(self, theta_transform, d_gamma: int):
        self.theta_transform = theta_transform
        self.d_theta = theta_transform.dim if hasattr(theta_transform, "dim") else None
        self.d_gamma = d_gamma

    def forward(self, x):
        u_theta, _ = self.theta_transform.forward(x[: -self.d_gamma])
        u = np.concatenate([u_theta, x[-self.d_gamma :]])
        return u, self.log_jacobian(u)

    def inverse(self, u):
        return np.concatenate(
            [self.theta_transform.inverse(u[: -self.d_gamma]), u[-self.d_gamma :]]
        )

    def log_jacobian(self, u):
        return self.theta_transform.log_jacobian(u[: -self.d_gamma])

    def pullback_grad(self, u, grad_constrained):
        g_theta = self.theta_transform.pullback_grad(
            u[: -self.d_gamma], grad_constrained[: -self.d_gamma]
        )
        return np.concatenate([g_theta, grad_constrained[-self.d_gamma :]])


def build_joint_target(fp, stats, ap, prior, observed_std):
    """NUTS target over (theta, gamma) plus its support transform."""
    d_theta = prior.dim
    d = observed_std.size

    def fused(x):
        value, g_t, g_g = joint_log_density(
            x[:d_theta], x[d_theta:], fp, stats, ap, prior, observed_std
        )
        return value, np.concatenate([g_t, g_g])

    target = TargetDensity(
        d_theta + d,
        lambda x: fused(x)[0],
        lambda x: fused(x)[1],
        log_density_and_grad=fused,
    )
    return target, _JointTransform(prior.transform(), d)


def build_snl_target(fp, stats, prior, observed_std):
    def fused(theta):
        return snl_log_density(theta, fp, stats, prior, observed_std)

    target = TargetDensity(
        prior.dim,
        lambda x: fused(x)[0],
        lambda x: fused(x)[1],
        log_density_and_grad=fused,
    )
    return target, prior.transform()


# ---------------------------------------------------------------------------
# the sequential loop
# ---------------------------------------------------------------------------


@dataclass
class AdjustmentSettings:
    mode: str = "data_driven"  # data_driven | fixed
    tau: float = 0.3
    fixed_scale: float = 1.0
    floor: float = 0.01


@dataclass
class RoundRecord:
    flow: FlowParams
    stats: StandardizationStats
    observed_std: np.ndarray
    adjustment_scales: np.ndarray | None
    train_record: dict
    rhat_max: float | None
    ess_min: float | None
    divergences: int | None
    accept_mean: float | None


@dataclass
class RunArtifacts:
    method: str
    rounds: list[RoundRecord]
    final_chains: ChainSet
    theta_samples: np.ndarray
    gamma_samples: np.ndarray | None
    final_adjustment: AdjustmentPrior | None
    observed_summary: np.ndarray
    n_simulations: int
    n_retries: int
    warnings: list[str] = field(default_factory=list)


def _simulate_batch(simulate, summarize, thetas, pool, rng, max_retries):
    """Run the simulator at each theta; resimulate non-finite results.

    Replacement parameters are fresh picks from `pool` (the current proposal
    draws); each slot gets at most `max_retries` attempts.
    """
    rows = []
    used_thetas = []
    retries = 0
    for i in range(thetas.shape[0]):
        theta = thetas[i]
        ok = False
        for _ in range(max_retries + 1):
            try:
                s = np.asarray(summarize(simulate(theta, rng)), dtype=float)
                if np.all(np.isfinite(s)):
                    ok = True
                    break
            except (FloatingPointError, SimulationError):
                pass
            retries += 1
            theta = pool[rng.integers(pool.shape[0])]
        if not ok:
            raise SimulationError(f"no finite simulation after {max_retries} retries")
        rows.append(s)
        used_thetas.append(theta)
    return np.array(used_thetas), np.array(rows), retries


def _round_mcmc_config(cfg: McmcConfig, m: int) -> McmcConfig:
    """Per-round schedule: enough post-burn-in draws that thinning yields m."""
    need = math.ceil(m * cfg.thin / cfg.chains)
    return McmcConfig(
        chains=cfg.chains,
        iterations=cfg.burn_in + need,
        burn_in=cfg.burn_in,
        thin=cfg.thin,
        target_accept=cfg.target_accept,
        max_tree_depth=cfg.max_tree_depth,
    )


def _diagnose(chains: ChainSet, label: str, warn_list: list[str]):
    rhat = rank_normalized_rhat(chains)
    ess = effective_sample_size(chains)
    rhat_max = float(np.nanmax(rhat)) if not np.all(np.isnan(rhat)) else float("nan")
    ess_min = float(np.nanmin(ess)) if not np.all(np.isnan(ess)) else float("nan")
    if np.any(np.isnan(rhat)) or rhat_max > RHAT_GATE:
        msg = f"{label}: max rank-normalized R-hat {rhat_max:.3f} outside (1.0, {RHAT_GATE})"
        warn_list.append(msg)
        logger.warning(msg)
    return rhat_max, ess_min


def run_rsnl(
    simulate,
    summarize,
    prior,
    observed_raw,
    n_rounds: int = 10,
    n_sims_per_round: int = 1000,
    flow_config: TrainConfig | None = None,
    mcmc_config: McmcConfig | None = None,
    adjustment: AdjustmentSettings | None = None,
    rng: np.random.Generator | None = None,
    observed_summary: np.ndarray | None = None,
    max_retries: int = 50,
) -> RunArtifacts:
    """Robust sequential loop over the joint of (theta, gamma)."""
    return _run_sequential(
        simulate, summarize, prior, observed_raw, n_rounds, n_sims_per_round,
        flow_config, mcmc_config, adjustment, rng, observed_summary, max_retries,
        robust=True,
    )


def run_snl(
    simulate,
    summarize,
    prior,
    observed_raw,
    n_rounds: int = 10,
    n_sims_per_round: int = 1000,
    flow_config: TrainConfig | None = None,
    mcmc_config: McmcConfig | None = None,
    adjustment: AdjustmentSettings | None = None,
    rng: np.random.Generator | None = None,
    observed_summary: np.ndarray | None = None,
    max_retries: int = 50,
) -> RunArtifacts:
    """Ablation: identical loop with the adjustments pinned to zero."""
    return _run_sequential(
        simulate, summarize, prior, observed_raw, n_rounds, n_sims_per_round,
        flow_config, mcmc_config, adjustment, rng, observed_summary, max_retries,
        robust=False,
    )


def _run_sequential(
    simulate, summarize, prior, observed_raw, n_rounds, n_sims_per_round,
    flow_config, mcmc_config, adjustment, rng, observed_summary, max_retries, robust,
):
    if n_rounds < 1:
        raise ValueError("need at least one round")
    if n_sims_per_round < 20:
        raise ValueError("need at least 20 simulations per round")
    flow_config = flow_config or TrainConfig()
    mcmc_config = mcmc_config or McmcConfig()
    adjustment = adjustment or AdjustmentSettings()
    rng = rng if rng is not None else np.random.default_rng(0)

    if observed_summary is None:
        observed_summary = np.asarray(summarize(observed_raw), dtype=float)
    else:
        observed_summary = np.asarray(observed_summary, dtype=float)
    d = observed_summary.size
    d_theta = prior.dim

    data = TrainingSet.empty(d_theta, d)
    rounds: list[RoundRecord] = []
    warn_list: list[str] = []
    n_sims = 0
    n_retries = 0

    flow = None
    stats = None
    observed_std = None
    prev_theta_draws = None

    for r in range(n_rounds):
        round_rng = rng.spawn(1)[0]
        if r == 0:
            proposals = prior.sample(round_rng, n_sims_per_round)
            mcmc_record = (None, None, None, None)
        else:
            ap = _current_adjustment(observed_std, adjustment, robust, d)
            cfg_r = _round_mcmc_config(mcmc_config, n_sims_per_round)
            chains = _posterior_mcmc(
                flow, stats, ap, prior, observed_std, cfg_r, round_rng,
                prev_theta_draws, robust, d_theta,
            )
            rhat_max, ess_min = _diagnose(chains, f"round {r} MCMC", warn_list)
            mcmc_record = (rhat_max, ess_min, chains.divergences, float(chains.accept_rate.mean()))
            joint = chains.flat()
            proposals = joint[:n_sims_per_round, :d_theta]
            prev_theta_draws = joint[:, :d_theta]

        used, sims, retries = _simulate_batch(
            simulate, summarize, proposals, proposals, round_rng, max_retries
        )
        n_sims += proposals.shape[0]
        n_retries += retries
        data = data.extend(used, sims, r)

        std_data, observed_std, stats = standardize(data, observed_summary)
        flow, train_record = train_flow(
            std_data.summaries, std_data.thetas, flow_config, round_rng.spawn(1)[0]
        )
        if r == 0:
            prev_theta_draws = used
        rounds.append(
            RoundRecord(
                flow=flow,
                stats=stats,
                observed_std=observed_std.copy(),
                adjustment_scales=None if not robust else _current_adjustment(
                    observed_std, adjustment, robust, d
                ).scales,
                train_record=train_record,
                rhat_max=mcmc_record[0],
                ess_min=mcmc_record[1],
                divergences=mcmc_record[2],
                accept_mean=mcmc_record[3],
            )
        )

    # final posterior: full schedule, unthinned
    final_rng = rng.spawn(1)[0]
    ap = _current_adjustment(observed_std, adjustment, robust, d)
    final_cfg = McmcConfig(
        chains=mcmc_config.chains,
        iterations=mcmc_config.iterations,
        burn_in=mcmc_config.burn_in,
        thin=1,
        target_accept=mcmc_config.target_accept,
        max_tree_depth=mcmc_config.max_tree_depth,
    )
    final_chains = _posterior_mcmc(
        flow, stats, ap, prior, observed_std, final_cfg, final_rng,
        prev_theta_draws, robust, d_theta,
    )
    _diagnose(final_chains, "final MCMC", warn_list)
    flat = final_chains.flat()
    theta_samples = flat[:, :d_theta]
    gamma_samples = flat[:, d_theta:] if robust else None

    return RunArtifacts(
        method="rsnl" if robust else "snl",
        rounds=rounds,
        final_chains=final_chains,
        theta_samples=theta_samples,
        gamma_samples=gamma_samples,
        final_adjustment=ap if robust else None,
        observed_summary=observed_summary,
        n_simulations=n_sims,
        n_retries=n_retries,
        warnings=warn_list,
    )


def _current_adjustment(observed_std, settings: AdjustmentSettings, robust: bool, d: int):
    if not robust:
        return None
    return update_adjustment_prior(
        observed_std,
        mode=settings.mode,
        tau=settings.tau,
        fixed_scale=settings.fixed_scale,
        floor=settings.floor,
    )


def _posterior_mcmc(
    flow, stats, ap, prior, observed_std, cfg, rng, prev_theta_draws, robust, d_theta
):
    d = observed_std.size
    if robust:
        target, transform = build_joint_target(flow, stats, ap, prior, observed_std)
    else:
        target, transform = build_snl_target(flow, stats, prior, observed_std)

    inits = []
    init_rng = rng.spawn(1)[0]
    for _ in range(cfg.chains):
        if prev_theta_draws is None:
            theta0 = prior.sample(init_rng, 1)[0]
        else:
            theta0 = prev_theta_draws[init_rng.integers(prev_theta_draws.shape[0])]
        inits.append(np.concatenate([theta0, np.zeros(d)]) if robust else theta0)
    return nuts_run(target, inits, cfg, rng, transform=transform)
