"""Calibration and misspecification diagnostics.

Density work uses a product-Gaussian KDE with per-dimension Silverman
bandwidths; highest-density-region membership follows the density-quantile
plug-in rule. The classifier two-sample test trains a small ReLU MLP with
Adam on a single balanced 80/20 split (the held-out fold doubles as the
early-stopping set). The kernel discrepancy against the observed summary is
the simplified two-term estimator with a median-heuristic RBF bandwidth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import ks_2samp

from .exceptions import ShapeError
from .nn import adam_step, backward_cached, forward_cached, init_adam, init_mlp

BANDWIDTH_FLOOR = 1e-8
KS_FLAG_THRESHOLD = 0.25


# ---------------------------------------------------------------------------
# kernel density estimation and highest-density regions
# ---------------------------------------------------------------------------


def _silverman_bandwidths(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    sigma = samples.std(axis=0, ddof=1)
    if np.any(sigma < BANDWIDTH_FLOOR):
        warnings.warn("zero-variance sample dimension; bandwidth floored")
        sigma = np.maximum(sigma, BANDWIDTH_FLOOR)
    return sigma * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))


def _kde_log_density_many(samples: np.ndarray, points: np.ndarray, bw: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    const = -np.log(bw).sum() - 0.5 * d * math.log(2 * math.pi) - math.log(n)
    out = np.empty(points.shape[0])
    chunk = max(1, int(2_000_000 // max(n, 1)))
    for start in range(0, points.shape[0], chunk):
        pts = points[start : start + chunk]
        z = (pts[:, None, :] - samples[None, :, :]) / bw
        out[start : start + chunk] = logsumexp(-0.5 * np.sum(z * z, axis=2), axis=1) + const
    return out


def kde_log_density(samples: np.ndarray, point: np.ndarray) -> float:
    """Log of the Gaussian-product KDE (Silverman bandwidths) at `point`."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if samples.shape[0] < 50:
        raise ValueError("need at least 50 samples")
    if point.shape != (samples.shape[1],):
        raise ShapeError("point dimension does not match the samples")
    bw = _silverman_bandwidths(samples)
    return float(_kde_log_density_many(samples, point[None, :], bw)[0])


def hdr_contains(samples: np.ndarray, point: np.ndarray, alpha: float) -> bool:
    """Whether `point` lies in the (1 - alpha) highest-density region.

    Plug-in rule: the KDE density at the point is compared against the
    alpha-quantile of KDE densities evaluated at the samples themselves.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    point = np.atleast_1d(np.asarray(point, dtype=float))
    bw = _silverman_bandwidths(samples)
    dens_samples = _kde_log_density_many(samples, samples, bw)
    dens_point = _kde_log_density_many(samples, point[None, :], bw)[0]
    return bool(dens_point >= np.quantile(dens_samples, alpha))


@dataclass
class CoverageReport:
    alphas: np.ndarray  # significance levels; HDR credibility is 1 - alpha
    coverage: np.ndarray
    n_replicates: int
    membership: np.ndarray  # (replicates, len(alphas)) booleans


def empirical_coverage(
    per_replicate_samples: list[np.ndarray], theta0: np.ndarray, alphas
) -> CoverageReport:
    """Fraction of replicates whose (1 - alpha) HDR contains theta0."""
    alphas = np.sort(np.asarray(alphas, dtype=float))
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    rows = []
    for samples in per_replicate_samples:
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        bw = _silverman_bandwidths(samples)
        dens_samples = _kde_log_density_many(samples, samples, bw)
        dens_point = _kde_log_density_many(samples, theta0[None, :], bw)[0]
        thresholds = np.quantile(dens_samples, alphas)
        rows.append(dens_point >= thresholds)
    membership = np.array(rows)
    return CoverageReport(
        alphas=alphas,
        coverage=membership.mean(axis=0),
        n_replicates=membership.shape[0],
        membership=membership,
    )


# ---------------------------------------------------------------------------
# classifier two-sample test
# ---------------------------------------------------------------------------


def c2st(
    samples_a: np.ndarray,
    samples_b: np.ndarray,
    rng: np.random.Generator,
    max_epochs: int = 200,
    patience: int = 20,
    batch: int = 128,
    lr: float = 1e-3,
) -> float:
    """Held-out accuracy of an MLP separating the two sample sets.

    0.5 means indistinguishable, 1 means separable. Two hidden layers of
    10 * dim units, balanced classes, single 80/20 split.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ShapeError("sample sets must share a dimension")
    if a.shape[0] < 200 or b.shape[0] < 200:
        raise ValueError("need at least 200 points per set")
    n = min(a.shape[0], b.shape[0])
    a = a[rng.permutation(a.shape[0])[:n]]
    b = b[rng.permutation(b.shape[0])[:n]]
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(n), np.ones(n)])
    perm = rng.permutation(2 * n)
    x, y = x[perm], y[perm]
    n_test = max(1, int(round(0.2 * 2 * n)))
    x_test, y_test = x[:n_test], y[:n_test]
    x_train, y_train = x[n_test:], y[n_test:]

    mean = x_train.mean(axis=0)
    std = np.maximum(x_train.std(axis=0, ddof=1), 1e-12)
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std

    d = x.shape[1]
    params = init_mlp([d, 10 * d, 10 * d, 1], rng)
    state = init_adam(params)

    def test_accuracy(p):
        logits, _ = forward_cached(p, x_test)
        return float(np.mean((logits[:, 0] > 0.0) == (y_test > 0.5)))

    def test_loss(p):
        logits, _ = forward_cached(p, x_test)
        z = logits[:, 0]
        return float(np.mean(np.logaddexp(0.0, z) - y_test * z))

    best_loss = test_loss(params)
    best_acc = test_accuracy(params)
    best_epoch = 0
    n_train = x_train.shape[0]
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            idx = order[start : start + batch]
            xb, yb = x_train[idx], y_train[idx]
            logits, cache = forward_cached(params, xb)
            upstream = (expit(logits[:, 0]) - yb)[:, None] / xb.shape[0]
            grads, _ = backward_cached(params, cache, upstream)
            state, params = adam_step(state, params, grads, lr)
        loss = test_loss(params)
        if loss < best_loss:
            best_loss = loss
            best_acc = test_accuracy(params)
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    return best_acc


# ---------------------------------------------------------------------------
# kernel discrepancy against the observed summary
# ---------------------------------------------------------------------------


def mmd(postpred_summaries: np.ndarray, observed: np.ndarray) -> float:
    """Two-term RBF kernel discrepancy between posterior-predictive summaries
    and the observed summary; bandwidth from the median pairwise distance."""
    x = np.atleast_2d(np.asarray(postpred_summaries, dtype=float))
    obs = np.atleast_1d(np.asarray(observed, dtype=float))
    l = x.shape[0]
    if l < 100:
        raise ValueError("need at least 100 posterior-predictive samples")
    if obs.shape != (x.shape[1],):
        raise ShapeError("observed summary dimension mismatch")
    diff = x[:, None, :] - x[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    pair_d = np.sqrt(sq[np.triu_indices(l, k=1)])
    med = float(np.median(pair_d))
    if med <= 0.0:
        warnings.warn("all pairwise distances are zero; bandwidth floored")
        med = BANDWIDTH_FLOOR
    beta2 = med / 2.0  # kernel divides by beta^2 with beta = sqrt(median / 2)
    k_xx = np.exp(-sq / beta2)
    sq_obs = np.sum((x - obs) ** 2, axis=1)
    k_xy = np.exp(-sq_obs / beta2)
    return float(k_xx.mean() - 2.0 * k_xy.mean())


# ---------------------------------------------------------------------------
# adjustment-parameter misspecification report
# ---------------------------------------------------------------------------


@dataclass
class MisspecReport:
    distances: np.ndarray  # per-dimension KS distance, prior vs posterior
    flags: np.ndarray  # distances above threshold
    threshold: float


def prior_posterior_distance(
    gamma_samples: np.ndarray,
    ap,
    threshold: float = KS_FLAG_THRESHOLD,
    rng: np.random.Generator | None = None,
) -> MisspecReport:
    """Two-sample KS distance between each adjustment posterior and its prior."""
    gamma = np.atleast_2d(np.asarray(gamma_samples, dtype=float))
    n, d = gamma.shape
    if n < 500:
        raise ValueError("need at least 500 posterior draws")
    if ap.scales.shape != (d,):
        raise ShapeError("prior scales do not match the sample dimension")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_prior = max(4 * n, 4096)
    distances = np.empty(d)
    for j in range(d):
        prior_draws = rng.laplace(0.0, ap.scales[j], size=n_prior)
        distances[j] = ks_2samp(gamma[:, j], prior_draws).statistic
    return MisspecReport(distances=distances, flags=distances > threshold, threshold=threshold)


# ---------------------------------------------------------------------------
# posterior predictive
# ---------------------------------------------------------------------------


@dataclass
class PpcResult:
    summaries: np.ndarray  # (n - failures, d) raw-unit summaries
    n_failed: int


def posterior_predictive(
    theta_samples: np.ndarray, sim, n: int, rng: np.random.Generator
) -> PpcResult:
    """Simulate once at each of n randomly selected posterior draws."""
    theta = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    if n > theta.shape[0]:
        raise ValueError("n exceeds the number of posterior draws")
    idx = rng.choice(theta.shape[0], size=n, replace=False)
    rows = []
    failed = 0
    for i in idx:
        try:
            s = np.asarray(sim.summarize(sim.simulate(theta[i], rng)), dtype=float)
            if np.all(np.isfinite(s)):
                rows.append(s)
            else:
                failed += 1
        except Exception:
            failed += 1
    if failed:
        warnings.warn(f"{failed} posterior-predictive simulation(s) failed; skipped")
    return PpcResult(summaries=np.array(rows), n_failed=failed)
