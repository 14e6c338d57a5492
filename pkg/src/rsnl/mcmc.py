"""No-U-Turn sampler with dual-averaging step-size adaptation.

The sampler runs over unconstrained space. Bounded parameters are handled
by a `SupportTransform` (identity / log / logit per dimension, or any object
implementing the same protocol) whose log-Jacobian is folded into the target
automatically; returned draws are always in constrained space.

The tree construction follows the multinomial variant: leaves are weighted
by exp(-energy error) and proposals are drawn progressively with a bias
toward the newest subtree. Divergences (energy error above 1000) prune the
subtree, are counted, and abort the run only if more than 10% of post-warmup
transitions diverge. The mass matrix is diagonal, estimated once halfway
through burn-in from the preceding warmup draws.

Diagnostics follow the rank-normalized split-R-hat recipe and the Geyer
initial-monotone effective sample size.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .exceptions import SamplerError, ShapeError

DIVERGENCE_THRESHOLD = 1000.0
MAX_DIVERGENT_FRACTION = 0.10
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


# ---------------------------------------------------------------------------
# support transforms
# ---------------------------------------------------------------------------


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def _softplus(u: float) -> float:
    return max(u, 0.0) + math.log1p(math.exp(-abs(u)))


@dataclass
class SupportTransform:
    """Per-dimension map between a constrained support and all of R.

    Each tag is ("identity",), ("log", lower) or ("logit", a, b). The
    log-Jacobian reported everywhere is log|d constrained / d unconstrained|,
    the correction added to an unconstrained-space target.
    """

    tags: list[tuple]

    @classmethod
    def identity(cls, dim: int) -> "SupportTransform":
        return cls([("identity",)] * dim)

    @property
    def dim(self) -> int:
        return len(self.tags)

    def forward(self, constrained: np.ndarray) -> tuple[np.ndarray, float]:
        x = np.asarray(constrained, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected vector of length {self.dim}")
        u = np.empty_like(x)
        for i, tag in enumerate(self.tags):
            if tag[0] == "identity":
                u[i] = x[i]
            elif tag[0] == "log":
                if x[i] <= tag[1]:
                    raise ValueError(f"component {i} not strictly above {tag[1]}")
                u[i] = np.log(x[i] - tag[1])
            else:
                a, b = tag[1], tag[2]
                if not a < x[i] < b:
                    raise ValueError(f"component {i} not strictly inside ({a}, {b})")
                t = (x[i] - a) / (b - a)
                u[i] = np.log(t) - np.log1p(-t)
        return u, self.log_jacobian(u)

    def inverse(self, unconstrained: np.ndarray) -> np.ndarray:
        u = np.asarray(unconstrained, dtype=np.float64)
        x = np.empty_like(u)
        for i, tag in enumerate(self.tags):
            if tag[0] == "identity":
                x[i] = u[i]
            elif tag[0] == "log":
                x[i] = tag[1] + np.exp(u[i])
            else:
                a, b = tag[1], tag[2]
                x[i] = a + (b - a) * _sigmoid(u[i])
        return x

    def log_jacobian(self, u: np.ndarray) -> float:
        total = 0.0
        for i, tag in enumerate(self.tags):
            if tag[0] == "log":
                total += u[i]
            elif tag[0] == "logit":
                a, b = tag[1], tag[2]
                # log sigma(u) + log(1 - sigma(u)) written via softplus so the
                # far tails underflow gracefully instead of hitting log(0)
                total += math.log(b - a) - _softplus(-u[i]) - _softplus(u[i])
        return total

    def pullback_grad(self, u: np.ndarray, grad_constrained: np.ndarray) -> np.ndarray:
        """d/du of [logp(x(u)) + log_jacobian(u)] given d logp/dx."""
        g = np.empty_like(u)
        for i, tag in enumerate(self.tags):
            if tag[0] == "identity":
                g[i] = grad_constrained[i]
            elif tag[0] == "log":
                g[i] = grad_constrained[i] * np.exp(u[i]) + 1.0
            else:
                a, b = tag[1], tag[2]
                s = _sigmoid(u[i])
                g[i] = grad_constrained[i] * (b - a) * s * (1 - s) + (1.0 - 2.0 * s)
        return g


def transform_forward(t: SupportTransform, constrained: np.ndarray) -> tuple[np.ndarray, float]:
    """Map a strictly interior point to unconstrained space with its log-Jacobian."""
    return t.forward(constrained)


def transform_inverse(t: SupportTransform, unconstrained: np.ndarray) -> np.ndarray:
    return t.inverse(unconstrained)


# ---------------------------------------------------------------------------
# target and chain containers
# ---------------------------------------------------------------------------


@dataclass
class TargetDensity:
    """Differentiable log-density on constrained space.

    `log_density_and_grad`, when provided, is used by the sampler to share
    work between the value and the gradient.
    """

    dimension: int
    log_density: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    log_density_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None

    def fused(self) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
        if self.log_density_and_grad is not None:
            return self.log_density_and_grad
        return lambda q: (self.log_density(q), self.gradient(q))


@dataclass
class ChainSet:
    """Post-burn-in, thinned draws in constrained space plus run statistics."""

    draws: np.ndarray  # (chains, kept, dim)
    accept_rate: np.ndarray  # per-chain mean acceptance statistic
    divergences: int
    step_sizes: np.ndarray  # per-chain adapted step size
    mean_tree_depth: float

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def to_csv(self, path) -> None:
        n_chains, kept, dim = self.draws.shape
        with open(path, "w") as fh:
            fh.write("chain,iteration," + ",".join(f"p{i}" for i in range(dim)) + "\n")
            for ci in range(n_chains):
                for it in range(kept):
                    vals = ",".join(repr(float(v)) for v in self.draws[ci, it])
                    fh.write(f"{ci},{it},{vals}\n")


def load_chains_csv(path) -> np.ndarray:
    """Read a ChainSet CSV back into a (chains, kept, dim) array."""
    raw = np.genfromtxt(path, delimiter=",", names=True)
    chains = np.unique(raw["chain"].astype(int))
    dims = [n for n in raw.dtype.names if n.startswith("p")]
    out = []
    for c in chains:
        rows = raw[raw["chain"].astype(int) == c]
        out.append(np.column_stack([rows[d] for d in dims]))
    return np.array(out)


@dataclass
class McmcConfig:
    chains: int = 4
    iterations: int = 3500
    burn_in: int = 1000
    thin: int = 10
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int | None = None

    def validate(self) -> None:
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")


# ---------------------------------------------------------------------------
# NUTS internals
# ---------------------------------------------------------------------------


def _find_reasonable_epsilon(q, lp, grad, minv, fused, rng):
    eps = 1.0
    r = rng.standard_normal(q.size) / np.sqrt(minv)
    energy0 = -lp + 0.5 * np.sum(minv * r * r)

    def energy_after(eps):
        r1 = r + 0.5 * eps * grad
        q1 = q + eps * minv * r1
        lp1, g1 = fused(q1)
        if not np.isfinite(lp1):
            return np.inf
        r2 = r1 + 0.5 * eps * g1
        return -lp1 + 0.5 * np.sum(minv * r2 * r2)

    log_ratio = energy0 - energy_after(eps)
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        log_ratio = energy0 - energy_after(eps)
        if direction * log_ratio <= direction * math.log(0.5):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


class _Tree:
    __slots__ = (
        "q_minus", "r_minus", "g_minus", "q_plus", "r_plus", "g_plus",
        "proposal", "proposal_lp", "proposal_grad", "log_weight", "ok",
        "alpha_sum", "n_alpha", "divergent",
    )


def _uturn(q_plus, q_minus, r_plus, r_minus, minv):
    dq = q_plus - q_minus
    return (dq @ (minv * r_minus) < 0.0) or (dq @ (minv * r_plus) < 0.0)


def _build_tree(q, r, grad, lp, v, depth, eps, minv, energy0, fused, rng):
    if depth == 0:
        r1 = r + 0.5 * v * eps * grad
        q1 = q + v * eps * minv * r1
        lp1, g1 = fused(q1)
        tree = _Tree()
        if np.isfinite(lp1):
            r2 = r1 + 0.5 * v * eps * g1
            energy = -lp1 + 0.5 * np.sum(minv * r2 * r2)
            delta = energy - energy0
        else:
            r2, delta = r1, np.inf
        tree.q_minus = tree.q_plus = q1
        tree.r_minus = tree.r_plus = r2
        tree.g_minus = tree.g_plus = g1 if np.isfinite(lp1) else grad
        tree.proposal = q1
        tree.proposal_lp = lp1
        tree.proposal_grad = tree.g_minus
        tree.divergent = bool(delta > DIVERGENCE_THRESHOLD or not np.isfinite(delta))
        tree.ok = not tree.divergent
        tree.log_weight = -delta if tree.ok else -np.inf
        tree.alpha_sum = min(1.0, math.exp(-delta)) if np.isfinite(delta) else 0.0
        tree.n_alpha = 1
        return tree

    tree = _build_tree(q, r, grad, lp, v, depth - 1, eps, minv, energy0, fused, rng)
    if not tree.ok:
        return tree
    if v == 1:
        sub = _build_tree(
            tree.q_plus, tree.r_plus, tree.g_plus, lp, v, depth - 1, eps, minv, energy0, fused, rng
        )
        tree.q_plus, tree.r_plus, tree.g_plus = sub.q_plus, sub.r_plus, sub.g_plus
    else:
        sub = _build_tree(
            tree.q_minus, tree.r_minus, tree.g_minus, lp, v, depth - 1, eps, minv, energy0, fused, rng
        )
        tree.q_minus, tree.r_minus, tree.g_minus = sub.q_minus, sub.r_minus, sub.g_minus
    tree.alpha_sum += sub.alpha_sum
    tree.n_alpha += sub.n_alpha
    tree.divergent = tree.divergent or sub.divergent
    if sub.ok:
        total = np.logaddexp(tree.log_weight, sub.log_weight)
        if math.log(rng.uniform()) < sub.log_weight - total:
            tree.proposal = sub.proposal
            tree.proposal_lp = sub.proposal_lp
            tree.proposal_grad = sub.proposal_grad
        tree.log_weight = total
        tree.ok = not _uturn(tree.q_plus, tree.q_minus, tree.r_plus, tree.r_minus, minv)
    else:
        tree.ok = False
    return tree


def _run_chain(fused, q0, cfg: McmcConfig, rng) -> tuple[np.ndarray, dict]:
    dim = q0.size
    lp, grad = fused(q0)
    if not np.isfinite(lp):
        raise SamplerError("initial point has non-finite log-density")
    minv = np.ones(dim)
    eps = _find_reasonable_epsilon(q0, lp, grad, minv, fused, rng)
    mu = math.log(10.0 * eps)
    h_bar, log_eps_bar, da_t = 0.0, 0.0, 0

    warm = cfg.burn_in
    mass_at = warm // 2
    window_start = warm // 4
    warm_draws = np.empty((warm, dim))

    draws = np.empty((cfg.iterations - warm, dim))
    q = q0
    divergences = 0
    warm_divergences = 0
    depth_total = 0
    alpha_total, alpha_count = 0.0, 0

    for it in range(cfg.iterations):
        warmup = it < warm
        if warmup and it == mass_at and mass_at > window_start + 2:
            window = warm_draws[window_start:mass_at]
            var = window.var(axis=0, ddof=1)
            n_w = window.shape[0]
            minv = (n_w / (n_w + 5.0)) * var + (5.0 / (n_w + 5.0)) * 1e-3
            lp, grad = fused(q)
            eps = _find_reasonable_epsilon(q, lp, grad, minv, fused, rng)
            mu = math.log(10.0 * eps)
            h_bar, log_eps_bar, da_t = 0.0, 0.0, 0

        r0 = rng.standard_normal(dim) / np.sqrt(minv)
        energy0 = -lp + 0.5 * np.sum(minv * r0 * r0)
        tree = _Tree()
        tree.q_minus = tree.q_plus = q
        tree.r_minus = tree.r_plus = r0
        tree.g_minus = tree.g_plus = grad
        proposal, proposal_lp, proposal_grad = q, lp, grad
        log_weight = 0.0
        alpha_sum, n_alpha = 0.0, 0
        diverged = False
        depth = 0
        while depth < cfg.max_tree_depth:
            v = 1 if rng.uniform() < 0.5 else -1
            if v == 1:
                sub = _build_tree(
                    tree.q_plus, tree.r_plus, tree.g_plus, lp, v, depth, eps, minv, energy0, fused, rng
                )
            else:
                sub = _build_tree(
                    tree.q_minus, tree.r_minus, tree.g_minus, lp, v, depth, eps, minv, energy0, fused, rng
                )
            alpha_sum += sub.alpha_sum
            n_alpha += sub.n_alpha
            diverged = diverged or sub.divergent
            if not sub.ok:
                break
            if math.log(rng.uniform()) < sub.log_weight - log_weight:
                proposal, proposal_lp, proposal_grad = sub.proposal, sub.proposal_lp, sub.proposal_grad
            log_weight = np.logaddexp(log_weight, sub.log_weight)
            if v == 1:
                tree.q_plus, tree.r_plus, tree.g_plus = sub.q_plus, sub.r_plus, sub.g_plus
            else:
                tree.q_minus, tree.r_minus, tree.g_minus = sub.q_minus, sub.r_minus, sub.g_minus
            depth += 1
            if _uturn(tree.q_plus, tree.q_minus, tree.r_plus, tree.r_minus, minv):
                break

        q, lp, grad = proposal, proposal_lp, proposal_grad
        depth_total += depth

        if warmup:
            if diverged:
                warm_divergences += 1
            da_t += 1
            frac = alpha_sum / max(n_alpha, 1)
            h_bar = (1 - 1 / (da_t + _DA_T0)) * h_bar + (cfg.target_accept - frac) / (da_t + _DA_T0)
            log_eps = mu - math.sqrt(da_t) / _DA_GAMMA * h_bar
            eta = da_t**-_DA_KAPPA
            log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
            eps = math.exp(log_eps)
            warm_draws[it] = q
            if it == warm - 1:
                eps = math.exp(log_eps_bar)
        else:
            if diverged:
                divergences += 1
            alpha_total += alpha_sum / max(n_alpha, 1)
            alpha_count += 1
            draws[it - warm] = q

    if warm_divergences >= warm:
        raise SamplerError(
            f"all {warm_divergences} warmup transitions diverged; adaptation failed"
        )
    info = {
        "divergences": divergences,
        "accept_rate": alpha_total / max(alpha_count, 1),
        "step_size": eps,
        "mean_depth": depth_total / cfg.iterations,
    }
    return draws, info


def nuts_run(
    target: TargetDensity,
    inits: list[np.ndarray],
    cfg: McmcConfig,
    rng: np.random.Generator,
    transform: SupportTransform | None = None,
) -> ChainSet:
    """Sample with one NUTS chain per init; returns thinned constrained draws."""
    cfg.validate()
    if len(inits) != cfg.chains:
        raise ShapeError(f"need {cfg.chains} initial points, got {len(inits)}")
    if transform is None:
        transform = SupportTransform.identity(target.dimension)
    base_fused = target.fused()

    def fused(u):
        x = transform.inverse(u)
        lp, gx = base_fused(x)
        if not np.isfinite(lp):
            return -np.inf, np.zeros_like(u)
        return lp + transform.log_jacobian(u), transform.pullback_grad(u, gx)

    chain_rngs = rng.spawn(cfg.chains)
    kept_draws = []
    infos = []
    for q0_constrained, crng in zip(inits, chain_rngs):
        u0, _ = transform.forward(np.asarray(q0_constrained, dtype=np.float64))
        draws_u, info = _run_chain(fused, u0, cfg, crng)
        thinned = draws_u[:: cfg.thin]
        kept = np.empty_like(thinned)
        for i in range(thinned.shape[0]):
            kept[i] = transform.inverse(thinned[i])
        kept_draws.append(kept)
        infos.append(info)

    total_div = sum(i["divergences"] for i in infos)
    post = cfg.chains * (cfg.iterations - cfg.burn_in)
    if total_div > MAX_DIVERGENT_FRACTION * post:
        raise SamplerError(
            f"{total_div} of {post} post-warmup transitions diverged (> {MAX_DIVERGENT_FRACTION:.0%})"
        )
    return ChainSet(
        draws=np.array(kept_draws),
        accept_rate=np.array([i["accept_rate"] for i in infos]),
        divergences=total_div,
        step_sizes=np.array([i["step_size"] for i in infos]),
        mean_tree_depth=float(np.mean([i["mean_depth"] for i in infos])),
    )


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------


def _z_scale(a: np.ndarray) -> np.ndarray:
    rank = rankdata(a, method="average").reshape(a.shape)
    return ndtri((rank - 0.5) / a.size)


def _split_chains(a: np.ndarray) -> np.ndarray:
    _, n = a.shape
    half = n // 2
    return np.vstack((a[:, :half], a[:, n - half:]))


def _rhat_basic(a: np.ndarray) -> float:
    n_chains, n = a.shape
    chain_mean = a.mean(axis=1)
    chain_var = a.var(axis=1, ddof=1)
    between = n * np.var(chain_mean, ddof=1)
    within = np.mean(chain_var)
    if within == 0:
        return np.nan
    var_hat = (n - 1) / n * within + between / n
    return math.sqrt(var_hat / within)


def _is_constant(a: np.ndarray) -> bool:
    return np.all(a == a.ravel()[0])


def rank_normalized_rhat(cs: ChainSet | np.ndarray) -> np.ndarray:
    """Per-dimension rank-normalized split R-hat (max of bulk and folded).

    Degenerate (constant) dimensions are flagged as NaN with a warning.
    """
    draws = cs.draws if isinstance(cs, ChainSet) else np.asarray(cs)
    n_chains, n, dim = draws.shape
    if n_chains < 2 or n < 4:
        raise ValueError("need at least 2 chains and 4 draws per chain")
    out = np.empty(dim)
    for j in range(dim):
        a = draws[:, :, j]
        if _is_constant(a):
            warnings.warn(f"dimension {j} is constant; R-hat undefined")
            out[j] = np.nan
            continue
        bulk = _rhat_basic(_z_scale(_split_chains(a)))
        folded = _rhat_basic(_z_scale(_split_chains(np.abs(a - np.median(a)))))
        out[j] = max(bulk, folded)
    return out


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    return np.fft.irfft(f * np.conj(f), size)[:n].real / n


def effective_sample_size(cs: ChainSet | np.ndarray) -> np.ndarray:
    """Per-dimension ESS via Geyer's initial-monotone autocorrelation sum."""
    draws = cs.draws if isinstance(cs, ChainSet) else np.asarray(cs)
    n_chains, n, dim = draws.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    out = np.empty(dim)
    for j in range(dim):
        a = draws[:, :, j]
        if _is_constant(a):
            warnings.warn(f"dimension {j} is constant; ESS undefined")
            out[j] = np.nan
            continue
        acov = np.array([_autocov(a[c]) for c in range(n_chains)])
        chain_mean = a.mean(axis=1)
        mean_var = np.mean(acov[:, 0]) * n / (n - 1.0)
        var_plus = mean_var * (n - 1.0) / n
        if n_chains > 1:
            var_plus += np.var(chain_mean, ddof=1)

        rho = np.zeros(n)
        rho[0] = 1.0
        rho_even = 1.0
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
        rho[1] = rho_odd
        t = 1
        while t < n - 2 and (rho_even + rho_odd) >= 0.0:
            rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
            rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
            rho[t + 1] = rho_even
            if (rho_even + rho_odd) >= 0:
                rho[t + 2] = rho_odd
            t += 2
        max_t = t
        t = 1
        while t <= max_t - 2:
            if (rho[t + 1] + rho[t + 2]) > (rho[t - 1] + rho[t]):
                rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
                rho[t + 2] = rho[t + 1]
            t += 2
        tau = -1.0 + 2.0 * np.sum(rho[:max_t]) + np.sum(rho[max_t + 1 : max_t + 2])
        out[j] = n_chains * n / tau
    return out
