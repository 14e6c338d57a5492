"""Parameter priors: analytic densities, samplers and unconstrained maps.

Each prior exposes the support transform used by the sampler, so bounded
parameters (uniform components, the infection/recovery triangle) are handled
without leaving the NUTS machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .mcmc import SupportTransform, _sigmoid, _softplus


@dataclass
class IndependentPrior:
    """Product of per-dimension uniform(a, b) and normal(mu, sigma) factors."""

    components: list[tuple]

    @property
    def dim(self) -> int:
        return len(self.components)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.dim))
        for i, comp in enumerate(self.components):
            if comp[0] == "uniform":
                out[:, i] = rng.uniform(comp[1], comp[2], size=n)
            elif comp[0] == "normal":
                out[:, i] = rng.normal(comp[1], comp[2], size=n)
            else:
                raise ValueError(f"unknown prior component {comp[0]}")
        return out

    def log_pdf(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ShapeError(f"expected theta of length {self.dim}")
        total = 0.0
        for i, comp in enumerate(self.components):
            if comp[0] == "uniform":
                a, b = comp[1], comp[2]
                if not a <= theta[i] <= b:
                    return -np.inf
                total += -math.log(b - a)
            else:
                mu, sigma = comp[1], comp[2]
                z = (theta[i] - mu) / sigma
                total += -0.5 * z * z - math.log(sigma) - 0.5 * math.log(2 * math.pi)
        return total

    def log_pdf_grad(self, theta: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for i, comp in enumerate(self.components):
            if comp[0] == "normal":
                mu, sigma = comp[1], comp[2]
                g[i] = -(theta[i] - mu) / sigma**2
        return g

    def transform(self) -> SupportTransform:
        tags = []
        for comp in self.components:
            if comp[0] == "uniform":
                tags.append(("logit", comp[1], comp[2]))
            else:
                tags.append(("identity",))
        return SupportTransform(tags)


class ConditionalIntervalPrior:
    """Triangle prior: rate2 ~ U(0, c) and rate1 | rate2 ~ U(rate2, c).

    theta = (rate1, rate2); used for the epidemic model where the infection
    rate must exceed the recovery rate. The unconstrained map pushes a
    uniform unit square through (t1, t2) -> (rate2 + (c - rate2) t1, c t2),
    which reproduces the conditional-uniform prior exactly.
    """

    def __init__(self, upper: float = 0.5):
        self.upper = upper
        self.dim = 2

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        t2 = rng.uniform(0.0, 1.0, size=n)
        t1 = rng.uniform(0.0, 1.0, size=n)
        rate2 = self.upper * t2
        rate1 = rate2 + (self.upper - rate2) * t1
        return np.column_stack([rate1, rate2])

    def log_pdf(self, theta: np.ndarray) -> float:
        rate1, rate2 = float(theta[0]), float(theta[1])
        c = self.upper
        if not (0.0 <= rate2 <= c and rate2 <= rate1 <= c):
            return -np.inf
        return -math.log(c) - math.log(c - rate2) if rate2 < c else -np.inf

    def log_pdf_grad(self, theta: np.ndarray) -> np.ndarray:
        # d/d rate2 of -log(c - rate2)
        return np.array([0.0, 1.0 / (self.upper - theta[1])])

    def transform(self) -> "_TriangleTransform":
        return _TriangleTransform(self.upper)


class _TriangleTransform:
    """Unconstrained map for (rate1, rate2) with 0 < rate2 < rate1 < c."""

    def __init__(self, upper: float):
        self.upper = upper
        self.dim = 2

    def forward(self, constrained: np.ndarray) -> tuple[np.ndarray, float]:
        rate1, rate2 = float(constrained[0]), float(constrained[1])
        c = self.upper
        if not (0.0 < rate2 < c and rate2 < rate1 < c):
            raise ValueError("point not strictly inside the triangle support")
        t2 = rate2 / c
        t1 = (rate1 - rate2) / (c - rate2)
        u = np.array([math.log(t1) - math.log1p(-t1), math.log(t2) - math.log1p(-t2)])
        return u, self.log_jacobian(u)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        c = self.upper
        rate2 = c * _sigmoid(u[1])
        rate1 = rate2 + (c - rate2) * _sigmoid(u[0])
        return np.array([rate1, rate2])

    def log_jacobian(self, u: np.ndarray) -> float:
        c = self.upper
        rate2 = c * _sigmoid(u[1])
        # det of the lower-triangular Jacobian d(rate1, rate2)/d(u1, u2)
        return (
            math.log(c)
            + math.log(c - rate2)
            - _softplus(-u[0])
            - _softplus(u[0])
            - _softplus(-u[1])
            - _softplus(u[1])
        )

    def pullback_grad(self, u: np.ndarray, grad_constrained: np.ndarray) -> np.ndarray:
        c = self.upper
        s1, s2 = _sigmoid(u[0]), _sigmoid(u[1])
        ds1 = s1 * (1 - s1)
        ds2 = s2 * (1 - s2)
        rate2 = c * s2
        g1, g2 = float(grad_constrained[0]), float(grad_constrained[1])
        out = np.empty(2)
        # chain rule through (rate1, rate2) plus the log-Jacobian's own gradient
        out[0] = (c - rate2) * ds1 * g1 + (1.0 - 2.0 * s1)
        out[1] = c * ds2 * (1.0 - s1) * g1 + c * ds2 * g2 - c * ds2 / (c - rate2) + (
            1.0 - 2.0 * s2
        )
        return out
