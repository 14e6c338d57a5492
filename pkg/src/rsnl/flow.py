"""Conditional coupling flow with rational-quadratic-spline transforms.

The flow maps summaries to a standard-normal base, conditioning each
coupling layer's spline parameters on (untransformed half, context) through
a small ReLU MLP. Transforms are monotone rational-quadratic splines on
[-bound, bound] with identity tails, so points far outside the training
range keep a well-defined (Gaussian-tail) density.

All derivatives - with respect to inputs, context and conditioner weights -
are computed by hand-written reverse passes; see `_rqs_forward_batch` /
`_rqs_backward_batch` for the spline adjoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericError, ShapeError, TrainingError
from .nn import (
    AdamState,
    MlpParams,
    adam_step,
    backward_cached,
    forward_cached,
    init_adam,
    init_mlp,
)

N_BINS = 10
BOUND = 5.0
MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(raw + shift) + MIN_DERIVATIVE == 1 at raw == 0, so a conditioner
# emitting zeros yields the identity spline
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))
LOG_2PI = math.log(2.0 * math.pi)

try:
    from ._fastpath import HAVE_NUMBA as _FAST_OK
except ImportError:  # pragma: no cover
    _FAST_OK = False


@dataclass
class RqsParams:
    """Explicit knot parameterization of one monotone spline."""

    bin_widths: np.ndarray
    bin_heights: np.ndarray
    knot_derivatives: np.ndarray
    bound: float = BOUND

    def validate(self) -> None:
        k = self.bin_widths.size
        if self.bin_heights.size != k or self.knot_derivatives.size != k + 1:
            raise ShapeError("spline needs K widths, K heights, K+1 derivatives")
        if np.any(self.bin_widths <= 0) or np.any(self.bin_heights <= 0):
            raise ValueError("bin widths/heights must be strictly positive")
        if not np.isclose(self.bin_widths.sum(), 2 * self.bound) or not np.isclose(
            self.bin_heights.sum(), 2 * self.bound
        ):
            raise ValueError("bin widths/heights must sum to the full range")
        if np.any(self.knot_derivatives <= 0):
            raise ValueError("knot derivatives must be strictly positive")
        if not (
            np.isclose(self.knot_derivatives[0], 1.0)
            and np.isclose(self.knot_derivatives[-1], 1.0)
        ):
            raise ValueError("boundary derivatives must equal 1 for identity tails")


@dataclass
class CouplingLayer:
    transformed: np.ndarray  # indices rewritten by the spline
    identity: np.ndarray  # indices passed through (conditioner inputs)
    conditioner: MlpParams


@dataclass
class FlowParams:
    layers: list[CouplingLayer]
    summary_dim: int
    context_dim: int
    n_bins: int = N_BINS
    bound: float = BOUND

    def copy(self) -> "FlowParams":
        return FlowParams(
            [
                CouplingLayer(l.transformed.copy(), l.identity.copy(), l.conditioner.copy())
                for l in self.layers
            ],
            self.summary_dim,
            self.context_dim,
            self.n_bins,
            self.bound,
        )


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch: int = 256
    max_epochs: int = 500
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int | None = None

    def validate(self) -> None:
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


def init_flow(
    summary_dim: int,
    context_dim: int,
    rng: np.random.Generator,
    n_layers: int = 5,
    hidden: int = 50,
    n_bins: int = N_BINS,
    bound: float = BOUND,
) -> FlowParams:
    """Fresh flow with alternating even/odd masks and Glorot conditioners."""
    if summary_dim < 1 or context_dim < 1:
        raise ShapeError("summary_dim and context_dim must be >= 1")
    layers = []
    all_idx = np.arange(summary_dim)
    for l in range(n_layers):
        if summary_dim == 1:
            transformed, identity = all_idx, np.array([], dtype=int)
        else:
            transformed = all_idx[all_idx % 2 == l % 2]
            identity = all_idx[all_idx % 2 != l % 2]
        out_dim = transformed.size * (3 * n_bins + 1)
        cond = init_mlp([identity.size + context_dim, hidden, hidden, out_dim], rng)
        layers.append(CouplingLayer(transformed, identity, cond))
    return FlowParams(layers, summary_dim, context_dim, n_bins, bound)


def zero_conditioner_outputs(fp: FlowParams) -> FlowParams:
    """Zero each conditioner's final layer, making every spline the identity."""
    fp = fp.copy()
    for layer in fp.layers:
        layer.conditioner.weights[-1][...] = 0.0
        layer.conditioner.biases[-1][...] = 0.0
    return fp


# ---------------------------------------------------------------------------
# spline parameter construction (raw conditioner outputs -> knots)
# ---------------------------------------------------------------------------


def _softmax(r: np.ndarray) -> np.ndarray:
    z = r - r.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _knots_from_raw(raw: np.ndarray, n_bins: int, bound: float):
    """raw (..., 3K+1) -> cumulative knots cw/ch (..., K+1), derivatives (..., K+1).

    Returns a cache used by `_knots_backward`.
    """
    k = n_bins
    rw, rh, rd = raw[..., :k], raw[..., k : 2 * k], raw[..., 2 * k :]
    pw = _softmax(rw)
    ph = _softmax(rh)
    span = 2.0 * bound
    scale = (1.0 - k * MIN_BIN_FRACTION) * span
    widths = MIN_BIN_FRACTION * span + scale * pw
    heights = MIN_BIN_FRACTION * span + scale * ph

    shape = raw.shape[:-1]
    cw = np.empty(shape + (k + 1,))
    cw[..., 0] = -bound
    np.cumsum(widths, axis=-1, out=cw[..., 1:])
    cw[..., 1:] -= bound
    cw[..., -1] = bound
    ch = np.empty_like(cw)
    ch[..., 0] = -bound
    np.cumsum(heights, axis=-1, out=ch[..., 1:])
    ch[..., 1:] -= bound
    ch[..., -1] = bound

    sig = 1.0 / (1.0 + np.exp(-(rd[..., 1:-1] + _DERIV_SHIFT)))
    d = np.empty_like(cw)
    d[..., 0] = 1.0
    d[..., -1] = 1.0
    # softplus(x) = log1p(exp(x)), evaluated stably via the sigmoid cache
    d[..., 1:-1] = MIN_DERIVATIVE + np.log1p(
        np.exp(-np.abs(rd[..., 1:-1] + _DERIV_SHIFT))
    ) + np.maximum(rd[..., 1:-1] + _DERIV_SHIFT, 0.0)
    cache = (pw, ph, sig, scale)
    return cw, ch, d, cache


def _knots_backward(cache, g_cw, g_ch, g_d, n_bins: int):
    """Adjoint of `_knots_from_raw`: knot gradients -> raw-output gradients."""
    pw, ph, sig, scale = cache
    # cw_j = -bound + sum_{i<j} w_i  =>  g_w_i = sum_{j>i} g_cw_j
    g_w = np.flip(np.cumsum(np.flip(g_cw[..., 1:], axis=-1), axis=-1), axis=-1)
    g_h = np.flip(np.cumsum(np.flip(g_ch[..., 1:], axis=-1), axis=-1), axis=-1)
    g_pw = scale * g_w
    g_ph = scale * g_h
    g_rw = pw * (g_pw - (g_pw * pw).sum(axis=-1, keepdims=True))
    g_rh = ph * (g_ph - (g_ph * ph).sum(axis=-1, keepdims=True))
    g_rd = np.zeros(g_cw.shape[:-1] + (n_bins + 1,))
    g_rd[..., 1:-1] = sig * g_d[..., 1:-1]
    return np.concatenate([g_rw, g_rh, g_rd], axis=-1)


# ---------------------------------------------------------------------------
# elementwise rational-quadratic transform with manual adjoints
# ---------------------------------------------------------------------------


def _rqs_forward_batch(x: np.ndarray, cw: np.ndarray, ch: np.ndarray, d: np.ndarray, bound: float):
    """Monotone spline forward on a flat element array; identity outside the box."""
    inside = np.abs(x) < bound
    xc = np.clip(x, -bound, bound)
    k = np.sum(cw <= xc[..., None], axis=-1) - 1
    np.clip(k, 0, cw.shape[-1] - 2, out=k)
    take = np.take_along_axis
    k1 = k[..., None]
    cwk = take(cw, k1, -1)[..., 0]
    cwk1 = take(cw, k1 + 1, -1)[..., 0]
    chk = take(ch, k1, -1)[..., 0]
    chk1 = take(ch, k1 + 1, -1)[..., 0]
    dk = take(d, k1, -1)[..., 0]
    dk1 = take(d, k1 + 1, -1)[..., 0]

    w = cwk1 - cwk
    dy = chk1 - chk
    s = dy / w
    xi = np.clip((xc - cwk) / w, 0.0, 1.0)
    xi1 = xi * (1.0 - xi)
    e = dk1 + dk - 2.0 * s
    den = s + e * xi1
    num = dy * (s * xi * xi + dk * xi1)
    p = dk1 * xi * xi + 2.0 * s * xi1 + dk * (1.0 - xi) ** 2

    y = np.where(inside, chk + num / den, x)
    ld = np.where(inside, 2.0 * np.log(s) + np.log(p) - 2.0 * np.log(den), 0.0)
    cache = (inside, k, w, dy, s, xi, xi1, e, den, num, p, dk, dk1)
    return y, ld, cache


def _rqs_backward_batch(cache, gy: np.ndarray, gld: np.ndarray, n_knots: int):
    """Adjoint of `_rqs_forward_batch`.

    Given upstream gradients for (y, log_det) returns gradients for x and the
    per-element knot arrays (cw, ch, d).
    """
    inside, k, w, dy, s, xi, xi1, e, den, num, p, dk, dk1 = cache
    gyi = np.where(inside, gy, 0.0)
    gldi = np.where(inside, gld, 0.0)

    g_chk = gyi.copy()
    g_num = gyi / den
    g_den = -gyi * num / (den * den)
    g_s = 2.0 * gldi / s
    g_p = gldi / p
    g_den += -2.0 * gldi / den

    # p = dk1 xi^2 + 2 s xi1 + dk (1-xi)^2
    g_dk1 = g_p * xi * xi
    g_s += 2.0 * g_p * xi1
    g_dk = g_p * (1.0 - xi) ** 2
    g_xi = g_p * (2.0 * dk1 * xi - 2.0 * dk * (1.0 - xi))
    g_xi1 = 2.0 * s * g_p

    # den = s + e*xi1, e = dk1 + dk - 2 s
    g_s += g_den * (1.0 - 2.0 * xi1)
    g_dk1 += g_den * xi1
    g_dk += g_den * xi1
    g_xi1 += g_den * e

    # num = dy (s xi^2 + dk xi1)
    g_dy = g_num * (s * xi * xi + dk * xi1)
    g_s += g_num * dy * xi * xi
    g_xi += g_num * dy * s * 2.0 * xi
    g_dk += g_num * dy * xi1
    g_xi1 += g_num * dy * dk

    g_xi += g_xi1 * (1.0 - 2.0 * xi)

    # s = dy / w
    g_dy += g_s / w
    g_w = -g_s * s / w

    # xi = (x - cwk) / w
    g_x = np.where(inside, g_xi / w, gy)
    g_cwk = -g_xi / w
    g_w += -g_xi * xi / w

    # w = cwk1 - cwk, dy = chk1 - chk
    g_cwk1 = g_w
    g_cwk += -g_w
    g_chk1 = g_dy
    g_chk += -g_dy

    shape = k.shape + (n_knots,)
    g_cw = np.zeros(shape)
    g_ch = np.zeros(shape)
    g_d = np.zeros(shape)
    idx = np.indices(k.shape, sparse=True)
    g_cw[(*idx, k)] += g_cwk
    g_cw[(*idx, k + 1)] += g_cwk1
    g_ch[(*idx, k)] += g_chk
    g_ch[(*idx, k + 1)] += g_chk1
    g_d[(*idx, k)] += g_dk
    g_d[(*idx, k + 1)] += g_dk1
    return g_x, g_cw, g_ch, g_d


def _rqs_inverse_batch(y: np.ndarray, cw: np.ndarray, ch: np.ndarray, d: np.ndarray, bound: float):
    """Exact inverse via the stable quadratic-root formula."""
    inside = np.abs(y) < bound
    yc = np.clip(y, -bound, bound)
    k = np.sum(ch <= yc[..., None], axis=-1) - 1
    np.clip(k, 0, ch.shape[-1] - 2, out=k)
    take = np.take_along_axis
    k1 = k[..., None]
    cwk = take(cw, k1, -1)[..., 0]
    cwk1 = take(cw, k1 + 1, -1)[..., 0]
    chk = take(ch, k1, -1)[..., 0]
    chk1 = take(ch, k1 + 1, -1)[..., 0]
    dk = take(d, k1, -1)[..., 0]
    dk1 = take(d, k1 + 1, -1)[..., 0]

    w = cwk1 - cwk
    dy = chk1 - chk
    s = dy / w
    e = dk1 + dk - 2.0 * s
    yk = np.clip(yc - chk, 0.0, None)
    a = dy * (s - dk) + yk * e
    b = dy * dk - yk * e
    c = -s * yk
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = np.clip(2.0 * c / (-b - np.sqrt(disc)), 0.0, 1.0)

    xi1 = xi * (1.0 - xi)
    den = s + e * xi1
    p = dk1 * xi * xi + 2.0 * s * xi1 + dk * (1.0 - xi) ** 2
    x = np.where(inside, cwk + xi * w, y)
    ld = np.where(inside, -(2.0 * np.log(s) + np.log(p) - 2.0 * np.log(den)), 0.0)
    return x, ld


# ---------------------------------------------------------------------------
# public single-spline operations
# ---------------------------------------------------------------------------


def _knot_arrays(p: RqsParams):
    cw = np.concatenate([[-p.bound], -p.bound + np.cumsum(p.bin_widths)])
    ch = np.concatenate([[-p.bound], -p.bound + np.cumsum(p.bin_heights)])
    cw[-1] = p.bound
    ch[-1] = p.bound
    return cw[None, :], ch[None, :], np.asarray(p.knot_derivatives, dtype=float)[None, :]


def rqs_forward(x: float, p: RqsParams) -> tuple[float, float]:
    """Spline value and log |dy/dx| at x; identity with log-det 0 outside the box."""
    if not np.isfinite(x):
        raise NumericError("spline input must be finite")
    p.validate()
    cw, ch, d = _knot_arrays(p)
    y, ld, _ = _rqs_forward_batch(np.array([float(x)]), cw, ch, d, p.bound)
    return float(y[0]), float(ld[0])


def rqs_inverse(y: float, p: RqsParams) -> tuple[float, float]:
    """Pre-image of y and the negated forward log-det at that pre-image."""
    if not np.isfinite(y):
        raise NumericError("spline input must be finite")
    p.validate()
    cw, ch, d = _knot_arrays(p)
    x, ld = _rqs_inverse_batch(np.array([float(y)]), cw, ch, d, p.bound)
    return float(x[0]), float(ld[0])


def rqs_params_from_raw(raw: np.ndarray, n_bins: int = N_BINS, bound: float = BOUND) -> RqsParams:
    """Map raw conditioner outputs (3K+1 values) to a valid spline."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (3 * n_bins + 1,):
        raise ShapeError(f"expected {3 * n_bins + 1} raw values, got {raw.shape}")
    cw, ch, d, _ = _knots_from_raw(raw[None, :], n_bins, bound)
    return RqsParams(np.diff(cw[0]), np.diff(ch[0]), d[0], bound)


# ---------------------------------------------------------------------------
# full-flow passes
# ---------------------------------------------------------------------------


def _check_shapes(fp: FlowParams, x: np.ndarray, c: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if x.shape[1] != fp.summary_dim:
        raise ShapeError(f"summary dim {x.shape[1]} != {fp.summary_dim}")
    if c.shape[1] != fp.context_dim:
        raise ShapeError(f"context dim {c.shape[1]} != {fp.context_dim}")
    if c.shape[0] == 1 and x.shape[0] > 1:
        c = np.broadcast_to(c, (x.shape[0], fp.context_dim))
    if x.shape[0] != c.shape[0]:
        raise ShapeError("summary and context batches differ")
    return x, c


def _forward_pass(fp: FlowParams, x: np.ndarray, c: np.ndarray, keep_cache: bool):
    n = x.shape[0]
    z = x.copy()
    ld_total = np.zeros(n)
    caches = [] if keep_cache else None
    for layer in fp.layers:
        za = z[:, layer.identity]
        zb = z[:, layer.transformed]
        h_in = np.concatenate([za, c], axis=1)
        raw, mlp_cache = forward_cached(layer.conditioner, h_in)
        raw = raw.reshape(n, layer.transformed.size, 3 * fp.n_bins + 1)
        cw, ch, d, knot_cache = _knots_from_raw(raw, fp.n_bins, fp.bound)
        yb, ld, rqs_cache = _rqs_forward_batch(zb, cw, ch, d, fp.bound)
        z = z.copy()
        z[:, layer.transformed] = yb
        ld_total += ld.sum(axis=1)
        if keep_cache:
            caches.append((mlp_cache, knot_cache, rqs_cache))
    lp = -0.5 * (z * z).sum(axis=1) - 0.5 * fp.summary_dim * LOG_2PI + ld_total
    return lp, z, caches


def _backward_pass(
    fp: FlowParams,
    z_final: np.ndarray,
    c: np.ndarray,
    caches,
    seed: np.ndarray,
    need_param_grads: bool,
):
    """Reverse pass seeding d(loss)/d(log_prob_i) = seed[i].

    Returns (g_x, g_c, per-layer conditioner grads or None).
    """
    n = z_final.shape[0]
    gz = -z_final * seed[:, None]
    gc = np.zeros((n, fp.context_dim))
    param_grads = [] if need_param_grads else None
    for layer, cache in zip(reversed(fp.layers), reversed(caches)):
        mlp_cache, knot_cache, rqs_cache = cache
        g_yb = gz[:, layer.transformed]
        gld = np.broadcast_to(seed[:, None], g_yb.shape)
        g_zb, g_cw, g_ch, g_d = _rqs_backward_batch(rqs_cache, g_yb, gld, fp.n_bins + 1)
        g_raw = _knots_backward(knot_cache, g_cw, g_ch, g_d, fp.n_bins)
        g_raw = g_raw.reshape(n, -1)
        grads, g_hin = backward_cached(layer.conditioner, mlp_cache, g_raw, need_param_grads)
        if need_param_grads:
            param_grads.append(grads)
        na = layer.identity.size
        gz_new = np.empty_like(gz)
        gz_new[:, layer.identity] = gz[:, layer.identity] + g_hin[:, :na]
        gz_new[:, layer.transformed] = g_zb
        gz = gz_new
        gc += g_hin[:, na:]
    if need_param_grads:
        param_grads.reverse()
    return gz, gc, param_grads


def flow_log_prob(fp: FlowParams, summary: np.ndarray, context: np.ndarray) -> float | np.ndarray:
    """Exact conditional log-density of `summary` given `context`."""
    single = np.asarray(summary).ndim == 1
    x, c = _check_shapes(fp, summary, context)
    lp, _, _ = _forward_pass(fp, x, c, keep_cache=False)
    return float(lp[0]) if single else lp


def flow_log_prob_grad(
    fp: FlowParams, summary: np.ndarray, context: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the log-density with respect to summary and context."""
    single = np.asarray(summary).ndim == 1
    x, c = _check_shapes(fp, summary, context)
    _, z, caches = _forward_pass(fp, x, c, keep_cache=True)
    gx, gc, _ = _backward_pass(fp, z, c, caches, np.ones(x.shape[0]), need_param_grads=False)
    if single:
        return gx[0], gc[0]
    return gx, gc


def flow_log_prob_and_grad(fp: FlowParams, summary: np.ndarray, context: np.ndarray):
    """(log_prob, d/d summary, d/d context) sharing one forward pass.

    Single points route through the compiled kernels when numba is present;
    the numpy reference path is used otherwise and for batches.
    """
    single = np.asarray(summary).ndim == 1
    if single and _FAST_OK and np.asarray(context).ndim == 1:
        from ._fastpath import flow_logprob_grad_point

        x = np.asarray(summary, dtype=np.float64)
        c = np.asarray(context, dtype=np.float64)
        if x.size != fp.summary_dim or c.size != fp.context_dim:
            raise ShapeError("summary/context dims do not match the flow")
        return flow_logprob_grad_point(fp, x, c)
    x, c = _check_shapes(fp, summary, context)
    lp, z, caches = _forward_pass(fp, x, c, keep_cache=True)
    gx, gc, _ = _backward_pass(fp, z, c, caches, np.ones(x.shape[0]), need_param_grads=False)
    if single:
        return float(lp[0]), gx[0], gc[0]
    return lp, gx, gc


def _inverse_pass(fp: FlowParams, z: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Map base-space points back to summary space (exact layer inverses)."""
    n = z.shape[0]
    for layer in reversed(fp.layers):
        za = z[:, layer.identity]
        h_in = np.concatenate([za, c], axis=1)
        raw, _ = forward_cached(layer.conditioner, h_in)
        raw = raw.reshape(n, layer.transformed.size, 3 * fp.n_bins + 1)
        cw, ch, d, _ = _knots_from_raw(raw, fp.n_bins, fp.bound)
        xb, _ = _rqs_inverse_batch(z[:, layer.transformed], cw, ch, d, fp.bound)
        z = z.copy()
        z[:, layer.transformed] = xb
    return z


def flow_sample(
    fp: FlowParams, context: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw n summaries at one context by inverting the layers on base samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    context = np.asarray(context, dtype=np.float64)
    if context.size != fp.context_dim:
        raise ShapeError(f"context dim {context.size} != {fp.context_dim}")
    c = np.broadcast_to(context.reshape(1, -1), (n, fp.context_dim))
    return _inverse_pass(fp, rng.standard_normal((n, fp.summary_dim)), c)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _nll(fp: FlowParams, x: np.ndarray, c: np.ndarray) -> float:
    lp, _, _ = _forward_pass(fp, x, c, keep_cache=False)
    return float(-lp.mean())


def train_flow(
    summaries: np.ndarray,
    contexts: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    fp: FlowParams | None = None,
) -> tuple[FlowParams, dict]:
    """Fit a fresh flow by minibatch Adam on the mean negative log-likelihood.

    `summaries` and `contexts` must already be standardized. Stops when the
    validation loss (a held-out fraction of the pairs) has not improved for
    `cfg.patience` epochs, and returns the parameters from the best epoch
    together with a small training record.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = np.asarray(summaries, dtype=np.float64)
    c = np.asarray(contexts, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[0] != c.shape[0]:
        raise ShapeError("summaries and contexts must be matching 2-D arrays")
    n = x.shape[0]
    if n < 20:
        raise ValueError("need at least 20 training pairs")

    fp = init_flow(x.shape[1], c.shape[1], rng) if fp is None else fp.copy()
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    xv, cv = x[val_idx], c[val_idx]
    xt, ct = x[train_idx], c[train_idx]

    adam_states: list[AdamState] = [init_adam(l.conditioner) for l in fp.layers]
    best = fp.copy()
    best_val = _nll(fp, xv, cv)
    best_epoch = 0
    n_train = xt.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch):
            idx = order[start : start + cfg.batch]
            xb, cb = xt[idx], ct[idx]
            lp, z, caches = _forward_pass(fp, xb, cb, keep_cache=True)
            if not np.all(np.isfinite(lp)):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            seed = np.full(xb.shape[0], -1.0 / xb.shape[0])
            _, _, grads = _backward_pass(fp, z, cb, caches, seed, need_param_grads=True)
            for i, layer in enumerate(fp.layers):
                adam_states[i], layer.conditioner = adam_step(
                    adam_states[i], layer.conditioner, grads[i], cfg.lr
                )
        val = _nll(fp, xv, cv)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val < best_val:
            best_val = val
            best = fp.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    record = {"best_val_loss": best_val, "best_epoch": best_epoch, "epochs_run": epoch}
    return best, record


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_flow(fp: FlowParams, path) -> None:
    """Write a versioned npz checkpoint."""
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "summary_dim": np.array(fp.summary_dim),
        "context_dim": np.array(fp.context_dim),
        "n_bins": np.array(fp.n_bins),
        "bound": np.array(fp.bound),
        "n_layers": np.array(len(fp.layers)),
    }
    for i, layer in enumerate(fp.layers):
        payload[f"layer{i}_transformed"] = layer.transformed
        payload[f"layer{i}_identity"] = layer.identity
        for j, (w, b) in enumerate(zip(layer.conditioner.weights, layer.conditioner.biases)):
            payload[f"layer{i}_w{j}"] = w
            payload[f"layer{i}_b{j}"] = b
        payload[f"layer{i}_n_mlp"] = np.array(len(layer.conditioner.weights))
    np.savez(path, **payload)


def load_flow(path) -> FlowParams:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        layers = []
        for i in range(int(data["n_layers"])):
            n_mlp = int(data[f"layer{i}_n_mlp"])
            cond = MlpParams(
                [data[f"layer{i}_w{j}"] for j in range(n_mlp)],
                [data[f"layer{i}_b{j}"] for j in range(n_mlp)],
            )
            layers.append(
                CouplingLayer(data[f"layer{i}_transformed"], data[f"layer{i}_identity"], cond)
            )
        return FlowParams(
            layers,
            int(data["summary_dim"]),
            int(data["context_dim"]),
            int(data["n_bins"]),
            float(data["bound"]),
        )
