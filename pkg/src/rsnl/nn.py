"""Dense MLP forward/backward passes and the Adam optimizer.

Everything is float64 and functional: operations return new containers and
never mutate their inputs. Hidden layers use ReLU, the output layer is
linear. Backprop is written per layer; there is no general autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class MlpParams:
    """Weights/biases of a ReLU MLP. weights[i] has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class AdamState:
    """First/second-moment accumulators shaped like the parameters they track."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0


def init_mlp(sizes: list[int], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_adam(params: MlpParams) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ShapeError(
            f"input of shape {x.shape} does not match first layer input dim {params.in_dim}"
        )
    return x


def forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping each layer's (post-activation) input for backprop."""
    x = _check_input(params, x)
    h = np.atleast_2d(x)
    inputs = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    if x.ndim == 1:
        return h[0], inputs
    return h, inputs


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network at `x` (a single vector or a batch of rows)."""
    out, _ = forward_cached(params, x)
    return out


def backward_cached(
    params: MlpParams,
    inputs: list[np.ndarray],
    upstream: np.ndarray,
    need_param_grads: bool = True,
) -> tuple[MlpParams | None, np.ndarray]:
    """Reverse pass given the cached layer inputs from `forward_cached`.

    `upstream` holds d(loss)/d(output) rows; returns (param grads summed over
    the batch, d(loss)/d(input) rows).
    """
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    single = np.asarray(upstream).ndim == 1
    grads = zeros_like_params(params) if need_param_grads else None
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        h_in = inputs[i]
        if i != last:
            # ReLU mask of this layer's pre-activation output = its successor's input
            g = g * (inputs[i + 1] > 0.0)
        if need_param_grads:
            grads.weights[i][...] = h_in.T @ g
            grads.biases[i][...] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, (g[0] if single else g)


def mlp_backward(
    params: MlpParams, x: np.ndarray, upstream: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of (upstream . output) w.r.t. all parameters and the input."""
    x = _check_input(params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != ((params.out_dim,) if x.ndim == 1 else (x.shape[0], params.out_dim)):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} does not match output shape"
        )
    _, inputs = forward_cached(params, x)
    grads, input_grad = backward_cached(params, inputs, upstream)
    return grads, input_grad


def adam_step(
    state: AdamState, params: MlpParams, grads: MlpParams, lr: float
) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam update; returns new state and parameters."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry in Adam update")
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t

    def upd(m, v, p, g):
        m_new = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v_new = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        p_new = p - lr * (m_new / c1) / (np.sqrt(v_new / c2) + ADAM_EPS)
        return m_new, v_new, p_new

    new_state = AdamState([], [], [], [], step=t)
    new_params = MlpParams([], [])
    for m, v, p, g in zip(state.m_weights, state.v_weights, params.weights, grads.weights):
        m_new, v_new, p_new = upd(m, v, p, g)
        new_state.m_weights.append(m_new)
        new_state.v_weights.append(v_new)
        new_params.weights.append(p_new)
    for m, v, p, g in zip(state.m_biases, state.v_biases, params.biases, grads.biases):
        m_new, v_new, p_new = upd(m, v, p, g)
        new_state.m_biases.append(m_new)
        new_state.v_biases.append(v_new)
        new_params.biases.append(p_new)
    return new_state, new_params
