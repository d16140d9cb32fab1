"""Dense networks over flat parameter vectors, with losses and an optimizer.

Networks are pure functions of `(spec, params, input)`.  Parameters live in
one flat float array whose layout is derived from the spec, so checkpoints
are a single contiguous block and optimizers never need to know about
layers.  Every forward pass exists twice: a plain-numpy fast path for
inference, and a taped path (see `tensor.py`) for gradients.

Heads:
  linear         raw last-layer output
  gaussian_diag  first half mean, second half log-variance (soft-clamped)
  sigmoid_scalar single probability, logit squashed to +-DISC_LOGIT_LIMIT
                 before the sigmoid so it is always strictly inside (0, 1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

# Log-variance bounds for gaussian_diag heads, sized for unit-normalized
# targets.  Soft (softplus) squashing keeps the head differentiable
# everywhere.  The floor matters: once a near-deterministic output dimension
# collapses, its inverse-variance mean-gradient scales like exp(-floor) and
# can hijack the shared trunk from the other dimensions; -6 caps that
# amplification while still allowing stds down to 5% of a unit target.
# The cap stops the opposite dodge, hiding a poorly fit mean behind
# inflated variance (conditional variance never needs to exceed the
# marginal, which is 1 after normalization).
LOGVAR_MIN = -6.0
LOGVAR_MAX = 0.5

# Discriminator logits are squashed to this range before the sigmoid, so
# probabilities stay strictly inside (sigmoid(-15), sigmoid(15)).
DISC_LOGIT_LIMIT = 15.0

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "gaussian_diag", "sigmoid_scalar")


class NetError(ValueError):
    """Bad network specification or mismatched shapes."""


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a dense net: widths, hidden activations, output head.

    `layer_widths` includes the input width and the raw output width, so a
    2-hidden-layer net looks like (d_in, h1, h2, d_out).  `activation` is
    one name per hidden layer; passing a single string applies it to all.
    """

    layer_widths: tuple[int, ...]
    activation: tuple[str, ...] = ("tanh",)
    output_head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise NetError(f"need at least one hidden layer, got widths {widths}")
        if any(w < 1 for w in widths):
            raise NetError(f"layer widths must be >= 1, got {widths}")
        act = self.activation
        if isinstance(act, str):
            act = (act,) * (len(widths) - 2)
        else:
            act = tuple(act)
            if len(act) == 1:
                act = act * (len(widths) - 2)
        object.__setattr__(self, "activation", act)
        if len(act) != len(widths) - 2:
            raise NetError(f"{len(widths) - 2} hidden layers but {len(act)} activations")
        for a in act:
            if a not in ACTIVATIONS:
                raise NetError(f"unknown activation {a!r}")
        if self.output_head not in HEADS:
            raise NetError(f"unknown output head {self.output_head!r}")
        if self.output_head == "gaussian_diag" and widths[-1] % 2 != 0:
            raise NetError(f"gaussian_diag head needs an even output width, got {widths[-1]}")
        if self.output_head == "sigmoid_scalar" and widths[-1] != 1:
            raise NetError(f"sigmoid_scalar head needs output width 1, got {widths[-1]}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class ParamLayout:
    """Index ranges of each weight matrix / bias vector in the flat vector."""

    entries: tuple[tuple[str, int, tuple[int, ...]], ...]  # (name, offset, shape)
    total: int

    @classmethod
    def for_spec(cls, spec: NetSpec) -> "ParamLayout":
        entries = []
        off = 0
        widths = spec.layer_widths
        for i in range(len(widths) - 1):
            w_shape = (widths[i], widths[i + 1])
            entries.append((f"W{i}", off, w_shape))
            off += w_shape[0] * w_shape[1]
            entries.append((f"b{i}", off, (widths[i + 1],)))
            off += widths[i + 1]
        return cls(tuple(entries), off)

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        for n, off, shape in self.entries:
            if n == name:
                return params[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)


def validate_params(layout: ParamLayout, params: np.ndarray) -> None:
    if params.ndim != 1 or params.shape[0] != layout.total:
        raise NetError(f"parameter vector has length {params.shape}, layout expects {layout.total}")
    if not np.all(np.isfinite(params)):
        raise NetError("parameter vector contains non-finite entries")


@dataclass
class GaussianOutput:
    """Diagonal-Gaussian head output: mean and clamped log-variance."""

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.log_variance = np.asarray(self.log_variance)
        if self.mean.shape != self.log_variance.shape:
            raise NetError("mean and log_variance must have the same shape")

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance)


class DenseNet:
    """A NetSpec bound to its parameter layout, with fast and taped passes."""

    def __init__(self, spec: NetSpec):
        self.spec = spec
        self.layout = ParamLayout.for_spec(spec)

    @property
    def n_params(self) -> int:
        return self.layout.total

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
        """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        params = np.empty(self.layout.total, dtype=dtype)
        widths = self.spec.layer_widths
        for name, off, shape in self.layout.entries:
            fan_in = widths[int(name[1:])]
            bound = 1.0 / math.sqrt(fan_in)
            size = int(np.prod(shape))
            params[off:off + size] = rng.uniform(-bound, bound, size=size).astype(dtype)
        return params

    # -- raw passes (pre-head last-layer output) ---------------------------

    def raw_np(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.spec.in_width:
            raise NetError(f"input width {x.shape[-1]} does not match layer 0 width {self.spec.in_width}")
        h = x
        n_layers = len(self.spec.layer_widths) - 1
        for i in range(n_layers):
            h = h @ self.layout.view(params, f"W{i}") + self.layout.view(params, f"b{i}")
            if i < n_layers - 1:
                h = np.tanh(h) if self.spec.activation[i] == "tanh" else np.maximum(h, 0.0)
        return h

    def raw_t(self, params, x) -> Tensor:
        """Taped pass.  `params` may be a Tensor (trainable) or ndarray (frozen);
        `x` likewise, so gradients can flow into inputs of frozen nets."""
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xd.shape[-1] != self.spec.in_width:
            raise NetError(f"input width {xd.shape[-1]} does not match layer 0 width {self.spec.in_width}")
        trainable = isinstance(params, Tensor)
        h = x if isinstance(x, Tensor) else Tensor(xd)
        n_layers = len(self.spec.layer_widths) - 1
        for i in range(n_layers):
            if trainable:
                w_name, b_name = f"W{i}", f"b{i}"
                _, w_off, w_shape = next(e for e in self.layout.entries if e[0] == w_name)
                _, b_off, b_shape = next(e for e in self.layout.entries if e[0] == b_name)
                W = _reshape_slice(params, w_off, w_shape)
                b = _reshape_slice(params, b_off, b_shape)
            else:
                W = self.layout.view(params, f"W{i}")
                b = self.layout.view(params, f"b{i}")
            h = T.add(T.matmul(h, W), b)
            if i < n_layers - 1:
                h = T.tanh(h) if self.spec.activation[i] == "tanh" else T.relu(h)
        return h


def _reshape_slice(flat: Tensor, off: int, shape: tuple[int, ...]) -> Tensor:
    size = int(np.prod(shape))
    sliced = T.slice_cols(flat, off, off + size)
    out = Tensor(sliced.data.reshape(shape), (sliced,))

    def bwd(g):
        sliced._acc(g.reshape(sliced.data.shape))

    out._bwd = bwd
    return out


# -- heads -----------------------------------------------------------------


def clamp_logvar_np(raw: np.ndarray) -> np.ndarray:
    upper = LOGVAR_MAX - np.logaddexp(0.0, LOGVAR_MAX - raw)
    return LOGVAR_MIN + np.logaddexp(0.0, upper - LOGVAR_MIN)


def clamp_logvar_t(raw: Tensor) -> Tensor:
    upper = T.sub(LOGVAR_MAX, T.softplus(T.sub(LOGVAR_MAX, raw)))
    return T.add(LOGVAR_MIN, T.softplus(T.sub(upper, LOGVAR_MIN)))


def clamp_logit_np(raw: np.ndarray) -> np.ndarray:
    return DISC_LOGIT_LIMIT * np.tanh(raw / DISC_LOGIT_LIMIT)


def clamp_logit_t(raw: Tensor) -> Tensor:
    return T.mul(T.tanh(T.mul(raw, 1.0 / DISC_LOGIT_LIMIT)), DISC_LOGIT_LIMIT)


def gaussian_head_np(raw: np.ndarray) -> GaussianOutput:
    half = raw.shape[-1] // 2
    return GaussianOutput(raw[..., :half], clamp_logvar_np(raw[..., half:]))


def gaussian_head_t(raw: Tensor) -> tuple[Tensor, Tensor]:
    half = raw.data.shape[-1] // 2
    return T.slice_cols(raw, 0, half), clamp_logvar_t(T.slice_cols(raw, half, 2 * half))


def sigmoid_head_np(raw: np.ndarray) -> np.ndarray:
    z = clamp_logit_np(raw)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sigmoid_head_t(raw: Tensor) -> Tensor:
    return T.sigmoid(clamp_logit_t(raw))


def forward(net: DenseNet, params: np.ndarray, x: np.ndarray):
    """Run the net on one input vector (or a batch) and apply its head.

    Returns an ndarray for a linear head, a `GaussianOutput` for a
    gaussian_diag head, or a probability (scalar for single inputs) for a
    sigmoid_scalar head.
    """
    validate_params(net.layout, params)
    raw = net.raw_np(params, x)
    head = net.spec.output_head
    if head == "linear":
        return raw
    if head == "gaussian_diag":
        return gaussian_head_np(raw)
    p = sigmoid_head_np(raw)
    return float(p.reshape(-1)[0]) if np.asarray(x).ndim == 1 else p


# -- losses ----------------------------------------------------------------


def gaussian_nll(out: GaussianOutput, target: np.ndarray) -> float:
    """Negative log-density of `target` under the diagonal Gaussian, summed
    over dimensions."""
    target = np.asarray(target)
    if target.shape != out.mean.shape:
        raise NetError(f"target shape {target.shape} does not match mean shape {out.mean.shape}")
    if not (np.all(np.isfinite(out.mean)) and np.all(np.isfinite(out.log_variance)) and np.all(np.isfinite(target))):
        raise NetError("gaussian_nll requires finite inputs")
    resid = target - out.mean
    return float(np.sum(0.5 * (LOG_2PI + out.log_variance + resid * resid * np.exp(-out.log_variance))))


def gaussian_nll_rows_t(mean: Tensor, logvar: Tensor, target: np.ndarray) -> Tensor:
    """Per-row NLL (summed over dims) as a (batch, 1) tensor."""
    resid = T.sub(target, mean)
    quad = T.mul(T.square(resid), T.exp(T.neg(logvar)))
    return T.mul(T.sum_rows(T.add(T.add(logvar, quad), LOG_2PI)), 0.5)


def bce_real_term(d: float) -> float:
    """log d: the objective credit for calling a real sample real."""
    if not 0.0 < d < 1.0:
        raise NetError(f"probability must be in (0,1), got {d}")
    return math.log(d)


def bce_fake_term(d: float) -> float:
    """log(1 - d): the objective credit for calling a generated sample fake."""
    if not 0.0 < d < 1.0:
        raise NetError(f"probability must be in (0,1), got {d}")
    return math.log1p(-d)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected adaptive-moment optimizer state for one flat vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, learning_rate: float, dtype=np.float32, **kw) -> "AdamState":
        if learning_rate <= 0:
            raise NetError(f"learning rate must be positive, got {learning_rate}")
        return cls(np.zeros(n_params, dtype=dtype), np.zeros(n_params, dtype=dtype), 0, learning_rate, **kw)


def adam_step(params: np.ndarray, gradient: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected moment update; returns new params and state."""
    if params.shape != gradient.shape or params.shape != state.first_moment.shape:
        raise NetError("params / gradient / moment shapes do not match")
    if not np.all(np.isfinite(gradient)):
        raise NetError("non-finite gradient: run aborted")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient * gradient
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return new_params.astype(params.dtype, copy=False), new_state


# -- gradient verification ---------------------------------------------------


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(loss_fn, params: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar loss, one coordinate at a time."""
    params = params.astype(np.float64, copy=True)
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = loss_fn(params)
        params[i] = orig - step
        down = loss_fn(params)
        params[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def grad_check(loss_builder, params: np.ndarray, step: float = 1e-5) -> float:
    """Compare taped gradients of `loss_builder` against central differences.

    `loss_builder(p)` must accept either a Tensor (returns a scalar loss
    Tensor) or an ndarray (returns the same loss as a plain computation),
    and must be deterministic.  Runs in float64.  Returns the max relative
    error over all parameters.
    """
    if step <= 0:
        raise NetError("finite-difference step must be positive")
    p64 = params.astype(np.float64)
    leaf = Tensor(p64)
    loss = loss_builder(leaf)
    T.backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(p64)

    def scalar_loss(p):
        out = loss_builder(p)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    return max_relative_error(analytic, numeric_gradient(scalar_loss, p64, step))
