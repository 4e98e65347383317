"""Neural building blocks with hand-derived reverse-mode gradients.

Layers cache what their adjoint needs during ``forward`` and accumulate
parameter gradients during ``backward``.  Everything is float64 numpy; the
finite-difference checker ``grad_check`` validates every adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "softplus", "identity")


class ShapeError(ValueError):
    """Input incompatible with a layer's parameter shapes."""


class GradientError(RuntimeError):
    """Non-finite gradients or backward called before forward."""


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return softplus(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "softplus":
        return expit(z)
    return np.ones_like(z)


class Layer:
    """Base: parameterless pass-through bookkeeping."""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def param_names(self) -> list[str]:
        return []

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0.0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DenseLayer(Layer):
    """Fully connected layer y = phi(x W^T + b)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError("dense layer needs weights [out, in] and bias [out]")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("non-finite dense parameters")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.grad_weights = np.zeros_like(weights)
        self.grad_bias = np.zeros_like(bias)
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def param_names(self):
        return ["weights", "bias"]

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeError(f"dense input width {x.shape[1]} != {self.n_in}")
        z = x @ self.weights.T + self.bias
        self._cache = (x, z)
        y = _apply_activation(self.activation, z)
        return y[0] if squeeze else y

    def backward(self, d_out):
        if self._cache is None:
            raise GradientError("backward before forward")
        x, z = self._cache
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        dz = d_out * _activation_grad(self.activation, z)
        self.grad_weights += dz.T @ x
        self.grad_bias += dz.sum(axis=0)
        return dz @ self.weights


class Conv2DLayer(Layer):
    """Valid (no-padding) cross-correlation, stride 1, square kernel."""

    def __init__(self, kernels: np.ndarray, bias: np.ndarray):
        kernels = np.asarray(kernels, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
            raise ShapeError("kernels must be [out_ch, in_ch, k, k]")
        if bias.shape != (kernels.shape[0],):
            raise ShapeError("bias must be [out_ch]")
        self.kernels = kernels
        self.bias = bias
        self.grad_kernels = np.zeros_like(kernels)
        self.grad_bias = np.zeros_like(bias)
        self._cache = None

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    def params(self):
        return [self.kernels, self.bias]

    def grads(self):
        return [self.grad_kernels, self.grad_bias]

    def param_names(self):
        return ["kernels", "bias"]

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.kernels.shape[1]:
            raise ShapeError("conv input must be [batch, in_ch, h, w]")
        k = self.kernel_size
        h_out, w_out = x.shape[2] - k + 1, x.shape[3] - k + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} smaller than kernel {k}")
        out = np.broadcast_to(
            self.bias[None, :, None, None], (x.shape[0], self.kernels.shape[0], h_out, w_out)
        ).copy()
        for dy in range(k):
            for dx in range(k):
                out += np.einsum(
                    "oi,bihw->bohw",
                    self.kernels[:, :, dy, dx],
                    x[:, :, dy : dy + h_out, dx : dx + w_out],
                    optimize=True,
                )
        self._cache = (x, h_out, w_out)
        return out

    def backward(self, d_out):
        if self._cache is None:
            raise GradientError("backward before forward")
        x, h_out, w_out = self._cache
        k = self.kernel_size
        d_x = np.zeros_like(x)
        for dy in range(k):
            for dx in range(k):
                x_slice = x[:, :, dy : dy + h_out, dx : dx + w_out]
                self.grad_kernels[:, :, dy, dx] += np.einsum(
                    "bohw,bihw->oi", d_out, x_slice, optimize=True
                )
                d_x[:, :, dy : dy + h_out, dx : dx + w_out] += np.einsum(
                    "oi,bohw->bihw", self.kernels[:, :, dy, dx], d_out, optimize=True
                )
        self.grad_bias += d_out.sum(axis=(0, 2, 3))
        return d_x


class BatchNormLayer(Layer):
    """Per-channel batch normalization with an affine head.

    Accepts [batch, channels] or [batch, channels, h, w]; in train mode
    normalizes by biased batch statistics and updates the running stats with
    ``running = (1 - momentum) * running + momentum * batch``.
    """

    def __init__(self, n_channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0 or not 0.0 < momentum < 1.0:
            raise ValueError("need eps > 0 and momentum in (0, 1)")
        self.gamma = np.ones(n_channels)
        self.beta = np.zeros(n_channels)
        self.running_mean = np.zeros(n_channels)
        self.running_var = np.ones(n_channels)
        self.eps = eps
        self.momentum = momentum
        self.grad_gamma = np.zeros(n_channels)
        self.grad_beta = np.zeros(n_channels)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.grad_gamma, self.grad_beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def param_names(self):
        return ["gamma", "beta"]

    @staticmethod
    def _channel_shape(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"batchnorm expects rank 2 or 4 input, got rank {x.ndim}")

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        axes, bshape = self._channel_shape(x)
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"channel count {x.shape[1]} != {self.gamma.shape[0]}")
        gamma = self.gamma.reshape(bshape)
        beta = self.beta.reshape(bshape)
        if train:
            if x.shape[0] < 2:
                raise ShapeError("train-mode batchnorm needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
            self._cache = (x_hat, inv_std, axes, bshape, True)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
            self._cache = (x_hat, inv_std, axes, bshape, False)
        return gamma * x_hat + beta

    def backward(self, d_out):
        if self._cache is None:
            raise GradientError("backward before forward")
        x_hat, inv_std, axes, bshape, trained = self._cache
        self.grad_gamma += (d_out * x_hat).sum(axis=axes)
        self.grad_beta += d_out.sum(axis=axes)
        d_hat = d_out * self.gamma.reshape(bshape)
        if not trained:
            return d_hat * inv_std.reshape(bshape)
        n = d_out.size // d_out.shape[1] if d_out.ndim == 4 else d_out.shape[0]
        sum_d = d_hat.sum(axis=axes).reshape(bshape)
        sum_dx = (d_hat * x_hat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / n) * (n * d_hat - sum_d - x_hat * sum_dx)


class ActivationLayer(Layer):
    """Standalone nonlinearity (follows batchnorm stages)."""

    def __init__(self, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self._z = None

    def forward(self, x, train=False):
        self._z = x
        return _apply_activation(self.activation, x)

    def backward(self, d_out):
        if self._z is None:
            raise GradientError("backward before forward")
        return d_out * _activation_grad(self.activation, self._z)


class ReluLayer(ActivationLayer):
    def __init__(self):
        super().__init__("relu")


class ReplicateChannels(Layer):
    """Copy a single-channel image across ``n_channels`` identical channels."""

    def __init__(self, n_channels: int):
        if n_channels < 1:
            raise ValueError("need at least one channel")
        self.n_channels = n_channels

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError("replication expects [batch, 1, h, w]")
        return np.repeat(x, self.n_channels, axis=1)

    def backward(self, d_out):
        return d_out.sum(axis=1, keepdims=True)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, d_out):
        if self._shape is None:
            raise GradientError("backward before forward")
        return d_out.reshape(self._shape)


class Stack(Layer):
    """Sequential composition of layers."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def param_names(self):
        return [
            f"{i}.{type(layer).__name__}.{name}"
            for i, layer in enumerate(self.layers)
            for name in layer.param_names()
        ]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, d_out):
        for layer in reversed(self.layers):
            d_out = layer.backward(d_out)
        return d_out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2 (pred - target) / N."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse of empty arrays")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# initialization

def init_dense(rng: np.random.Generator, n_in: int, n_out: int, activation: str) -> DenseLayer:
    """He-uniform fan-in bound for relu layers, Glorot-uniform otherwise."""
    if activation == "relu":
        bound = np.sqrt(6.0 / n_in)
    else:
        bound = np.sqrt(6.0 / (n_in + n_out))
    weights = rng.uniform(-bound, bound, size=(n_out, n_in))
    return DenseLayer(weights, np.zeros(n_out), activation)


def init_conv(
    rng: np.random.Generator, in_ch: int, out_ch: int, k: int, relu_after: bool = True
) -> Conv2DLayer:
    fan_in = in_ch * k * k
    if relu_after:
        bound = np.sqrt(6.0 / fan_in)
    else:
        bound = np.sqrt(6.0 / (fan_in + out_ch * k * k))
    kernels = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
    return Conv2DLayer(kernels, np.zeros(out_ch))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(
    params: list[np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeError("parameter / gradient / state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient at parameter {i} (step {state.t})")
        state.m[i] *= state.beta1
        state.m[i] += (1.0 - state.beta1) * g
        state.v[i] *= state.beta2
        state.v[i] += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


class LossModel:
    """A layer stack with an MSE head; the object grad_check understands."""

    def __init__(self, stack: Stack, train_mode: bool = False):
        self.stack = stack
        self.train_mode = train_mode

    def parameters(self):
        return self.stack.params()

    def parameter_names(self):
        return self.stack.param_names()

    def loss_value(self, inputs, targets) -> float:
        pred = self.stack.forward(inputs, train=self.train_mode)
        loss, _ = mse_loss(pred, targets)
        return loss

    def loss_and_grads(self, inputs, targets):
        self.stack.zero_grads()
        pred = self.stack.forward(inputs, train=self.train_mode)
        loss, d_pred = mse_loss(pred, targets)
        self.stack.backward(d_pred)
        return loss, [g.copy() for g in self.stack.grads()]


def grad_check(model, inputs, targets, step: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The probe step is scaled per entry as ``step * max(1, |theta|)`` and the
    reported error is |analytic - fd| / max(1, |analytic|, |fd|), so O(1)
    parameters and gradients are judged relatively and tiny ones absolutely.
    """
    params = model.parameters()
    names = model.parameter_names()
    if sum(p.size for p in params) >= 100_000:
        raise ValueError("grad_check is O(parameters) forwards; model too large")
    _, analytic = model.loss_and_grads(inputs, targets)
    entries = []
    for p, g, name in zip(params, analytic, names):
        worst = 0.0
        flat = p.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            loss_plus = model.loss_value(inputs, targets)
            flat[i] = orig - h
            loss_minus = model.loss_value(inputs, targets)
            flat[i] = orig
            fd = (loss_plus - loss_minus) / (2.0 * h)
            rel = abs(fd - g_flat[i]) / max(1.0, abs(fd), abs(g_flat[i]))
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst))
    return GradCheckReport(entries)
