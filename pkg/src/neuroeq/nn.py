"""Small numpy neural-network engine.

Only what the equalizer and decoder need: 1-D "same" convolutions, dense
layers, ReLU/sigmoid, MSE and BCE losses, reverse-mode gradients through a
layer chain, Adam, and seeded Gaussian initialisation.

Tensors are plain ``numpy.ndarray`` objects (float64). Layers accept either
a single example or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
BCE_EPS = 1e-12


class ContractError(ValueError):
    """Shapes or values violate an operation's preconditions."""


class NumericError(FloatingPointError):
    """Non-finite values reached a layer."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    """Base class: holds ``weight``/``bias`` and their gradients."""

    weight: np.ndarray
    bias: np.ndarray

    def __init__(self) -> None:
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache: tuple | None = None

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    @property
    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    @property
    def activation(self) -> str:
        raise NotImplementedError

    def _activate(self, z: np.ndarray) -> np.ndarray:
        act = self.activation
        if act == "relu":
            return relu(z)
        if act == "sigmoid":
            return sigmoid(z)
        return z

    def _activation_grad(self, grad_out: np.ndarray, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        act = self.activation
        if act == "relu":
            # subgradient 0 at exactly 0
            return np.where(z > 0, grad_out, 0.0)
        if act == "sigmoid":
            return grad_out * y * (1.0 - y)
        return grad_out

    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)


class ConvLayer(Layer):
    """1-D convolution with zero "same" padding and optional ReLU.

    ``y[b, i, j] = act(sum_c sum_k W[i, c, k] * x_pad[b, c, j + k] + bias[i])``
    where ``x_pad`` carries ``(K - 1) / 2`` zeros on both ends, so the output
    length equals the input length.

    The public layout is (C, n) or (batch, C, n). Internally activations are
    kept channels-last, (batch, n, C), which is what :class:`Network` chains.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, relu: bool = True):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ContractError(f"kernel_size must be odd and positive, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ContractError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = (kernel_size - 1) // 2
        self.relu_enabled = relu
        self.weight = np.zeros((out_channels, in_channels, kernel_size))
        self.bias = np.zeros(out_channels)
        super().__init__()

    @property
    def activation(self) -> str:
        return "relu" if self.relu_enabled else "none"

    def _wmat(self) -> np.ndarray:
        # rows ordered (k, c) to match the column layout below
        return self.weight.transpose(2, 1, 0).reshape(-1, self.out_channels)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"expected input (batch, {self.in_channels}, n), got {x.shape if not squeeze else x.shape[1:]}"
            )
        y = self.forward_nlc(x.transpose(0, 2, 1)).transpose(0, 2, 1)
        return y[0] if squeeze else y

    def forward_nlc(self, x: np.ndarray) -> np.ndarray:
        b, n, c = x.shape
        if c != self.in_channels:
            raise ContractError(f"expected {self.in_channels} channels, got {c}")
        if n < 1:
            raise ContractError("input length must be >= 1")
        _check_finite(x, "conv input")
        k, p = self.kernel_size, self.padding
        xp = np.zeros((b, n + 2 * p, c))
        xp[:, p:p + n] = x
        cols = np.concatenate([xp[:, j:j + n] for j in range(k)], axis=2).reshape(b * n, k * c)
        z = (cols @ self._wmat() + self.bias).reshape(b, n, self.out_channels)
        y = self._activate(z)
        self._cache = (cols, z, y, x.shape)
        return y

    def backward(self, grad_out: np.ndarray, pre_activation: bool = False) -> np.ndarray:
        g = np.asarray(grad_out, dtype=float)
        squeeze = g.ndim == 2
        if squeeze:
            g = g[None]
        dx = self.backward_nlc(g.transpose(0, 2, 1), pre_activation).transpose(0, 2, 1)
        return dx[0] if squeeze else dx

    def backward_nlc(self, grad_out: np.ndarray, pre_activation: bool = False) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        cols, z, y, (b, n, c) = self._cache
        g = grad_out
        if g.shape != z.shape:
            raise ContractError(f"gradient shape {g.shape} does not match output {z.shape}")
        if not pre_activation:
            g = self._activation_grad(g, z, y)
        k, p, m = self.kernel_size, self.padding, self.out_channels
        gflat = g.reshape(-1, m)
        gw = cols.T @ gflat  # (k*c, m)
        self.grad_weight = gw.reshape(k, c, m).transpose(2, 1, 0).copy()
        self.grad_bias = gflat.sum(axis=0)
        dcols = (gflat @ self._wmat().T).reshape(b, n, k * c)
        dxp = np.zeros((b, n + 2 * p, c))
        for j in range(k):
            dxp[:, j:j + n] += dcols[:, :, j * c:(j + 1) * c]
        return dxp[:, p:p + n]


class DenseLayer(Layer):
    """Fully connected layer ``y = act(W x + b)``."""

    def __init__(self, in_width: int, out_width: int, activation: str = "relu"):
        if activation not in ("relu", "sigmoid", "none"):
            raise ContractError(f"unknown activation {activation!r}")
        if in_width < 1 or out_width < 1:
            raise ContractError("layer widths must be positive")
        self.in_width = in_width
        self.out_width = out_width
        self._activation = activation
        self.weight = np.zeros((out_width, in_width))
        self.bias = np.zeros(out_width)
        super().__init__()

    @property
    def activation(self) -> str:
        return self._activation

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ContractError(f"expected input width {self.in_width}, got shape {x.shape}")
        _check_finite(x, "dense input")
        z = x @ self.weight.T + self.bias
        y = self._activate(z)
        self._cache = (x, z, y, squeeze)
        return y[0] if squeeze else y

    def backward(self, grad_out: np.ndarray, pre_activation: bool = False) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        x, z, y, squeeze = self._cache
        g = np.asarray(grad_out, dtype=float)
        if squeeze:
            g = g[None]
        if g.shape != z.shape:
            raise ContractError(f"gradient shape {g.shape} does not match output {z.shape}")
        if not pre_activation:
            g = self._activation_grad(g, z, y)
        self.grad_weight = g.T @ x
        self.grad_bias = g.sum(axis=0)
        dx = g @ self.weight
        return dx[0] if squeeze else dx


@dataclass
class Network:
    """A chain of layers.

    ``kind`` is ``"cnn"`` or ``"dnn"``; ``structure`` is the layer-size list
    used to build it (kept for checkpoints and logs). ``iterations_trained``
    counts optimiser steps applied so far.
    """

    layers: list[Layer]
    kind: str = "dnn"
    structure: tuple[int, ...] = ()
    kernel_size: int = 0
    iterations_trained: int = 0
    _forward_done: bool = field(default=False, repr=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run all layers. CNN inputs of shape (n,) or (batch, n) get a channel axis."""
        x = np.asarray(x, dtype=float)
        self._in_ndim = x.ndim
        if self.kind == "cnn":
            # (n,) and (batch, n) are single-channel; (batch, C, n) passes through
            if x.ndim == 1:
                return self._run_cnn(x[None, :, None])[0, :, 0]
            if x.ndim == 2:
                return self._run_cnn(x[:, :, None])[:, :, 0]
            return self._run_cnn(x.transpose(0, 2, 1)).transpose(0, 2, 1)
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        return x

    def _run_cnn(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward_nlc(x)
        self._forward_done = True
        return x

    @property
    def logits(self) -> np.ndarray:
        """Pre-activation output of the last layer from the latest forward pass."""
        if not self._forward_done:
            raise StateError("no forward pass has been run")
        z = self.layers[-1]._cache[1]
        if self.kind == "cnn":
            return z[:, :, 0]
        return z

    def backward(self, grad_out: np.ndarray, pre_activation: bool = False) -> np.ndarray:
        """Backpropagate ``dL/d(output)``; returns ``dL/d(input)``.

        With ``pre_activation`` the gradient is taken w.r.t. the last layer's
        pre-activation (used by the fused sigmoid + BCE path).
        Parameter gradients are left on each layer, see :meth:`grads`.
        """
        if not self._forward_done:
            raise StateError("backward called before forward")
        g = np.asarray(grad_out, dtype=float)
        if self.kind != "cnn":
            for i, layer in enumerate(reversed(self.layers)):
                g = layer.backward(g, pre_activation=pre_activation and i == 0)
            return g
        last_z = self.layers[-1]._cache[1]
        if self._in_ndim == 3:
            g = g.transpose(0, 2, 1)
        g = g.reshape(last_z.shape)
        for i, layer in enumerate(reversed(self.layers)):
            g = layer.backward_nlc(g, pre_activation=pre_activation and i == 0)
        if self._in_ndim == 3:
            return g.transpose(0, 2, 1)
        return g[0, :, 0] if self._in_ndim == 1 else g[:, :, 0]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def param_names(self) -> list[str]:
        return [f"layer{i}.{n}" for i in range(len(self.layers)) for n in ("weight", "bias")]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def copy(self) -> "Network":
        import copy

        net = copy.deepcopy(self)
        for layer in net.layers:
            layer._cache = None
        net._forward_done = False
        return net


def conv1d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def backward(network: Network, loss_gradient: np.ndarray) -> list[np.ndarray]:
    """Gradients of every weight and bias, in ``network.params`` order."""
    network.backward(loss_gradient)
    return network.grads()


def param_count(network: Network) -> int:
    return network.param_count()


# -- losses -----------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, with its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> tuple[float, np.ndarray]:
    """Binary cross-entropy ``-mean(t log p + (1 - t) log(1 - p))`` and its gradient.

    ``pred`` must already lie in [0, 1]; it is clamped to ``[eps, 1 - eps]``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    if np.any(pred < 0.0) or np.any(pred > 1.0) or not np.all(np.isfinite(pred)):
        raise ContractError("BCE predictions must lie in [0, 1]")
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)) / n
    grad = (p - target) / (p * (1.0 - p) * n)
    return float(loss), grad


def bce_with_logits(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE of ``sigmoid(logits)``; gradient is w.r.t. the logits.

    Same value as ``bce_loss(sigmoid(z), t)`` away from saturation, but keeps
    a useful gradient when the sigmoid rounds to exactly 0 or 1.
    """
    z = np.asarray(logits, dtype=float)
    target = np.asarray(target, dtype=float)
    if z.shape != target.shape:
        raise ContractError(f"shape mismatch {z.shape} vs {target.shape}")
    n = z.size
    # log(1 + exp(-|z|)) formulation
    loss = np.sum(np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))) / n
    return float(loss), (sigmoid(z) - target) / n


# -- optimiser and initialisation --------------------------------------------


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(
        self,
        params: list[np.ndarray],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ContractError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def adam_step(state: Adam, grads: list[np.ndarray]) -> list[np.ndarray]:
    state.step(grads)
    return state.params


def init_weights(network: Network, seed: int, std: float | str = 1.0) -> Network:
    """Draw every weight and bias i.i.d. from a zero-mean Gaussian, in layer order.

    ``std`` is either a fixed standard deviation or ``"he"``: weights get
    std sqrt(2 / fan_in) (fan_in = C*K or in_width) and biases start at zero.
    """
    rng = np.random.default_rng(seed)
    for layer in network.layers:
        if std == "he":
            fan_in = layer.weight[0].size
            layer.weight[...] = np.sqrt(2.0 / fan_in) * rng.standard_normal(layer.weight.shape)
            layer.bias[...] = 0.0
        else:
            layer.weight[...] = std * rng.standard_normal(layer.weight.shape)
            layer.bias[...] = std * rng.standard_normal(layer.bias.shape)
    return network


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(network: Network, path: str | Path) -> None:
    """Write the plain-text checkpoint format.

    Header: ``neuroeq-checkpoint <version> <kind> <structure> <K> <iterations>``,
    then ``<name> <d1>x<d2>... <values...>`` per parameter. ``repr`` gives the
    shortest decimal that round-trips exactly.
    """
    structure = ",".join(str(s) for s in network.structure)
    lines = [
        f"neuroeq-checkpoint {CHECKPOINT_VERSION} {network.kind} {structure} "
        f"{network.kernel_size} {network.iterations_trained}"
    ]
    for name, p in zip(network.param_names(), network.params):
        shape = "x".join(str(d) for d in p.shape)
        values = " ".join(repr(float(v)) for v in p.ravel())
        lines.append(f"{name} {shape} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Network:
    from .models import NetworkSpec, build_network

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if len(head) < 5 or head[0] != "neuroeq-checkpoint":
        raise ContractError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {head[1]}")
    kind, structure, kernel = head[2], tuple(int(s) for s in head[3].split(",")), int(head[4])
    net = build_network(NetworkSpec(kind, structure, kernel or 3))
    net.iterations_trained = int(head[5]) if len(head) > 5 else 0
    params = dict(zip(net.param_names(), net.params))
    seen = set()
    for line in lines[1:]:
        if not line.strip():
            continue
        name, shape, *values = line.split()
        if name not in params:
            raise ContractError(f"{path}: unexpected parameter {name}")
        dims = tuple(int(d) for d in shape.split("x"))
        target = params[name]
        if dims != target.shape or len(values) != target.size:
            raise ContractError(f"{path}: shape mismatch for {name}")
        target[...] = np.array([float(v) for v in values]).reshape(dims)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ContractError(f"{path}: missing parameters {sorted(missing)}")
    return net
