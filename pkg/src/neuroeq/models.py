"""CNN equalizer and dense polar decoder (NND): construction, training, inference."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelSpec, SnrPoint, bpsk_modulate, sigma_from_snr, transmit
from .montecarlo import System
from .nn import (
    Adam,
    ContractError,
    ConvLayer,
    DenseLayer,
    Network,
    NumericError,
    bce_with_logits,
    init_weights,
    mse_loss,
    sigmoid,
)
from .polar import PolarCode, polar_encode, sc_decode

log = logging.getLogger(__name__)

PAPER_CNN = (6, 12, 24, 12, 6, 1)
PAPER_DNN = (16, 128, 64, 32, 8)
EQUALIZE_BLOCK = 512


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    layer_sizes: tuple[int, ...]
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.kind not in ("cnn", "dnn"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ValueError("layer sizes must be positive")
        if self.kind == "cnn":
            if self.layer_sizes[-1] != 1:
                raise ValueError("the last CNN layer must have exactly one filter")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError("kernel size must be odd")
        elif len(self.layer_sizes) < 2:
            raise ValueError("a dense network needs input and output widths")

    @classmethod
    def parse(cls, kind: str, text: str, kernel_size: int = 3) -> "NetworkSpec":
        """Accepts ``"6,12,24,12,6,1"`` or ``"{6, 12, 24, 12, 6, 1}"``."""
        sizes = [s for s in text.strip().strip("{}").replace(" ", "").split(",") if s]
        return cls(kind, tuple(int(s) for s in sizes), kernel_size)

    def label(self) -> str:
        return "{" + ",".join(str(s) for s in self.layer_sizes) + "}"


def build_cnn_equalizer(spec: NetworkSpec) -> Network:
    """Conv stack with one input channel; ReLU on every layer but the last."""
    if spec.kind != "cnn":
        raise ValueError("build_cnn_equalizer needs a cnn spec")
    layers = []
    c = 1
    for i, m in enumerate(spec.layer_sizes):
        layers.append(ConvLayer(c, m, spec.kernel_size, relu=i < len(spec.layer_sizes) - 1))
        c = m
    return Network(layers, "cnn", spec.layer_sizes, spec.kernel_size)


def build_nnd(spec: NetworkSpec) -> Network:
    """Dense layers; ReLU on hidden layers, sigmoid on the output."""
    if spec.kind != "dnn":
        raise ValueError("build_nnd needs a dnn spec")
    sizes = spec.layer_sizes
    layers = [
        DenseLayer(a, b, "sigmoid" if i == len(sizes) - 2 else "relu")
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
    ]
    return Network(layers, "dnn", sizes, 0)


def build_network(spec: NetworkSpec) -> Network:
    return build_cnn_equalizer(spec) if spec.kind == "cnn" else build_nnd(spec)


@dataclass(frozen=True)
class TrainingConfig:
    """Mini-batch schedule.

    Every iteration draws ``frames_per_snr`` fresh frames at each SNR of
    ``snr_grid``. ``coded`` frames are polar codewords of random messages;
    otherwise ``frame_len`` random bits. ``tail`` keeps the L - 1 samples of
    the convolution tail at the receiver; ``random_history`` puts random
    symbols in the channel memory before each frame instead of zeros.
    """

    snr_grid: tuple[float, ...] = tuple(float(s) for s in range(12))
    frames_per_snr: int = 20
    batch_size: int = 240
    iterations: int = 5000
    learning_rate: float = 0.001
    seed: int = 0
    frame_info_bits: int = 8
    convention: str = "es_n0"
    coded: bool = True
    frame_len: int = 16
    tail: bool = True
    random_history: bool = False
    init_std: float | str = "he"
    code: PolarCode = field(default_factory=PolarCode)

    def __post_init__(self):
        object.__setattr__(self, "snr_grid", tuple(float(s) for s in self.snr_grid))
        if self.batch_size != self.frames_per_snr * len(self.snr_grid):
            raise ValueError(
                f"batch_size {self.batch_size} != frames_per_snr {self.frames_per_snr} x {len(self.snr_grid)} SNRs"
            )
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.code.k != self.frame_info_bits:
            raise ValueError("frame_info_bits must equal the code dimension K")

    def with_grid(self, grid, **changes) -> "TrainingConfig":
        grid = tuple(float(s) for s in grid)
        fps = changes.pop("frames_per_snr", self.frames_per_snr)
        return replace(self, snr_grid=grid, frames_per_snr=fps, batch_size=fps * len(grid), **changes)

    @property
    def rate(self) -> float:
        return self.code.rate if self.coded else 1.0

    def sigmas(self) -> np.ndarray:
        return np.array([sigma_from_snr(SnrPoint(s, self.convention, self.rate)) for s in self.snr_grid])


@dataclass
class Batch:
    received: np.ndarray  # (B, n + tail)
    symbols: np.ndarray  # (B, n) transmitted BPSK symbols
    messages: np.ndarray | None  # (B, K) for coded frames
    sigma: np.ndarray  # (B,)


def make_batch(config: TrainingConfig, channel: ChannelSpec, rng: np.random.Generator) -> Batch:
    """One training mini-batch: ``frames_per_snr`` frames at every grid SNR."""
    B = config.batch_size
    if config.coded:
        msg = rng.integers(0, 2, size=(B, config.code.k), dtype=np.int8)
        bits = polar_encode(config.code, msg)
    else:
        msg = None
        bits = rng.integers(0, 2, size=(B, config.frame_len), dtype=np.int8)
    history = None
    if config.random_history:
        history = rng.integers(0, 2, size=(B, len(channel.taps) - 1), dtype=np.int8)
    clean = transmit(bits, channel.with_sigma(0.0), tail=config.tail, history=history)
    sigma = np.repeat(config.sigmas(), config.frames_per_snr)
    received = clean + sigma[:, None] * rng.standard_normal(clean.shape)
    return Batch(received, bpsk_modulate(bits), msg, sigma)


def _data_rng(seed: int, stream: int) -> np.random.Generator:
    # separate from the weight-init stream so both stay reproducible on their own
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def _checked(loss: float, it: int, losses: list[float]) -> None:
    if not np.isfinite(loss):
        raise TrainingError("loss diverged", it)
    losses.append(loss)


@contextmanager
def _diverges_at(it: int):
    # non-finite activations mid-step mean the run has blown up
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except NumericError as e:
        raise TrainingError(f"training diverged: {e}", it) from e


def equalize(cnn: Network, received, block: int | None = EQUALIZE_BLOCK) -> np.ndarray:
    """Soft symbol estimates; output length equals input length.

    Sequences longer than ``block`` are processed in blocks that overlap by the
    network's receptive-field halo, so the result equals one full forward pass
    while the working set stays cache-sized (time and memory linear in n).
    """
    r = np.asarray(received, dtype=float)
    n = r.shape[-1]
    if block is None or n <= block:
        return cnn.forward(r)
    halo = sum((layer.kernel_size - 1) // 2 for layer in cnn.layers)
    out = np.empty(r.shape)
    for start in range(0, n, block):
        stop = min(start + block, n)
        lo, hi = max(0, start - halo), min(n, stop + halo)
        out[..., start:stop] = cnn.forward(r[..., lo:hi])[..., start - lo : stop - lo]
    return out


def cnn_step(cnn: Network, batch: Batch) -> tuple[float, np.ndarray]:
    """Forward + MSE on the frame symbols; returns (loss, dL/d(cnn output))."""
    out = cnn.forward(batch.received)
    n = batch.symbols.shape[1]
    loss, g = mse_loss(out[:, :n], batch.symbols)
    grad = np.zeros_like(out)
    grad[:, :n] = g
    return loss, grad


def train_cnn_equalizer(
    config: TrainingConfig,
    channel_spec: ChannelSpec,
    spec: NetworkSpec | None = None,
    network: Network | None = None,
    log_every: int = 0,
) -> tuple[Network, list[float]]:
    """Minimise MSE between CNN output and transmitted symbols with Adam."""
    if network is None:
        network = init_weights(build_cnn_equalizer(spec or NetworkSpec("cnn", PAPER_CNN)), config.seed, config.init_std)
    rng = _data_rng(config.seed, 1)
    opt = Adam(network.params, config.learning_rate)
    losses: list[float] = []
    for it in range(config.iterations):
        batch = make_batch(config, channel_spec, rng)
        with _diverges_at(it):
            loss, grad = cnn_step(network, batch)
            _checked(loss, it, losses)
            network.backward(grad)
        opt.step(network.grads())
        network.iterations_trained += 1
        if log_every and (it + 1) % log_every == 0:
            log.info("cnn iter %d loss %.5f", it + 1, np.mean(losses[-log_every:]))
    return network, losses


def nnd_step(nnd: Network, inputs: np.ndarray, messages: np.ndarray) -> tuple[float, np.ndarray]:
    """Forward + BCE from logits; returns (loss, dL/d(nnd input)) after backprop."""
    nnd.forward(inputs)
    loss, g = bce_with_logits(nnd.logits, messages)
    return loss, nnd.backward(g, pre_activation=True)


def train_nnd_awgn(
    config: TrainingConfig,
    spec: NetworkSpec | None = None,
    network: Network | None = None,
    log_every: int = 0,
) -> tuple[Network, list[float]]:
    """Train the decoder on BPSK codewords over plain AWGN (no ISI)."""
    if not config.coded:
        raise ValueError("the decoder trains on coded frames")
    if network is None:
        network = init_weights(build_nnd(spec or NetworkSpec("dnn", PAPER_DNN)), config.seed + 1, config.init_std)
    awgn = ChannelSpec((1.0,), "identity", 0.0)
    cfg = replace(config, tail=False, random_history=False)
    rng = _data_rng(config.seed, 2)
    opt = Adam(network.params, config.learning_rate)
    losses: list[float] = []
    for it in range(config.iterations):
        batch = make_batch(cfg, awgn, rng)
        with _diverges_at(it):
            loss, _ = nnd_step(network, batch.received, batch.messages)
            _checked(loss, it, losses)
        opt.step(network.grads())
        network.iterations_trained += 1
        if log_every and (it + 1) % log_every == 0:
            log.info("nnd iter %d loss %.5f", it + 1, np.mean(losses[-log_every:]))
    return network, losses


@dataclass
class JointResult:
    cnn: Network
    nnd: Network
    total: list[float]
    mse: list[float]
    bce: list[float]


def joint_loss(cnn: Network, nnd: Network, batch: Batch) -> tuple[float, float, float]:
    """(total, mse part, bce part) for one batch; leaves gradients on both networks."""
    out = cnn.forward(batch.received)
    n = batch.symbols.shape[1]
    mse, g = mse_loss(out[:, :n], batch.symbols)
    g_cnn = np.zeros_like(out)
    g_cnn[:, :n] = g
    bce, g_soft = nnd_step(nnd, out[:, :n], batch.messages)
    g_cnn[:, :n] += g_soft
    cnn.backward(g_cnn)
    return mse + bce, mse, bce


def joint_finetune(
    cnn: Network,
    nnd: Network,
    config: TrainingConfig,
    channel_spec: ChannelSpec,
    *,
    iterations: int = 2000,
    learning_rate: float = 0.0005,
    freeze_cnn: bool = False,
    log_every: int = 0,
) -> JointResult:
    """End-to-end fine-tuning on MSE(cnn) + BCE(nnd); returns copies of both networks."""
    if not config.coded:
        raise ValueError("joint fine-tuning needs coded frames")
    cnn, nnd = cnn.copy(), nnd.copy()
    rng = _data_rng(config.seed, 3)
    opt_nnd = Adam(nnd.params, learning_rate)
    opt_cnn = None if freeze_cnn else Adam(cnn.params, learning_rate)
    res = JointResult(cnn, nnd, [], [], [])
    for it in range(iterations):
        batch = make_batch(config, channel_spec, rng)
        with _diverges_at(it):
            total, mse, bce = joint_loss(cnn, nnd, batch)
            _checked(total, it, res.total)
        res.mse.append(mse)
        res.bce.append(bce)
        opt_nnd.step(nnd.grads())
        nnd.iterations_trained += 1
        if opt_cnn is not None:
            opt_cnn.step(cnn.grads())
            cnn.iterations_trained += 1
        if log_every and (it + 1) % log_every == 0:
            log.info("joint iter %d loss %.5f", it + 1, np.mean(res.total[-log_every:]))
    return res


def nnd_probabilities(nnd: Network, soft) -> np.ndarray:
    x = np.asarray(soft, dtype=float)
    width = nnd.layers[0].in_width
    if x.shape[-1] != width:
        raise ContractError(f"decoder expects {width} inputs, got {x.shape[-1]}")
    nnd.forward(x)
    z = nnd.logits
    return sigmoid(z[0] if x.ndim == 1 else z)


def decode_nnd(nnd: Network, soft) -> np.ndarray:
    """Hard message bits: 1 where the output probability is >= 0.5."""
    return (nnd_probabilities(nnd, soft) >= 0.5).astype(np.int8)


# -- systems for Monte-Carlo evaluation ----------------------------------------


class CnnDetector(System):
    """Sign of the CNN output (bit 1 for negative), scored on channel bits."""

    def __init__(self, cnn: Network, coded: bool = True, name: str = "cnn"):
        self.cnn = cnn
        self.coded = coded
        self.name = name

    def detect(self, received, channel, rng, n_symbols):
        return (equalize(self.cnn, received)[:, :n_symbols] < 0).astype(np.int8)


class CnnNndSystem(System):
    metric = "info"

    def __init__(self, cnn: Network, nnd: Network, name: str = "cnn+nnd"):
        self.cnn = cnn
        self.nnd = nnd
        self.name = name

    def detect(self, received, channel, rng, n_symbols):
        return decode_nnd(self.nnd, equalize(self.cnn, received)[:, :n_symbols])


class NndSystem(System):
    """Decoder fed directly with the received values (AWGN checks)."""

    metric = "info"

    def __init__(self, nnd: Network, name: str = "nnd"):
        self.nnd = nnd
        self.name = name

    def detect(self, received, channel, rng, n_symbols):
        return decode_nnd(self.nnd, received[:, :n_symbols])


class CnnScSystem(System):
    """CNN soft output scaled to LLRs 2y/sigma^2, then SC decoding."""

    metric = "info"

    def __init__(self, cnn: Network, code: PolarCode, name: str = "cnn+sc"):
        self.cnn = cnn
        self.code = code
        self.name = name

    def detect(self, received, channel, rng, n_symbols):
        y = equalize(self.cnn, received)[:, :n_symbols]
        sigma2 = max(channel.noise_sigma, 1e-3) ** 2
        return sc_decode(self.code, np.clip(2.0 * y / sigma2, -50.0, 50.0))
