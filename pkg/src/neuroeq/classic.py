"""Classical baselines: least-squares channel estimation and BCJR equalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .channel import ChannelSpec, apply_nonlinearity, bpsk_modulate, transmit
from .montecarlo import BerRecord, System, evaluate_ber
from .polar import PolarCode

SIGMA_FLOOR = 1e-3


class SingularSystemError(np.linalg.LinAlgError):
    """Pilot matrix is rank deficient."""


@dataclass(frozen=True)
class PilotRecord:
    symbols: np.ndarray
    received: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=float)
        r = np.asarray(self.received, dtype=float)
        if s.shape != r.shape or s.ndim != 1:
            raise ValueError("pilot symbols and observations must be equal-length 1-D arrays")
        object.__setattr__(self, "symbols", s)
        object.__setattr__(self, "received", r)


def convolution_matrix(symbols, n_taps: int) -> np.ndarray:
    """Causal convolution matrix: ``(S @ h)[i] = sum_k h[k] s[i - k]`` with zero history.

    Works on the last axis, so (frames, n) gives (frames, n, n_taps).
    """
    s = np.asarray(symbols, dtype=float)
    n = s.shape[-1]
    mat = np.zeros(s.shape + (n_taps,))
    for k in range(min(n_taps, n)):
        mat[..., k:, k] = s[..., : n - k]
    return mat


def ls_channel_estimate(pilot: PilotRecord, n_taps: int) -> np.ndarray:
    """Least-squares (= Gaussian ML) FIR estimate from a known pilot."""
    n = pilot.symbols.size
    if n < n_taps:
        raise ValueError(f"pilot length {n} shorter than channel length {n_taps}")
    S = convolution_matrix(pilot.symbols, n_taps)
    if np.linalg.matrix_rank(S) < n_taps:
        raise SingularSystemError("pilot convolution matrix is rank deficient")
    return np.linalg.solve(S.T @ S, S.T @ pilot.received)


def _ls_batch(symbols: np.ndarray, received: np.ndarray, n_taps: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame LS taps and residual noise variance for (frames, n) pilots."""
    S = convolution_matrix(symbols, n_taps)
    St = np.swapaxes(S, -1, -2)
    h = np.linalg.solve(St @ S, (St @ received[..., None]))[..., 0]
    resid = received - (S @ h[..., None])[..., 0]
    dof = max(symbols.shape[-1] - n_taps, 1)
    return h, np.sum(resid**2, axis=-1) / dof


class Trellis:
    """ISI trellis for BPSK over a length-L FIR channel followed by a memoryless g.

    State bit ``j`` holds the symbol sent ``j + 1`` steps ago (bit 1 = -1).
    ``outputs[..., state, x]`` is the steady-state noiseless output for input
    bit ``x``. ``taps`` may carry a leading frame axis for per-frame channels.
    """

    def __init__(self, taps, nonlinearity: str = "identity"):
        h = np.asarray(taps, dtype=float)
        if h.ndim < 1 or h.shape[-1] < 1:
            raise ValueError("need at least one tap")
        if not np.all(np.isfinite(h)):
            raise ValueError("taps must be finite")
        self.taps = h
        self.nonlinearity = nonlinearity
        self.memory = h.shape[-1] - 1
        self.n_states = 2**self.memory
        m, S = self.memory, self.n_states
        states = np.arange(S)
        # symbols[s, x, j]: symbol j steps ago on branch (s, x); j = 0 is the input
        self.symbols = np.array(
            [[[1.0 - 2.0 * x] + [1.0 - 2.0 * ((s >> j) & 1) for j in range(m)] for x in (0, 1)] for s in states]
        ).reshape(S, 2, m + 1)
        self.next_state = np.array([[((s << 1) | x) & (S - 1) for x in (0, 1)] for s in states])
        pred = [[] for _ in range(S)]
        for s in states:
            for x in (0, 1):
                pred[self.next_state[s, x]].append((s, x))
        self.pred = np.array(pred)  # [ns, k] -> (s, x), two predecessors each
        self.outputs = self._outputs(np.ones(m + 1))
        if not np.all(np.isfinite(self.outputs)):
            raise ValueError("non-finite trellis outputs")

    def _outputs(self, mask: np.ndarray) -> np.ndarray:
        lin = np.einsum("sxj,...j->...sx", self.symbols * mask, self.taps)
        return apply_nonlinearity(lin, self.nonlinearity)

    def branch_outputs(self, n_symbols: int, n_obs: int) -> np.ndarray:
        """Noiseless outputs per time step, shape (..., n_obs, S, 2).

        Symbols before the frame are zero (empty channel memory). Observations
        past ``n_symbols`` are tail samples: the "input" there is a dummy
        whose tap is masked out, as are taps reaching before time 0.
        """
        m = self.memory
        tables = []
        for i in range(n_obs):
            mask = np.array([1.0 if 0 <= i - j < n_symbols else 0.0 for j in range(m + 1)])
            tables.append(self._outputs(mask))
        return np.stack(tables, axis=-3)

    @classmethod
    def from_spec(cls, spec: ChannelSpec) -> "Trellis":
        return cls(spec.taps, spec.nonlinearity)


def bcjr_equalize(trellis: Trellis, received, sigma, n_symbols: int | None = None) -> np.ndarray:
    """Exact per-symbol posteriors P(s_i = +1 | r) by log-domain forward-backward.

    The channel memory starts empty (zero history) and the final state is
    free. ``received`` is (n,) or (frames, n); ``sigma`` a scalar or per-frame
    array. With ``n_symbols`` < n the trailing samples are the convolution
    tail and only the first ``n_symbols`` posteriors are returned.
    """
    r = np.asarray(received, dtype=float)
    squeeze = r.ndim == 1
    if squeeze:
        r = r[None]
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), r.shape[:1])
    if np.any(~(sig > 0)):
        raise ValueError("sigma must be positive")
    B, n_obs = r.shape
    n = n_obs if n_symbols is None else n_symbols
    if not 1 <= n <= n_obs:
        raise ValueError("n_symbols must be between 1 and the number of observations")
    S = trellis.n_states
    out = trellis.branch_outputs(n, n_obs)
    if out.ndim == 3:
        out = out[None]
    ns = trellis.next_state
    ps, px = trellis.pred[..., 0], trellis.pred[..., 1]
    inv2s2 = (1.0 / (2.0 * sig**2))[:, None, None, None]
    log_gamma = -((r[:, :, None, None] - out) ** 2) * inv2s2  # (B, n_obs, S, 2)

    # unknown history / tail inputs are uniform dummies that never reach an output
    log_alpha = np.empty((n_obs + 1, B, S))
    log_alpha[0] = -np.log(S)
    for i in range(n_obs):
        terms = log_alpha[i][:, ps] + log_gamma[:, i][:, ps, px]  # (B, S, 2)
        la = np.logaddexp(terms[..., 0], terms[..., 1])
        log_alpha[i + 1] = la - la.max(axis=1, keepdims=True)

    post = np.empty((B, n))
    log_beta = np.zeros((B, S))
    for i in range(n_obs - 1, -1, -1):
        branch = log_gamma[:, i] + log_beta[:, ns]  # (B, S, 2)
        if i < n:
            joint = log_alpha[i][:, :, None] + branch
            lp = np.logaddexp.reduce(joint, axis=1)  # (B, 2)
            post[:, i] = expit(lp[:, 0] - lp[:, 1])
        lb = np.logaddexp(branch[..., 0], branch[..., 1])
        log_beta = lb - lb.max(axis=1, keepdims=True)
    return post[0] if squeeze else post


class BcjrDetector(System):
    """Hard-decided BCJR with perfect CSI or a per-frame LS pilot estimate.

    In estimated mode each frame gets a fresh random pilot of ``pilot_length``
    symbols through the same channel; taps and noise variance are estimated
    from it and the trellis is rebuilt with the estimated taps.
    """

    def __init__(self, mode: str = "perfect", pilot_length: int | None = None, coded: bool = True):
        if mode not in ("perfect", "estimated"):
            raise ValueError(f"unknown BCJR mode {mode!r}")
        if mode == "estimated" and not pilot_length:
            raise ValueError("estimated mode needs a pilot length")
        self.mode = mode
        self.pilot_length = pilot_length
        self.coded = coded
        self.name = "bcjr-perfect" if mode == "perfect" else f"bcjr-ls-n{pilot_length}"

    def detect(self, received, channel, rng, n_symbols):
        if self.mode == "perfect":
            sigma = max(channel.noise_sigma, SIGMA_FLOOR)
            post = bcjr_equalize(Trellis.from_spec(channel), received, sigma, n_symbols)
        else:
            frames = received.shape[0]
            L = len(channel.taps)
            pilot_bits = rng.integers(0, 2, size=(frames, self.pilot_length), dtype=np.int8)
            pilot_rx = transmit(pilot_bits, channel, rng)
            taps, var = _ls_batch(bpsk_modulate(pilot_bits), pilot_rx, L)
            sigma = np.maximum(np.sqrt(var), SIGMA_FLOOR)
            post = bcjr_equalize(Trellis(taps, channel.nonlinearity), received, sigma, n_symbols)
        return (post < 0.5).astype(np.int8)


def map_ber_baseline(
    spec: ChannelSpec,
    snr_grid,
    frames: int,
    *,
    mode: str = "perfect",
    pilot_length: int | None = None,
    convention: str = "es_n0",
    code: PolarCode | None = None,
    seed: int = 0,
    threads: int = 1,
    tail: bool = True,
) -> list[BerRecord]:
    """BER of hard-decided BCJR on the coded channel bits, per SNR."""
    det = BcjrDetector(mode, pilot_length)
    return evaluate_ber(
        det, spec, snr_grid, frames, convention=convention, code=code, seed=seed, threads=threads, tail=tail
    )
