"""Dispersive nonlinear channel: BPSK -> causal FIR ISI -> memoryless g -> AWGN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Linear test channel H(z) = 0.3482 + 0.8704 z^-1 + 0.3482 z^-2.
PAPER_TAPS = (0.3482, 0.8704, 0.3482)
# Channel used for the decision-boundary plot.
BOUNDARY_TAPS = (1.0, 0.5)

SNR_CONVENTIONS = ("es_n0", "eb_n0")


def _identity(v):
    return v


def _poly_cos(v):
    return v + 0.2 * v**2 - 0.1 * v**3 + 0.5 * np.cos(np.pi * v)


def _poly_cos_magnitude(v):
    # literal |g(v)| = f(|v|) reading, sign carried over from v
    a = np.abs(v)
    return np.sign(v) * (a + 0.2 * a**2 - 0.1 * a**3 + 0.5 * np.cos(np.pi * a))


def _cubic(v):
    return v - 0.9 * v**3


NONLINEARITIES = {
    "identity": _identity,
    "paper_poly_cos": _poly_cos,
    "poly_cos_magnitude": _poly_cos_magnitude,
    "cubic": _cubic,
}


@dataclass(frozen=True)
class ChannelSpec:
    taps: tuple[float, ...] = PAPER_TAPS
    nonlinearity: str = "identity"
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(float(t) for t in self.taps))
        if len(self.taps) < 1:
            raise ValueError("channel needs at least one tap")
        if not all(np.isfinite(self.taps)):
            raise ValueError("channel taps must be finite")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def memory(self) -> int:
        return len(self.taps) - 1

    def with_sigma(self, sigma: float) -> "ChannelSpec":
        return ChannelSpec(self.taps, self.nonlinearity, sigma)


@dataclass(frozen=True)
class SnrPoint:
    value_db: float
    convention: str = "es_n0"
    rate: float = 1.0

    def __post_init__(self):
        if self.convention not in SNR_CONVENTIONS:
            raise ValueError(f"unknown SNR convention {self.convention!r}")
        if not (0.0 < self.rate <= 1.0):
            raise ValueError(f"code rate must be in (0, 1], got {self.rate}")


def sigma_from_snr(point: SnrPoint) -> float:
    """Per-sample noise std for unit-energy BPSK.

    es_n0: sigma^2 = 1 / (2 Es/N0); eb_n0: sigma^2 = 1 / (2 R Eb/N0).
    """
    if not np.isfinite(point.value_db):
        raise ValueError("SNR must be finite")
    lin = 10.0 ** (point.value_db / 10.0)
    rate = point.rate if point.convention == "eb_n0" else 1.0
    return float(np.sqrt(1.0 / (2.0 * rate * lin)))


def bpsk_modulate(bits) -> np.ndarray:
    """0 -> +1, 1 -> -1."""
    b = np.asarray(bits)
    if b.size and not np.all((b == 0) | (b == 1)):
        raise ValueError("bits must be 0 or 1")
    return 1.0 - 2.0 * b.astype(float)


def bpsk_demodulate(symbols) -> np.ndarray:
    """Hard decision; ties (exactly 0) go to bit 0."""
    return (np.asarray(symbols) < 0).astype(np.int8)


def fir_convolve(symbols, taps, full: bool = False) -> np.ndarray:
    """Causal convolution with zero initial state.

    By default the output is truncated to the input length; ``full=True``
    keeps the ``L - 1`` tail samples (plain linear convolution). Works along
    the last axis, so a (frames, n) array is filtered per frame.
    """
    s = np.asarray(symbols, dtype=float)
    h = np.asarray(taps, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("taps must be a non-empty 1-D sequence")
    if full:
        pad = np.zeros(s.shape[:-1] + (h.size - 1,))
        s = np.concatenate([s, pad], axis=-1)
    n = s.shape[-1]
    out = np.zeros_like(s)
    for k, hk in enumerate(h[:n]):
        out[..., k:] += hk * s[..., : n - k]
    return out


def apply_nonlinearity(v, selector: str = "identity") -> np.ndarray:
    try:
        fn = NONLINEARITIES[selector]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {selector!r}") from None
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("nonlinearity input must be finite")
    return fn(v)


def transmit(
    bits,
    spec: ChannelSpec,
    rng: np.random.Generator | None = None,
    *,
    tail: bool = False,
    history=None,
) -> np.ndarray:
    """r = g(h * s) + n.

    ``tail=True`` returns the ``n + L - 1`` samples of the full convolution.
    ``history`` optionally gives bits sent before the frame (same leading
    shape as ``bits``); they load the FIR state but their outputs are dropped.
    """
    s = bpsk_modulate(bits)
    if history is not None:
        hs = bpsk_modulate(history)
        v = fir_convolve(np.concatenate([hs, s], axis=-1), spec.taps, full=tail)[..., hs.shape[-1]:]
    else:
        v = fir_convolve(s, spec.taps, full=tail)
    r = apply_nonlinearity(v, spec.nonlinearity)
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_sigma > 0")
        r = r + spec.noise_sigma * rng.standard_normal(r.shape)
    return r
