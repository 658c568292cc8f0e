"""Monte-Carlo BER estimation with deterministic, parallel-safe random streams.

Frames for one SNR point are generated in fixed-size chunks. Chunk ``c`` of
SNR index ``i`` always draws from ``SeedSequence(seed, spawn_key=(i, c))``,
so totals do not depend on how many worker threads process the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .channel import ChannelSpec, SnrPoint, sigma_from_snr, transmit
from .polar import PolarCode, polar_encode

Z95 = 1.959963984540054
CHUNK_FRAMES = 2000


def wilson_interval(errors: int, trials: int, z: float = Z95) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("trials must be positive")
    if errors == 0:
        return 0.0, z * z / (trials + z * z)
    p = errors / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class BerRecord:
    snr_db: float
    convention: str
    bits_tested: int
    bit_errors: int

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_tested

    @property
    def wilson95(self) -> tuple[float, float]:
        return wilson_interval(self.bit_errors, self.bits_tested)

    @property
    def wilson95_halfwidth(self) -> float:
        lo, hi = self.wilson95
        return (hi - lo) / 2


class System:
    """Something that turns received frames into bit decisions.

    ``coded``: frames carry polar codewords (else uniformly random bits).
    ``metric``: ``"coded"`` scores the channel bits, ``"info"`` the message.
    ``detect`` gets the received block, the channel in force (with its
    noise sigma), the chunk's generator and the number of symbols per frame;
    the block may hold ``L - 1`` extra tail samples after those symbols.
    """

    coded = True
    metric = "coded"
    name = "system"

    def detect(
        self, received: np.ndarray, channel: ChannelSpec, rng: np.random.Generator, n_symbols: int
    ) -> np.ndarray:
        raise NotImplementedError


class SignDetector(System):
    """Symbol-by-symbol hard decision on the raw received value."""

    name = "sign"

    def __init__(self, coded: bool = False):
        self.coded = coded

    def detect(self, received, channel, rng, n_symbols):
        return (received[:, :n_symbols] < 0).astype(np.int8)


@dataclass
class FrameSource:
    code: PolarCode
    frame_len: int = 16

    def draw(self, coded: bool, frames: int, rng: np.random.Generator):
        """Returns (message bits or None, channel bits)."""
        if coded:
            msg = rng.integers(0, 2, size=(frames, self.code.k), dtype=np.int8)
            return msg, polar_encode(self.code, msg)
        return None, rng.integers(0, 2, size=(frames, self.frame_len), dtype=np.int8)


def _chunk_errors(system, channel, source, frames, seq, tail) -> int:
    rng = np.random.default_rng(seq)
    msg, bits = source.draw(system.coded, frames, rng)
    received = transmit(bits, channel, rng, tail=tail)
    decided = system.detect(received, channel, rng, bits.shape[1])
    truth = msg if system.metric == "info" else bits
    if decided.shape != truth.shape:
        raise ValueError(f"{system.name}: decisions {decided.shape} vs truth {truth.shape}")
    return int(np.count_nonzero(decided != truth))


def evaluate_ber(
    system: System,
    channel_spec: ChannelSpec,
    snr_grid,
    frames_per_snr: int,
    *,
    convention: str = "es_n0",
    code: PolarCode | None = None,
    seed: int = 0,
    threads: int = 1,
    frame_len: int = 16,
    tail: bool = True,
    chunk_frames: int = CHUNK_FRAMES,
) -> list[BerRecord]:
    """Monte-Carlo BER of ``system`` at each SNR of ``snr_grid``.

    Each frame is an independent burst: the channel memory starts empty and,
    with ``tail``, the receiver also sees the ``L - 1`` samples the burst
    leaves behind.

    ``snr_grid=None`` evaluates once at ``channel_spec.noise_sigma`` (the
    record's ``snr_db`` is then NaN).
    """
    if frames_per_snr <= 0:
        raise ValueError("frames_per_snr must be positive")
    code = code or PolarCode()
    source = FrameSource(code, code.n if system.coded else frame_len)
    rate = code.rate if system.coded else 1.0
    bits_per_frame = code.k if system.metric == "info" else source.frame_len
    grid = [None] if snr_grid is None else list(snr_grid)
    records = []
    for i, snr in enumerate(grid):
        if snr is None:
            channel = channel_spec
        else:
            channel = channel_spec.with_sigma(sigma_from_snr(SnrPoint(snr, convention, rate)))
        sizes = [min(chunk_frames, frames_per_snr - s) for s in range(0, frames_per_snr, chunk_frames)]
        seqs = [np.random.SeedSequence(seed, spawn_key=(i, c)) for c in range(len(sizes))]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                errs = list(pool.map(lambda a: _chunk_errors(system, channel, source, *a, tail), zip(sizes, seqs)))
        else:
            errs = [_chunk_errors(system, channel, source, n, s, tail) for n, s in zip(sizes, seqs)]
        records.append(
            BerRecord(
                float("nan") if snr is None else float(snr),
                convention,
                frames_per_snr * bits_per_frame,
                sum(errs),
            )
        )
    return records
