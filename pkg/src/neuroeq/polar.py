"""Short polar codes: Bhattacharyya construction, natural-order encoding, SC decoding.

LLR convention everywhere: positive LLR favours bit 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def bhattacharyya_parameters(n: int, design_param: float = 0.5) -> np.ndarray:
    """Per-index Bhattacharyya bounds after log2(n) polarisation steps.

    Index ``i`` corresponds to ``u_i`` in natural order. The most significant
    index bit is the split closest to the physical channel, so each new
    polarisation step appends the least significant bit.
    """
    if not _is_pow2(n):
        raise ValueError(f"N must be a power of two, got {n}")
    z = np.array([design_param], dtype=float)
    while z.size < n:
        z = np.stack([2 * z - z * z, z * z], axis=1).ravel()
    return z


def construct_info_set(n: int, k: int, design_param: float = 0.5) -> tuple[int, ...]:
    """K indices with the smallest Bhattacharyya parameter, ties toward larger index."""
    if not _is_pow2(n):
        raise ValueError(f"N must be a power of two, got {n}")
    if not 0 < k <= n:
        raise ValueError(f"need 0 < K <= N, got K={k}, N={n}")
    z = bhattacharyya_parameters(n, design_param)
    order = sorted(range(n), key=lambda i: (z[i], -i))
    return tuple(sorted(order[:k]))


@dataclass(frozen=True)
class PolarCode:
    n: int = 16
    k: int = 8
    info_set: tuple[int, ...] | None = None
    design_param: float = 0.5

    def __post_init__(self):
        if not _is_pow2(self.n):
            raise ValueError(f"N must be a power of two, got {self.n}")
        if self.info_set is None:
            object.__setattr__(self, "info_set", construct_info_set(self.n, self.k, self.design_param))
        info = tuple(sorted(int(i) for i in self.info_set))
        if len(info) != self.k or len(set(info)) != self.k or info[0] < 0 or info[-1] >= self.n:
            raise ValueError(f"invalid information set {self.info_set} for ({self.n},{self.k})")
        object.__setattr__(self, "info_set", info)

    @property
    def rate(self) -> float:
        return self.k / self.n

    @property
    def frozen_mask(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[list(self.info_set)] = False
        return mask

    def codebook(self) -> tuple[np.ndarray, np.ndarray]:
        """All 2^K messages and their codewords."""
        msgs = np.array(list(itertools.product((0, 1), repeat=self.k)), dtype=np.int8)
        return msgs, polar_encode(self, msgs)


def polar_transform(u) -> np.ndarray:
    """x = u F^{(x)n} over GF(2), F = [[1, 0], [1, 1]], no bit reversal.

    Operates on the last axis. The transform is its own inverse.
    """
    x = np.array(u, dtype=np.int8, copy=True)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"length must be a power of two, got {n}")
    half = 1
    while half < n:
        blocks = x.reshape(*x.shape[:-1], n // (2 * half), 2, half)
        blocks[..., 0, :] ^= blocks[..., 1, :]
        half *= 2
    return x


def polar_encode(code: PolarCode, message) -> np.ndarray:
    m = np.asarray(message, dtype=np.int8)
    if m.shape[-1] != code.k:
        raise ValueError(f"message length must be {code.k}, got {m.shape[-1]}")
    u = np.zeros(m.shape[:-1] + (code.n,), dtype=np.int8)
    u[..., list(code.info_set)] = m
    return polar_transform(u)


def _f(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact 2 atanh(tanh(a/2) tanh(b/2)), written to stay finite for large |a|, |b|
    return (
        np.sign(a) * np.sign(b) * np.minimum(np.abs(a), np.abs(b))
        + np.log1p(np.exp(-np.abs(a + b)))
        - np.log1p(np.exp(-np.abs(a - b)))
    )


def _g(a: np.ndarray, b: np.ndarray, bits: np.ndarray) -> np.ndarray:
    return b + (1 - 2 * bits.astype(float)) * a


def _sc(llr: np.ndarray, frozen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (u_hat, x_hat) for one subtree; arrays are (batch, len)."""
    n = llr.shape[-1]
    if n == 1:
        if frozen[0]:
            u = np.zeros(llr.shape, dtype=np.int8)
        else:
            u = (llr < 0).astype(np.int8)
        return u, u.copy()
    h = n // 2
    left, right = llr[:, :h], llr[:, h:]
    u_a, a = _sc(_f(left, right), frozen[:h])
    u_b, b = _sc(_g(left, right, a), frozen[h:])
    return np.concatenate([u_a, u_b], axis=1), np.concatenate([a ^ b, b], axis=1)


def sc_decode(code: PolarCode, llrs) -> np.ndarray:
    """Successive-cancellation decoding (exact f/g). Accepts (N,) or (batch, N)."""
    llr = np.asarray(llrs, dtype=float)
    squeeze = llr.ndim == 1
    if squeeze:
        llr = llr[None]
    if llr.shape[-1] != code.n:
        raise ValueError(f"expected {code.n} LLRs, got {llr.shape[-1]}")
    if not np.all(np.isfinite(llr)):
        raise ValueError("LLRs must be finite")
    u, _ = _sc(llr, code.frozen_mask)
    m = u[:, list(code.info_set)]
    return m[0] if squeeze else m


def ml_decode(code: PolarCode, llrs) -> np.ndarray:
    """Brute-force ML over the whole codebook (soft correlation metric)."""
    llr = np.asarray(llrs, dtype=float)
    squeeze = llr.ndim == 1
    if squeeze:
        llr = llr[None]
    msgs, words = code.codebook()
    scores = llr @ (1.0 - 2.0 * words.astype(float)).T
    m = msgs[np.argmax(scores, axis=1)]
    return m[0] if squeeze else m
