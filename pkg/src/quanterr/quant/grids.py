"""Group-wise grids (uniform min-max and NormalFloat) and bit packing."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import norm

SUPPORTED_BITS = (2, 3, 4, 8)  # 2 and 8 exist for tests; QuantSpec admits 3 and 4


def codes_per_word(bits: int) -> int:
    # 3-bit: 10 codes + 2 pad bits; 4-bit: 8 codes
    return 32 // bits


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    flat = np.asarray(codes, dtype=np.uint32).ravel()
    if flat.size and int(flat.max()) >= (1 << bits):
        raise ValueError(f"code exceeds {bits}-bit range")
    per = codes_per_word(bits)
    n_words = -(-flat.size // per)
    padded = np.zeros(n_words * per, dtype=np.uint32)
    padded[: flat.size] = flat
    shifts = (np.arange(per, dtype=np.uint32) * bits)[None, :]
    return np.bitwise_or.reduce(padded.reshape(n_words, per) << shifts, axis=1).astype(np.uint32)


def unpack_codes(words: np.ndarray, bits: int, n: int) -> np.ndarray:
    per = codes_per_word(bits)
    shifts = (np.arange(per, dtype=np.uint32) * bits)[None, :]
    mask = np.uint32((1 << bits) - 1)
    return ((np.asarray(words, dtype=np.uint32)[:, None] >> shifts) & mask).ravel()[:n]


def group_bounds(width: int, group_size: int) -> list[tuple[int, int]]:
    """Contiguous groups along the input dimension; the last may be ragged."""
    if group_size <= 0:
        raise ValueError("group_size must be positive")
    return [(s, min(s + group_size, width)) for s in range(0, width, group_size)]


def group_index(width: int, group_size: int) -> np.ndarray:
    return np.arange(width) // group_size


@dataclass(frozen=True)
class QuantizedLinear:
    """Packed codes plus per-(row, group) grid parameters for one weight matrix.

    ``grid == "uniform"``: value = code * scale + offset.
    ``grid == "codebook"``: value = codebook[code] * absmax.
    ``awq_scale`` records the per-input-channel factors already folded into
    the weights (informational; dequantize() returns the folded weight).
    """

    grid: str
    bits: int
    group_size: int
    shape: tuple[int, int]
    packed: np.ndarray
    scale: np.ndarray | None = None
    offset: np.ndarray | None = None
    absmax: np.ndarray | None = None
    codebook: np.ndarray | None = None
    awq_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def codes(self) -> np.ndarray:
        out, inp = self.shape
        return unpack_codes(self.packed, self.bits, out * inp).reshape(out, inp)

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        codes = self.codes
        g = group_index(self.shape[1], self.group_size)
        if self.grid == "uniform":
            w = codes * self.scale[:, g] + self.offset[:, g]
        elif self.grid == "codebook":
            w = self.codebook[codes] * self.absmax[:, g]
        else:
            raise ValueError(f"unknown grid {self.grid!r}")
        return w.astype(dtype)

    def with_awq_scale(self, s: np.ndarray) -> "QuantizedLinear":
        from dataclasses import replace

        return replace(self, awq_scale=np.asarray(s, dtype=np.float64))


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def uniform_params(W: np.ndarray, bits: int, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Asymmetric min-max grid per (row, group): returns (scale, offset) of shape (out, n_groups)."""
    _check_bits(bits)
    W = np.asarray(W, dtype=np.float64)
    maxq = (1 << bits) - 1
    bounds = group_bounds(W.shape[1], group_size)
    lo = np.stack([W[:, a:b].min(axis=1) for a, b in bounds], axis=1)
    hi = np.stack([W[:, a:b].max(axis=1) for a, b in bounds], axis=1)
    return (hi - lo) / maxq, lo


def uniform_codes(w: np.ndarray, scale: np.ndarray, offset: np.ndarray, bits: int) -> np.ndarray:
    """Round onto the grid; zero-scale (constant) groups map to code 0 = offset."""
    maxq = (1 << bits) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.rint((w - offset) / scale)
    q = np.where(scale > 0, q, 0.0)
    return np.clip(q, 0, maxq).astype(np.int64)


def rtn_quantize(W, bits: int, group_size: int) -> QuantizedLinear:
    W = np.asarray(W, dtype=np.float64)
    scale, offset = uniform_params(W, bits, group_size)
    g = group_index(W.shape[1], group_size)
    codes = uniform_codes(W, scale[:, g], offset[:, g], bits)
    return QuantizedLinear("uniform", bits, group_size, tuple(W.shape), pack_codes(codes, bits),
                           scale=scale, offset=offset)


@lru_cache(maxsize=None)
def _nf_levels(bits: int) -> tuple[float, ...]:
    # QLoRA construction: separate quantiles for the positive half (2^(b-1)
    # levels) and the negative half (2^(b-1) - 1 levels), plus an exact zero.
    n = 1 << bits
    offset = 1.0 - 0.5 * (1.0 / (2 * n) + 1.0 / (2 * (n - 1)))
    pos = norm.ppf(np.linspace(offset, 0.5, n // 2 + 1)[:-1])
    neg = -norm.ppf(np.linspace(offset, 0.5, n // 2)[:-1])
    v = np.concatenate([pos, [0.0], neg])
    v = np.sort(v / np.abs(v).max())
    v[0], v[-1] = -1.0, 1.0
    return tuple(float(x) for x in v)


def nf_codebook(bits: int) -> np.ndarray:
    if bits not in (2, 3, 4):
        raise ValueError("NormalFloat codebooks are defined for 2-4 bits")
    return np.array(_nf_levels(bits))


def nearest_level(x: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook entry; exact ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    hi = np.clip(np.searchsorted(codebook, x, side="left"), 1, len(codebook) - 1)
    lo = hi - 1
    return np.where(np.abs(x - codebook[lo]) <= np.abs(codebook[hi] - x), lo, hi)


def nf_quantize(W, bits: int, group_size: int) -> QuantizedLinear:
    W = np.asarray(W, dtype=np.float64)
    cb = nf_codebook(bits)
    bounds = group_bounds(W.shape[1], group_size)
    absmax = np.stack([np.abs(W[:, a:b]).max(axis=1) for a, b in bounds], axis=1)
    g = group_index(W.shape[1], group_size)
    am = absmax[:, g]
    with np.errstate(divide="ignore", invalid="ignore"):
        normed = np.where(am > 0, W / am, 0.0)
    codes = nearest_level(normed, cb)
    return QuantizedLinear("codebook", bits, group_size, tuple(W.shape), pack_codes(codes, bits),
                           absmax=absmax, codebook=cb)
