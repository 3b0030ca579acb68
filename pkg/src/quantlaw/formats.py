"""Block-scaled fake quantization kernels.

Two element formats are emulated:

``mxint``
    One shared power-of-two exponent per block, ``bits``-bit signed integer
    mantissas in the symmetric range ``[-(2**(bits-1) - 1), 2**(bits-1) - 1]``.
``affine_int``
    Per-group asymmetric integer quantization with a scale and zero point.

All kernels block along the last axis. A trailing partial block is quantized
as a short block. Results are float64, except that mxint keeps float32 inputs
in float32 (its outputs are exactly representable there).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidFormat, InvalidInput

MXINT = "mxint"
AFFINE_INT = "affine_int"

EXP_MIN = -126
EXP_MAX = 127

# Significant bits kept in an affine scale. Fewer are used when the zero
# point is large so that (code - zero_point) * scale stays exact.
_AFFINE_SCALE_BITS = 24

_FORMAT_RE = re.compile(r"^(mxint|affine)(\d+):(\d+)$")


@dataclass(frozen=True)
class BlockFormat:
    kind: str
    bits: int
    block_size: int

    def __post_init__(self):
        if self.kind not in (MXINT, AFFINE_INT):
            raise InvalidFormat(f"unknown format kind {self.kind!r}")
        if not 2 <= self.bits <= 8:
            raise InvalidFormat(f"bits must be in [2, 8], got {self.bits}")
        b = self.block_size
        if b < 1 or b > 4096 or b & (b - 1):
            raise InvalidFormat(f"block_size must be a power of two in [1, 4096], got {b}")

    @classmethod
    def parse(cls, text: str) -> "BlockFormat":
        """Parse ``mxint<bits>:<block>`` or ``affine<bits>:<block>``."""
        m = _FORMAT_RE.match(text.strip())
        if m is None:
            raise InvalidFormat(f"cannot parse format descriptor {text!r}")
        kind = MXINT if m.group(1) == "mxint" else AFFINE_INT
        return cls(kind, int(m.group(2)), int(m.group(3)))

    def __str__(self) -> str:
        prefix = "mxint" if self.kind == MXINT else "affine"
        return f"{prefix}{self.bits}:{self.block_size}"

    @property
    def max_mantissa(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class QuantizedBlock:
    shared_exponent: int
    mantissas: tuple[int, ...]


@dataclass(frozen=True)
class QuantStats:
    mse: float
    max_abs_err: float
    saturation_count: int = 0


def _as_float_array(values, keep_float32: bool = False) -> np.ndarray:
    x = np.asarray(values)
    if not (keep_float32 and x.dtype == np.float32):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains non-finite values")
    return x


def _blockwise(x: np.ndarray, block_size: int, kernel):
    """Apply ``kernel`` to ``(..., n_blocks, block)`` views of ``x``.

    ``kernel`` returns ``(dequantized, saturation_count)``.
    """
    if x.ndim == 0:
        x = x.reshape(1)
    length = x.shape[-1]
    n_full = length // block_size
    lead = x.shape[:-1]
    out = np.empty_like(x)
    saturated = 0
    split = n_full * block_size
    if n_full:
        blocks = x[..., :split].reshape(*lead, n_full, block_size)
        q, s = kernel(blocks)
        out[..., :split] = q.reshape(*lead, split)
        saturated += s
    if split < length:
        tail = x[..., split:].reshape(*lead, 1, length - split)
        q, s = kernel(tail)
        out[..., split:] = q.reshape(*lead, length - split)
        saturated += s
    return out, saturated


def _mxint_blocks(blocks: np.ndarray, bits: int):
    exps, mant, saturated = _mxint_encode_blocks(blocks, bits)
    out = mant * _pow2(exps, blocks.dtype)
    return out, saturated


def _pow2(exps: np.ndarray, dtype) -> np.ndarray:
    # Exact powers of two; float32 covers 2**-149 .. 2**127.
    return np.ldexp(np.ones(exps.shape, dtype=dtype), exps.astype(np.int32))


def _block_absmax(blocks: np.ndarray) -> np.ndarray:
    # Pairwise halving beats ufunc.reduce on short trailing axes.
    a = np.abs(blocks)
    while a.shape[-1] > 1 and a.shape[-1] % 2 == 0:
        half = a.shape[-1] // 2
        a = np.maximum(a[..., :half], a[..., half:])
    return a.max(axis=-1, keepdims=True) if a.shape[-1] > 1 else a


def _mxint_encode_blocks(blocks: np.ndarray, bits: int):
    qmax = 2 ** (bits - 1) - 1
    amax = _block_absmax(blocks)
    # frexp: amax = m * 2**ex with m in [0.5, 1), so floor(log2(amax)) = ex - 1
    _, ex = np.frexp(amax)
    exps = ex.astype(np.int64) - 1 - (bits - 2)
    flush = (amax == 0) | (exps < EXP_MIN)
    exps = np.where(flush, 0, np.clip(exps, EXP_MIN, EXP_MAX))
    mant = np.rint(blocks * _pow2(-exps, blocks.dtype))
    over = np.abs(mant) > qmax
    np.clip(mant, -qmax, qmax, out=mant)
    if flush.any():
        mant = np.where(flush, 0.0, mant).astype(blocks.dtype)
    saturated = int(np.count_nonzero(over & ~flush))
    return exps, mant, saturated


def _snap_up(raw: np.ndarray, nbits: np.ndarray) -> np.ndarray:
    m, e = np.frexp(raw)
    return np.ldexp(np.ceil(np.ldexp(m, nbits)), e - nbits)


def _affine_core(blocks: np.ndarray, bits: int, snap: bool):
    qmax = float(2**bits - 1)
    lo = np.min(blocks, axis=-1, keepdims=True)
    hi = np.max(blocks, axis=-1, keepdims=True)
    const = hi == lo
    raw = np.where(const, 1.0, (hi - lo) / qmax)

    if snap:
        # Shrink the scale mantissa until (code - zp) * scale is exact.
        nbits = np.full(raw.shape, _AFFINE_SCALE_BITS, dtype=np.int64)
        for _ in range(64):
            scale = _snap_up(raw, nbits)
            zp = np.rint(-lo / scale)
            _, zp_bits = np.frexp(np.abs(zp) + qmax)
            wanted = np.clip(52 - zp_bits, 1, _AFFINE_SCALE_BITS)
            if np.all(wanted >= nbits):
                break
            nbits = np.minimum(nbits, wanted)
    else:
        scale = raw
        zp = np.rint(-lo / scale)

    codes = np.rint((blocks - lo) / scale)
    over = (codes < 0) | (codes > qmax)
    codes = np.clip(codes, 0.0, qmax)
    deq = (codes - zp) * scale
    out = np.where(const, blocks, deq)
    return out, over & ~const


def _affine_blocks(blocks: np.ndarray, bits: int):
    # The full-precision scale is used for a group when its output is already a
    # fixed point of the kernel; otherwise the snapped scale guarantees one.
    plain, plain_over = _affine_core(blocks, bits, snap=False)
    again, _ = _affine_core(plain, bits, snap=False)
    stable = np.all(again == plain, axis=-1, keepdims=True)
    if np.all(stable):
        return plain, int(np.count_nonzero(plain_over))
    snapped, snapped_over = _affine_core(blocks, bits, snap=True)
    out = np.where(stable, plain, snapped)
    over = np.where(stable, plain_over, snapped_over)
    return out, int(np.count_nonzero(over))


def mxint_fake_quant(values, fmt: BlockFormat, *, return_saturation: bool = False):
    """Quantize-dequantize ``values`` in MXINT along the last axis.

    Per block: ``e = floor(log2(amax)) - (bits - 2)``, mantissas are
    ``clamp(round_half_even(x / 2**e))`` and the result is ``m * 2**e``.
    Blocks whose exponent falls below -126 flush to zero.

    >>> mxint_fake_quant([0.6, -0.6], BlockFormat("mxint", 2, 2)).tolist()
    [0.5, -0.5]
    """
    if fmt.kind != MXINT:
        raise InvalidFormat(f"expected an mxint format, got {fmt}")
    x = _as_float_array(values, keep_float32=True)
    out, sat = _blockwise(x, fmt.block_size, lambda b: _mxint_blocks(b, fmt.bits))
    out = out.reshape(np.shape(values)) if np.ndim(values) == 0 else out
    return (out, sat) if return_saturation else out


def affine_fake_quant(values, fmt: BlockFormat, *, return_saturation: bool = False):
    """Asymmetric per-group integer quantize-dequantize along the last axis.

    ``scale = (max - min) / (2**bits - 1)``, ``zero_point = round(-min / scale)``,
    codes ``round((x - min) / scale)`` clamped to ``[0, 2**bits - 1]``, output
    ``(code - zero_point) * scale``. A group with ``max == min`` is reproduced
    unchanged. When rounding in the dequantized values would make a second
    pass move them, the group's scale is rounded up to fewer significant bits
    so that the output is an exact fixed point.
    """
    if fmt.kind != AFFINE_INT:
        raise InvalidFormat(f"expected an affine format, got {fmt}")
    x = _as_float_array(values)
    out, sat = _blockwise(x, fmt.block_size, lambda b: _affine_blocks(b, fmt.bits))
    out = out.reshape(np.shape(values)) if np.ndim(values) == 0 else out
    return (out, sat) if return_saturation else out


def fake_quant(values, fmt: BlockFormat, *, return_saturation: bool = False):
    if fmt.kind == MXINT:
        return mxint_fake_quant(values, fmt, return_saturation=return_saturation)
    return affine_fake_quant(values, fmt, return_saturation=return_saturation)


def encode_mxint(values: Sequence[float], fmt: BlockFormat) -> list[QuantizedBlock]:
    """Encode a 1-D sequence into explicit MXINT blocks."""
    if fmt.kind != MXINT:
        raise InvalidFormat(f"expected an mxint format, got {fmt}")
    x = _as_float_array(values).reshape(-1)
    blocks = []
    for start in range(0, x.size, fmt.block_size):
        chunk = x[start : start + fmt.block_size].reshape(1, -1)
        exps, mant, _ = _mxint_encode_blocks(chunk, fmt.bits)
        blocks.append(QuantizedBlock(int(exps[0, 0]), tuple(int(m) for m in mant[0])))
    return blocks


def decode_mxint(blocks: Sequence[QuantizedBlock]) -> np.ndarray:
    parts = [np.ldexp(np.asarray(b.mantissas, dtype=np.float64), b.shared_exponent) for b in blocks]
    return np.concatenate(parts) if parts else np.zeros(0)


def quant_error(original, quantized, saturation_count: int = 0) -> QuantStats:
    a = np.asarray(original, dtype=np.float64).reshape(-1)
    b = np.asarray(quantized, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInput(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        return QuantStats(0.0, 0.0, saturation_count)
    diff = a - b
    return QuantStats(float(np.mean(diff * diff)), float(np.max(np.abs(diff))), int(saturation_count))
