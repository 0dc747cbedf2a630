"""4-bit NormalFloat blockwise quantization with double-quantized scales.

Weights are flattened row-major, split into blocks of ``block_size`` values,
normalized by the per-block absmax, and each value is mapped to the nearest
entry of the 16-value NF4 codebook (ties break to the lower index).  The
per-block absmax values are themselves affine-quantized to 8 bits in groups
of ``dq_group_size`` (offset = group min, scale = group max - min).

Quantization is a pure function: identical input bits give identical output
bits, and blocks may be processed in parallel with sequential results.
Quantized layers never participate in gradient computation.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

DEFAULT_BLOCK_SIZE = 64
DEFAULT_DQ_GROUP_SIZE = 256

# Quantile offset of the NF4 construction: 1 - (1/32 + 1/30)/2.
_NF4_OFFSET = 0.9677083333333334


def build_nf4_codebook() -> np.ndarray:
    """The 16 NF4 levels: normal quantiles, asymmetric around an exact zero.

    Eight strictly positive and seven strictly negative quantiles plus zero,
    rescaled so the endpoints are exactly -1 and +1.
    """
    pos = ndtri(np.linspace(_NF4_OFFSET, 0.5, 9))[:-1]
    neg = -ndtri(np.linspace(_NF4_OFFSET, 0.5, 8))[:-1]
    values = np.sort(np.concatenate([neg, [0.0], pos]))
    return values / values[-1]


_CODEBOOK = build_nf4_codebook()
_ZERO_CODE = int(np.where(_CODEBOOK == 0.0)[0][0])
# widest codebook gap; bounds the per-element normalized rounding error at g/2
CODEBOOK_MAX_GAP = float(np.max(np.diff(_CODEBOOK)))


def quantize_block(values: np.ndarray, codebook: np.ndarray | None = None
                   ) -> tuple[np.ndarray, float]:
    """Quantize one block: returns (uint8 codes, absmax).

    Codes are nearest-codebook indices of value/absmax; an all-zero block
    gets absmax 0 and every code set to the codebook's zero index.
    """
    codebook = _CODEBOOK if codebook is None else codebook
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ShapeError("quantize_block requires a non-empty block")
    if not np.isfinite(values).all():
        raise NumericError("quantize_block requires finite inputs")
    absmax = float(np.max(np.abs(values)))
    if absmax == 0.0:
        zero = int(np.where(codebook == 0.0)[0][0])
        return np.full(values.shape, zero, dtype=np.uint8), 0.0
    normalized = values / absmax
    dist = np.abs(normalized[:, None] - codebook[None, :])
    return dist.argmin(axis=1).astype(np.uint8), absmax


def dequantize_block(codes: np.ndarray, absmax: float,
                     codebook: np.ndarray | None = None) -> np.ndarray:
    codebook = _CODEBOOK if codebook is None else codebook
    return codebook[np.asarray(codes)] * absmax


def double_quantize_absmax(absmaxes: np.ndarray, group_size: int = DEFAULT_DQ_GROUP_SIZE
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-bit affine coding of absmax values in groups.

    Per group: offset = min, scale = max - min, code = round((a-offset)/scale*255).
    A constant group has scale 0 and reconstructs exactly.  Reconstruction
    error is at most scale/510 per element.
    """
    absmaxes = np.asarray(absmaxes, dtype=np.float64)
    n = absmaxes.size
    n_groups = math.ceil(n / group_size)
    codes = np.zeros(n, dtype=np.uint8)
    scales = np.zeros(n_groups, dtype=np.float64)
    offsets = np.zeros(n_groups, dtype=np.float64)
    for g in range(n_groups):
        chunk = absmaxes[g * group_size:(g + 1) * group_size]
        lo, hi = float(chunk.min()), float(chunk.max())
        offsets[g] = lo
        scales[g] = hi - lo
        if scales[g] > 0.0:
            codes[g * group_size:(g + 1) * group_size] = np.clip(
                np.round((chunk - lo) / scales[g] * 255.0), 0, 255).astype(np.uint8)
    return codes, scales, offsets


def dequantize_absmax(codes: np.ndarray, scales: np.ndarray, offsets: np.ndarray,
                      group_size: int = DEFAULT_DQ_GROUP_SIZE) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.size
    groups = np.arange(n) // group_size
    return offsets[groups] + codes / 255.0 * scales[groups]


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit codes two per byte: element 2i -> low nibble, 2i+1 -> high."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.max(initial=0) > 15:
        raise ValueError("codes must be < 16")
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


class QuantizedLinear:
    """A frozen linear layer stored as NF4 codes + double-quantized absmax."""

    def __init__(self, shape: tuple[int, int], packed: np.ndarray,
                 absmax_codes: np.ndarray, group_scales: np.ndarray,
                 group_offsets: np.ndarray, block_size: int, dq_group_size: int,
                 bias: Tensor | None, dtype=np.float32):
        self.shape = tuple(shape)
        self.packed = packed
        self.absmax_codes = absmax_codes
        self.group_scales = group_scales
        self.group_offsets = group_offsets
        self.block_size = block_size
        self.dq_group_size = dq_group_size
        self.bias = bias
        self.dtype = np.dtype(dtype)
        self._dense_cache: np.ndarray | None = None

    @property
    def in_features(self) -> int:
        return self.shape[1]

    @property
    def out_features(self) -> int:
        return self.shape[0]

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.shape[0] * self.shape[1] / self.block_size)

    @property
    def param_count(self) -> int:
        # logical count of the represented weights, for trainable-fraction math
        return self.shape[0] * self.shape[1] + (self.bias.size if self.bias is not None else 0)

    def absmaxes(self) -> np.ndarray:
        return dequantize_absmax(self.absmax_codes, self.group_scales,
                                 self.group_offsets, self.dq_group_size)

    def dense_weight(self) -> np.ndarray:
        if self._dense_cache is None:
            n = self.shape[0] * self.shape[1]
            codes = unpack_codes(self.packed, n)
            flat = _CODEBOOK[codes]
            flat = flat * np.repeat(self.absmaxes(), self.block_size)[:n]
            self._dense_cache = flat.reshape(self.shape).astype(self.dtype)
        return self._dense_cache

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"quantized forward: input {x.shape} vs weight {self.shape}")
        w = Tensor(self.dense_weight().astype(x.dtype, copy=False))  # no grad flows in
        y = T.matmul(x, T.transpose(w, (1, 0)))
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def parameters(self) -> dict[str, Tensor]:
        return {"bias": self.bias} if self.bias is not None else {}


def quantize_linear(weight: np.ndarray | Tensor, bias: Tensor | None = None,
                    block_size: int = DEFAULT_BLOCK_SIZE,
                    dq_group_size: int = DEFAULT_DQ_GROUP_SIZE) -> QuantizedLinear:
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if w.ndim != 2:
        raise ShapeError(f"quantize_linear expects a 2-d weight, got {w.shape}")
    if not np.isfinite(w).all():
        raise NumericError("quantize_linear requires finite weights")
    flat = w.astype(np.float64).reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    codes = np.empty(flat.size, dtype=np.uint8)
    absmaxes = np.empty(n_blocks, dtype=np.float64)
    # vectorized over blocks, chunked to bound the (values x 16) distance matrix
    chunk_blocks = max(1, (1 << 20) // block_size)
    for start in range(0, n_blocks, chunk_blocks):
        stop = min(start + chunk_blocks, n_blocks)
        sl = slice(start * block_size, min(stop * block_size, flat.size))
        vals = flat[sl]
        pad = (-vals.size) % block_size
        grid = np.pad(vals, (0, pad)).reshape(-1, block_size)
        am = np.abs(grid).max(axis=1)
        absmaxes[start:stop] = am
        safe = np.where(am == 0.0, 1.0, am)
        normalized = grid / safe[:, None]
        idx = np.abs(normalized[..., None] - _CODEBOOK).argmin(axis=-1)
        idx[am == 0.0, :] = _ZERO_CODE
        codes[sl] = idx.reshape(-1)[:vals.size].astype(np.uint8)
    am_codes, scales, offsets = double_quantize_absmax(absmaxes, dq_group_size)
    return QuantizedLinear(w.shape, pack_codes(codes), am_codes, scales, offsets,
                           block_size, dq_group_size, bias, dtype=w.dtype)


def dequantize(q: QuantizedLinear) -> np.ndarray:
    return q.dense_weight().copy()


def quantized_forward(x: Tensor, q: QuantizedLinear) -> Tensor:
    return q.forward(x)


def roundtrip_error_bound(q: QuantizedLinear) -> np.ndarray:
    """Per-block analytic bound on max element error.

    |c*a' - v| <= a_true*g_max/2 + |a' - a_true|, with a_true <= a' + dq_err
    and dq_err = group_scale/510, so the bound is (a'+dq_err)*g_max/2 + dq_err.
    Both terms are computed from the stored metadata, not assumed.
    """
    absmaxes = q.absmaxes()
    groups = np.arange(q.n_blocks) // q.dq_group_size
    dq_err = q.group_scales[groups] / 510.0
    return (absmaxes + dq_err) * (CODEBOOK_MAX_GAP / 2.0) + dq_err
