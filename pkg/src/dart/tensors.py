"""Dense-tensor kernels with explicit half-precision emulation.

Values are always stored as float64 ("full") arrays; half precision is a
constraint applied by rounding, so a single kernel codebase serves every
mode.  Two half modes are emulated:

* ``FP16_ACCUM_FP32``: inputs and outputs are rounded to binary16 but
  inner products accumulate in full precision (the accumulation-safe
  fused-kernel discipline).
* ``FP16_ACCUM_FP16``: every multiply and every partial sum is rounded
  to binary16, left to right over the inner dimension (the generic
  half-precision kernel discipline).

All rounding is IEEE round-to-nearest-even with saturation at the
binary16 max finite value; subnormals are kept.  Every operation is a
pure function of its inputs and is bitwise deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

FP16_MAX = 65504.0


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class PrecisionMode(Enum):
    """Arithmetic discipline applied by the kernels."""

    FP32 = "fp32"
    FP16_ACCUM_FP32 = "fp16-accum-fp32"
    FP16_ACCUM_FP16 = "fp16-accum-fp16"

    @property
    def is_half(self) -> bool:
        return self is not PrecisionMode.FP32


class Storage(Enum):
    """Storage constraint recorded on a tensor's values."""

    FULL = "full"
    FP16 = "fp16"


def half_round(a: np.ndarray) -> np.ndarray:
    """Round every element to its binary16 value, kept in float64.

    Round-to-nearest-even; magnitudes past the binary16 max finite value
    saturate instead of producing inf.  NaN passes through.
    """
    clipped = np.clip(np.asarray(a, dtype=np.float64), -FP16_MAX, FP16_MAX)
    return clipped.astype(np.float16).astype(np.float64)


def mode_round(a: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    """Apply the mode's storage rounding (identity under FP32)."""
    return half_round(a) if mode.is_half else np.asarray(a, dtype=np.float64)


@dataclass(frozen=True)
class Tensor:
    """Immutable dense array with a storage-precision tag.

    ``data`` is float64 and row-major regardless of the tag; a ``FP16``
    tag asserts every element round-trips through binary16 unchanged.
    ``overflow`` records whether any element saturated while rounding.
    """

    data: np.ndarray
    precision: Storage = Storage.FULL
    overflow: bool = False

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def check_storage(self) -> bool:
        """True iff the values satisfy the storage tag's constraint."""
        if self.precision is Storage.FULL:
            return True
        return np.array_equal(half_round(self.data), self.data)


def tensor(values, precision: Storage = Storage.FULL) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), precision)


def round_fp16(x: Tensor) -> Tensor:
    """Round a tensor to binary16 storage.

    Magnitudes above the binary16 max finite value saturate to +/- max
    finite and set the overflow flag.  Idempotent: rounding an already
    rounded tensor is a bitwise no-op.
    """
    data = np.asarray(x.data, dtype=np.float64)
    overflowed = bool(np.any(np.abs(data) > FP16_MAX))
    return Tensor(half_round(data), Storage.FP16, overflow=x.overflow or overflowed)


def _matmul_accum_fp16_saturating(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference binary16 accumulation, saturating at every step.

    Inputs must already be binary16-valued (pre-rounded by the caller).
    """
    k = a.shape[-1]
    acc = half_round(a[..., :, 0, None] * b[..., None, 0, :])
    for i in range(1, k):
        prod = half_round(a[..., :, i, None] * b[..., None, i, :])
        acc = half_round(acc + prod)
    return acc


def _matmul_accum_fp16(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Left-to-right binary16 accumulation over the inner dimension.

    Inputs must already be binary16-valued.  Rounds after every multiply
    and every add; the fixed order is what makes the emulated error
    deterministic (and worst-case-ish: no pairwise tree to cancel
    rounding).

    Fast path carries binary16 values in float32: a product of two
    binary16 numbers is exact in float32, and rounding an exact sum of
    two binary16 numbers through float32 equals rounding it directly
    (24 >= 2*11 + 2 significand bits), so this is bitwise identical to
    a scalar half-precision loop.  Saturation cannot be expressed here
    (overflow becomes inf), so any non-finite result falls back to the
    saturating reference.
    """
    prods = a.astype(np.float32)[..., :, :, None] * b.astype(np.float32)[..., None, :, :]
    with np.errstate(over="ignore", invalid="ignore"):
        prods = prods.astype(np.float16).astype(np.float32)
        acc = prods[..., 0, :]
        for i in range(1, prods.shape[-2]):
            acc = (acc + prods[..., i, :]).astype(np.float16).astype(np.float32)
    out = acc.astype(np.float64)
    if not np.all(np.isfinite(out)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b)):
        return _matmul_accum_fp16_saturating(a, b)
    return out


def matmul_nd(a: np.ndarray, b: np.ndarray, mode: PrecisionMode) -> np.ndarray:
    """Array-level matmul under a precision mode (see :func:`matmul`)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from exc
    if mode is PrecisionMode.FP32:
        return np.matmul(a, b)
    ah = half_round(a)
    bh = half_round(b)
    if mode is PrecisionMode.FP16_ACCUM_FP32:
        return half_round(np.matmul(ah, bh))
    return _matmul_accum_fp16(ah, bh)


def matmul(a: Tensor, b: Tensor, mode: PrecisionMode) -> Tensor:
    """Batched matrix product with the mode's accumulation discipline."""
    out = matmul_nd(a.data, b.data, mode)
    return Tensor(out, Storage.FP16 if mode.is_half else Storage.FULL)


def _sum_accum_fp16(a: np.ndarray) -> np.ndarray:
    """Binary16 running sum along the last axis, left to right."""
    acc = half_round(a[..., 0])
    for i in range(1, a.shape[-1]):
        acc = half_round(acc + a[..., i])
    return acc[..., None]


def softmax_nd(x: np.ndarray, axis: int, mode: PrecisionMode) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ShapeError("softmax along an empty axis is undefined")
    if mode is PrecisionMode.FP32:
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)
    xh = half_round(x)
    shifted = half_round(xh - np.max(xh, axis=axis, keepdims=True))
    e = half_round(np.exp(shifted))
    if mode is PrecisionMode.FP16_ACCUM_FP32:
        s = half_round(np.sum(e, axis=axis, keepdims=True))
    else:
        moved = np.moveaxis(e, axis, -1)
        s = np.moveaxis(_sum_accum_fp16(moved), -1, axis)
    return half_round(e / s)


def softmax(x: Tensor, axis: int, mode: PrecisionMode) -> Tensor:
    """Max-subtracted exponential normalization along ``axis``."""
    out = softmax_nd(x.data, axis, mode)
    return Tensor(out, Storage.FP16 if mode.is_half else Storage.FULL)


def layernorm_nd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if eps <= 0:
        raise ValueError(f"layernorm eps must be positive, got {eps}")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match last axis {x.shape[-1]}"
        )
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-row zero-mean unit-variance normalization with affine output."""
    return Tensor(layernorm_nd(x.data, gamma.data, beta.data, eps))


def rope_nd(x: np.ndarray, cos_table: np.ndarray, sin_table: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cos_table = np.asarray(cos_table, dtype=np.float64)
    sin_table = np.asarray(sin_table, dtype=np.float64)
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rope needs an even channel count, got {x.shape[-1]}")
    pairs = x.shape[-1] // 2
    expected = (x.shape[-2], pairs)
    if cos_table.shape != expected or sin_table.shape != expected:
        raise ShapeError(
            f"rope tables {cos_table.shape}/{sin_table.shape} do not match tokens x pairs {expected}"
        )
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos_table - odd * sin_table
    out[..., 1::2] = even * sin_table + odd * cos_table
    return out


def rope_apply(q_or_k: Tensor, cos_table: Tensor, sin_table: Tensor) -> Tensor:
    """Planar rotation of channel pairs by tabulated 2D position angles."""
    return Tensor(rope_nd(q_or_k.data, cos_table.data, sin_table.data))


def cosine_similarity(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """Cosine of the angle between the flattened operands, full precision."""
    av = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    bv = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ShapeError(f"cosine_similarity shapes disagree: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(av, bv) / (na * nb))
