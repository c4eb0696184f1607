"""Desk-scale training-free detector optimization hierarchy."""

__version__ = "0.1.0"

from .tensors import (  # noqa: F401
    FP16_MAX,
    PrecisionMode,
    ShapeError,
    Storage,
    Tensor,
    cosine_similarity,
    layernorm,
    matmul,
    rope_apply,
    round_fp16,
    softmax,
    tensor,
)
