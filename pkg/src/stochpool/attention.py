"""Scaled dot-product attention and its query / key-value pooled variant.

The pooled form shrinks the attention computation without touching any
parameters: queries are mean-pooled by ``s_q`` and keys/values jointly by
``s_k`` before the usual softmax(Q K^T / sqrt(d)) V, and the result is
replicate-upsampled back to the original query length. With both factors
at 1 the computation is bit-identical to plain attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .pooling import downsample, masked_downsample, upsample
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    mac_scope,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class PoolFactors:
    """Per-layer pooling factors: s_q for queries, s_k for keys and values."""

    s_q: int = 1
    s_k: int = 1

    def __post_init__(self):
        if self.s_q < 1 or self.s_k < 1:
            raise ConfigError(f"pooling factors must be >= 1, got ({self.s_q}, {self.s_k})")


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices for multi-head attention over width E.

    All four are E x E; heads split the projected width, so the parameter
    count is independent of any pooling factors.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        e = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (e, e):
                raise ShapeError(f"{name} must be square E x E, got {w.shape}")
        if self.heads < 1 or e % self.heads:
            raise ConfigError(f"model width {e} must be divisible by heads={self.heads}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def _mask_bias(mask: np.ndarray, dtype) -> Tensor:
    bias = np.where(mask, 0.0, -np.inf).astype(dtype)
    return Tensor(bias)


def attend(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with optional key-validity masking.

    Masked keys receive -inf logits and thus zero weight. It is an error
    for every key to be masked: the attention distribution would be
    undefined.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attend requires 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value lengths disagree: {k.shape} vs {v.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (k.shape[0],):
            raise ShapeError(f"key mask must have shape ({k.shape[0]},), got {mask.shape}")
        if not mask.any():
            raise InputError("all attention keys are masked; distribution undefined")
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None and not mask.all():
        logits = add(logits, _mask_bias(mask, logits.dtype))
    return matmul(softmax_rows(logits), v)


def pooled_attend(q, k, v, factors: PoolFactors, mask=None) -> Tensor:
    """Attention over pooled queries/keys/values, upsampled back to len(q).

    Keys and values share the pooling factor so they stay aligned. When a
    mask is given, a pooled key is valid iff any source key in its window
    is, and its value is the partial mean over just the valid rows.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[0]
    if factors.s_q > 1:
        q = downsample(q, factors.s_q)
    if factors.s_k > 1:
        if mask is not None:
            k, pooled_mask = masked_downsample(k, factors.s_k, mask)
            v, _ = masked_downsample(v, factors.s_k, mask)
            mask = pooled_mask
        else:
            k = downsample(k, factors.s_k)
            v = downsample(v, factors.s_k)
    out = attend(q, k, v, mask)
    if factors.s_q > 1:
        out = upsample(out, factors.s_q, truncate_to=n)
    return out


def multi_head_pooled(x, params: AttentionParams, factors: PoolFactors, mask=None) -> Tensor:
    """Multi-head attention over x with pooling applied after projection.

    Pooling acts on the full projected Q/K/V matrices before the head
    split; since it only touches the time axis this is equivalent to
    pooling each head separately.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.model_dim:
        raise ShapeError(f"input width must be {params.model_dim}, got shape {x.shape}")
    n = x.shape[0]
    with mac_scope("attn_proj"):
        q = matmul(x, params.w_q)
        k = matmul(x, params.w_k)
        v = matmul(x, params.w_v)
    if factors.s_q > 1:
        q = downsample(q, factors.s_q)
    if factors.s_k > 1:
        if mask is not None:
            k, pooled_mask = masked_downsample(k, factors.s_k, mask)
            v, _ = masked_downsample(v, factors.s_k, mask)
            mask = pooled_mask
        else:
            k = downsample(k, factors.s_k)
            v = downsample(v, factors.s_k)
    dk = params.head_dim
    heads = []
    with mac_scope("attn_scores"):
        for h in range(params.heads):
            lo, hi = h * dk, (h + 1) * dk
            heads.append(attend(slice_cols(q, lo, hi),
                                slice_cols(k, lo, hi),
                                slice_cols(v, lo, hi),
                                mask))
    out = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    if factors.s_q > 1:
        out = upsample(out, factors.s_q, truncate_to=n)
    with mac_scope("attn_proj"):
        return matmul(out, params.w_o)
