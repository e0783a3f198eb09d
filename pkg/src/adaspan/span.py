"""Soft span masking, span parameters and the L1 span penalty.

A head with span ``z`` weighs a past position at distance ``x`` by

    m_z(x) = clip((R + z - x) / R, 0, 1)

which is 1 up to ``z``, ramps linearly to 0 over ``R`` tokens and is exactly
0 from ``z + R`` on.  Because the ramp is linear in ``z`` the span is
learnable by gradient descent; an L1 term on the spans keeps them short
unless the data pays for the extra context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, _unbroadcast, add, clamp, make_op, matmul, scale, sigmoid

MASK_EPS = 1e-8


@dataclass(frozen=True)
class MaskConfig:
    """Shape of the soft mask and strength of the span penalty.

    ``ramp`` is the softness ``R`` in tokens, ``span_limit`` the hard limit
    ``S``, ``penalty`` the coefficient lambda and ``heads`` the number of
    heads per layer that normalises it.
    """

    ramp: int = 32
    span_limit: int = 512
    penalty: float = 2e-6
    heads: int = 8

    def __post_init__(self):
        if self.ramp < 1 or self.span_limit < 1:
            raise ValueError(f"ramp and span_limit must be >= 1, got R={self.ramp}, S={self.span_limit}")
        if self.ramp > self.span_limit:
            raise ValueError(f"ramp R={self.ramp} exceeds span limit S={self.span_limit}")
        if self.penalty < 0:
            raise ValueError(f"span penalty must be nonnegative, got {self.penalty}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")


def default_penalty(span_limit: int) -> float:
    """Penalty coefficient used for a given span limit (smaller at S=8192)."""
    return 0.5e-6 if span_limit >= 8192 else 2e-6


def _check_span(z, cfg: MaskConfig) -> None:
    z = np.asarray(z)
    if np.any(z < 0) or np.any(z > cfg.span_limit):
        raise ValueError(f"span value outside [0, {cfg.span_limit}]: {z.min()}..{z.max()}")


def soft_mask(x, z, cfg: MaskConfig):
    """Mask value at distance ``x`` for span ``z``.

    Works on plain numbers/arrays, or on tensors when ``z`` is a
    :class:`Tensor` (the result then carries the gradient 1/R on the ramp).
    """
    zval = z.data if isinstance(z, Tensor) else z
    _check_span(zval, cfg)
    if np.any(np.asarray(x) < 0):
        raise ValueError("mask distance must be nonnegative")
    R = cfg.ramp
    if isinstance(z, Tensor):
        offset = np.asarray(R - np.asarray(x), dtype=z.dtype)
        return clamp(scale(add(z, offset), 1.0 / R), 0.0, 1.0)
    return np.clip((R + np.asarray(zval, dtype=float) - np.asarray(x, dtype=float)) / R, 0.0, 1.0)


def effective_span(z, cfg: MaskConfig):
    """Smallest attention window outside which the mask is exactly zero."""
    _check_span(z, cfg)
    if np.ndim(z) == 0:
        return int(min(cfg.span_limit, math.ceil(float(z)) + cfg.ramp))
    return np.minimum(cfg.span_limit, np.ceil(np.asarray(z)).astype(np.int64) + cfg.ramp)


def masked_attention_weights(scores: Tensor, mask: Tensor | np.ndarray,
                             valid: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with each term multiplied by its mask value.

    ``valid`` marks positions that exist at all (context before the start of
    the sequence does not); invalid positions get weight 0 and no gradient.
    When the masked denominator vanishes the weight is spread uniformly over
    the valid positions with the largest mask value, with zero gradient.
    """
    mask_t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=scores.dtype))
    s, m = scores.data, mask_t.data
    if s.shape[-1] != m.shape[-1]:
        raise ValueError(f"scores and mask lengths differ: {s.shape} vs {m.shape}")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    m = np.broadcast_to(m, s.shape)
    live = m > 0
    if valid is not None:
        live = live & valid
    # shifting by max(s + log m) keeps the largest term at exactly 1
    with np.errstate(divide="ignore"):
        logm = np.where(live, np.log(np.where(live, m, 1)), -np.inf)
    shifted = np.where(live, s + logm, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    w = np.where(live, np.exp(shifted - top), 0).astype(s.dtype)
    denom = w.sum(axis=-1, keepdims=True)
    degenerate = denom <= MASK_EPS
    safe = np.where(degenerate, 1, denom)
    out = w / safe
    # d out / d m = exp(s - top) / denom, formed in log space
    with np.errstate(over="ignore"):
        e_over = np.where(live, np.exp(s - top - np.log(safe)), 0).astype(s.dtype)

    deg = None
    if np.any(degenerate):
        pool = np.broadcast_to(valid, s.shape) if valid is not None else np.ones(s.shape, bool)
        mpool = np.where(pool, m, -1.0)
        best = pool & (mpool == mpool.max(axis=-1, keepdims=True))
        count = best.sum(axis=-1, keepdims=True)
        uniform = np.where(count > 0, best / np.maximum(count, 1), 0).astype(s.dtype)
        deg = np.broadcast_to(degenerate, s.shape)
        out = np.where(deg, uniform, out)
        e_over = np.where(deg, 0, e_over)

    m_shape = mask_t.shape

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        centred = g - inner
        gs = None
        if scores.requires_grad:
            gs = out * centred if deg is None else np.where(deg, 0, out * centred)
        gm = None
        if mask_t.requires_grad:
            gm = e_over * centred
            gm = _unbroadcast(gm, m_shape)
        return gs, gm

    return make_op(out.astype(s.dtype, copy=False), (scores, mask_t), back)


def dynamic_span(x: Tensor, v: Tensor, b: Tensor, span_limit: int) -> Tensor:
    """Input-conditioned span ``S * sigmoid(x . v + b)``.

    ``x`` is ``[..., d_h]`` and ``v`` is ``[d_h]`` (one head) or
    ``[d_h, heads]``; ``b`` matches the head axis.
    """
    vv = v if v.ndim == 2 else v.reshape(v.shape[0], 1)
    logits = add(matmul(x if x.ndim >= 2 else x.reshape(1, x.shape[0]), vv), b)
    z = scale(sigmoid(logits), float(span_limit))
    if v.ndim == 1:
        z = z.reshape(z.shape[:-1]) if x.ndim >= 2 else z.reshape(())
    return z


def span_penalty(spans: Sequence[Tensor] | Tensor, cfg: MaskConfig) -> Tensor:
    """``(lambda / M) * sum_i z_i`` over every head of the model.

    Each entry of ``spans`` is a tensor of span values; for dynamic heads the
    caller passes the time-mean of ``z_t`` per head.
    """
    if isinstance(spans, Tensor):
        spans = [spans]
    total = None
    for z in spans:
        _check_span(z.data, cfg)
        part = z.sum()
        total = part if total is None else add(total, part)
    if total is None:
        return Tensor(0.0)
    return scale(total, cfg.penalty / cfg.heads)


@dataclass
class StaticSpan:
    """Learnable fraction ``z' in [0, 1]`` per head; the span is ``S * z'``."""

    fraction: Tensor
    span_limit: int

    @classmethod
    def init(cls, heads: int, span_limit: int, dtype=np.float64) -> "StaticSpan":
        return cls(Tensor(np.zeros(heads, dtype=dtype), requires_grad=True, name="span_fraction"),
                   span_limit)

    def spans(self) -> Tensor:
        return scale(self.fraction, float(self.span_limit))

    def values(self) -> np.ndarray:
        return self.span_limit * np.asarray(self.fraction.data, dtype=np.float64)

    def project(self) -> None:
        np.clip(self.fraction.data, 0.0, 1.0, out=self.fraction.data)

    def parameters(self) -> list[Tensor]:
        return [self.fraction]


@dataclass
class DynamicSpan:
    """Per-head projection ``(v, b)`` mapping the input at step t to a span."""

    weight: Tensor
    bias: Tensor
    span_limit: int

    @classmethod
    def init(cls, d_model: int, heads: int, span_limit: int, dtype=np.float64) -> "DynamicSpan":
        return cls(
            Tensor(np.zeros((d_model, heads), dtype=dtype), requires_grad=True, name="span_weight"),
            Tensor(np.full(heads, -4.0, dtype=dtype), requires_grad=True, name="span_bias"),
            span_limit,
        )

    def spans(self, x: Tensor) -> Tensor:
        return dynamic_span(x, self.weight, self.bias, self.span_limit)

    def project(self) -> None:
        pass

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]
