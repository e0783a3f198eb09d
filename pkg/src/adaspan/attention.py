"""Multi-head self-attention over the past with relative position embeddings.

A query at position t looks at keys r in [t - W, t) where W is the layer's
attention window (the largest effective span of its heads).  Scores are

    s_tr = q_t . (k_r + p_{t-r})

with ``p`` a table indexed by distance and shared by the heads.  To let a
block see further back than its own start, each layer keeps the hidden
states of the preceding tokens as a gradient-free cache.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .span import (DynamicSpan, MaskConfig, StaticSpan, effective_span,
                   masked_attention_weights)
from .tensor import (Tensor, clamp, dropout, matmul, scale, take_pairs,
                     transpose)

SPAN_KINDS = ("fixed", "adaptive", "dynamic")


class Band:
    """Index bookkeeping for a banded (query, distance) attention window.

    Context index ``c`` holds the cache followed by the block; query ``t`` of
    the block sits at ``cache_len + t``.  Band column ``j`` is distance
    ``j + 1``.  Pairs whose key would precede the context are invalid.
    """

    def __init__(self, block: int, cache_len: int, window: int):
        t = np.arange(block)[:, None]
        j = np.arange(window)[None, :]
        key = cache_len + t - 1 - j
        self.valid = key >= 0
        self.rows, self.cols = np.nonzero(self.valid)
        self.keys = key[self.rows, self.cols]
        self.block = block
        self.context = cache_len + block
        self.window = window
        self.distance = np.arange(1, window + 1)

    def gather(self, full: Tensor) -> Tensor:
        """[..., block, context] -> [..., block, window]"""
        return take_pairs(full, self.rows, self.keys, self.cols, self.window)

    def scatter(self, band: Tensor) -> Tensor:
        """[..., block, window] -> [..., block, context]"""
        return take_pairs(band, self.rows, self.cols, self.keys, self.context)


@functools.lru_cache(maxsize=64)
def band_for(block: int, cache_len: int, window: int) -> Band:
    return Band(block, cache_len, window)


@dataclass
class AttentionLayerState:
    """Detached hidden states of the tokens preceding the current block."""

    cache: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.cache is None else self.cache.shape[1]

    def advance(self, context: np.ndarray, keep: int) -> None:
        keep = min(keep, context.shape[1])
        self.cache = np.array(context[:, context.shape[1] - keep:]) if keep > 0 else None


@dataclass
class AttentionHead:
    """Projections of a single head, used by the per-head functional API."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    span: StaticSpan | DynamicSpan | None = None


def similarity_scores(x: Tensor, context: Tensor, head: AttentionHead, table: Tensor,
                      window: int, span_limit: int | None = None) -> Tensor:
    """Scores ``[block, window]`` of the block ``x`` against its trailing context.

    ``x`` must be the last ``len(x)`` rows of ``context``; column ``j`` is
    distance ``j + 1``.  Distances that reach before the context get score 0
    and are expected to be treated as absent by the caller.
    """
    span_limit = table.shape[0] if span_limit is None else span_limit
    if window < 1 or window > span_limit or window > table.shape[0]:
        raise ValueError(f"attention distances must lie in [1, {span_limit}], window={window}")
    T, L = x.shape[0], context.shape[0]
    band = band_for(T, L - T, window)
    q = matmul(x, head.w_q)
    k = matmul(context, head.w_k)
    content = band.gather(matmul(q, transpose(k)))
    pos = matmul(q, transpose(table[:window]))
    return content + pos * band.valid


def head_output(weights: Tensor, context: Tensor, head: AttentionHead) -> Tensor:
    """``y_t = sum_r a_tr W_v x_r`` for banded weights ``[block, window]``."""
    T, L = weights.shape[0], context.shape[0]
    band = band_for(T, L - T, weights.shape[1])
    return matmul(band.scatter(weights), matmul(context, head.w_v))


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AttentionLayer:
    """All heads of one layer plus the output projection."""

    d_model: int
    heads: int
    span_kind: str
    mask: MaskConfig
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    span: StaticSpan | DynamicSpan | None
    positions: Tensor | None = None  # own table; None means the caller passes a shared one
    dropout: float = 0.0
    last_window: int = field(default=0, repr=False)
    last_spans: np.ndarray | None = field(default=None, repr=False)
    last_weights: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def init(cls, d_model: int, heads: int, span_kind: str, mask: MaskConfig,
             rng: np.random.Generator, dtype=np.float64, dropout: float = 0.0,
             own_positions: bool = False, prefix: str = "") -> "AttentionLayer":
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        if span_kind not in SPAN_KINDS:
            raise ValueError(f"span_kind must be one of {SPAN_KINDS}, got {span_kind!r}")
        bound = 1.0 / np.sqrt(d_model)

        def proj(name):
            return Tensor(_uniform(rng, (d_model, d_model), bound, dtype), requires_grad=True,
                          name=prefix + name)

        w_q, w_k, w_v, w_o = proj("w_q"), proj("w_k"), proj("w_v"), proj("w_o")
        if span_kind == "adaptive":
            span = StaticSpan.init(heads, mask.span_limit, dtype)
        elif span_kind == "dynamic":
            span = DynamicSpan.init(d_model, heads, mask.span_limit, dtype)
        else:
            span = None
        if span is not None:
            for param in span.parameters():
                param.name = prefix + param.name
        positions = None
        if own_positions:
            positions = Tensor(rng.standard_normal((mask.span_limit, d_model // heads)).astype(dtype),
                               requires_grad=True, name=prefix + "positions")
        return cls(d_model, heads, span_kind, mask, w_q, w_k, w_v, w_o, span, positions, dropout)

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def parameters(self) -> list[Tensor]:
        params = [self.w_q, self.w_k, self.w_v, self.w_o]
        if self.span is not None:
            params += self.span.parameters()
        if self.positions is not None:
            params.append(self.positions)
        return params

    def head(self, i: int) -> AttentionHead:
        """Column slice of head ``i`` (a view for inspection, not a parameter)."""
        sl = slice(i * self.d_head, (i + 1) * self.d_head)
        return AttentionHead(Tensor(self.w_q.data[:, sl]), Tensor(self.w_k.data[:, sl]),
                             Tensor(self.w_v.data[:, sl]))

    def static_window(self) -> int:
        """Window implied by the current parameters (dynamic heads: the limit)."""
        if self.span_kind == "adaptive":
            return int(np.max(effective_span(self.span.values().clip(0, self.mask.span_limit), self.mask)))
        return self.mask.span_limit

    def forward(self, context: Tensor, cache_len: int, table: Tensor | None = None,
                rng: np.random.Generator | None = None, training: bool = False):
        """Attend from the block (the last rows of ``context``) into ``context``.

        ``context`` is ``[batch, cache_len + block, d_model]`` and already
        normalised.  Returns the layer output ``[batch, block, d_model]`` and
        the per-head span tensor that enters the penalty (``None`` for fixed
        spans).
        """
        table = self.positions if self.positions is not None else table
        if table is None:
            raise ValueError("no relative position table available")
        B, L, d = context.shape
        T = L - cache_len
        M, dk = self.heads, self.d_head
        S, R = self.mask.span_limit, self.mask.ramp

        x = context[:, cache_len:] if cache_len else context
        q = transpose(matmul(x, self.w_q).reshape(B, T, M, dk), (0, 2, 1, 3))
        k = transpose(matmul(context, self.w_k).reshape(B, L, M, dk), (0, 2, 1, 3))
        v = transpose(matmul(context, self.w_v).reshape(B, L, M, dk), (0, 2, 1, 3))

        penalty_spans = None
        if self.span_kind == "fixed":
            window = S
            z_values = np.full(M, float(S))
        elif self.span_kind == "adaptive":
            z = self.span.spans()
            z_values = np.asarray(z.data, dtype=np.float64)
            window = int(np.max(effective_span(z_values, self.mask)))
            penalty_spans = z
        else:
            z = transpose(self.span.spans(x), (0, 2, 1))  # [B, M, T]
            z_values = np.asarray(z.data, dtype=np.float64)
            window = int(np.max(effective_span(z_values, self.mask)))
            penalty_spans = z.mean(axis=(0, 2))
        window = max(1, min(window, L - 1))
        band = band_for(T, cache_len, window)

        scores = band.gather(matmul(q, transpose(k, (0, 1, 3, 2))))
        scores = scores + matmul(q, transpose(table[:window]))

        if self.span_kind == "fixed":
            weights = masked_attention_weights(scores, np.ones(window, dtype=scores.dtype), band.valid)
        else:
            offset = (R - band.distance).astype(scores.dtype)
            if self.span_kind == "adaptive":
                ramp_in = z.reshape(1, M, 1, 1) + offset
            else:
                ramp_in = z.reshape(B, M, T, 1) + offset
            mask = clamp(scale(ramp_in, 1.0 / R), 0.0, 1.0)
            weights = masked_attention_weights(scores, mask, band.valid)
        self.last_weights = weights.data
        weights = dropout(weights, self.dropout, rng, training)

        y = matmul(band.scatter(weights), v)  # [B, M, T, dk]
        y = transpose(y, (0, 2, 1, 3)).reshape(B, T, d)
        self.last_window = window
        self.last_spans = z_values
        return matmul(y, self.w_o), penalty_spans
