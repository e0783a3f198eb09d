"""Sequential character-level transformer with adaptive-span attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import SPAN_KINDS, AttentionLayer, AttentionLayerState
from .span import MaskConfig, default_penalty, span_penalty
from .tensor import (Tensor, add, concat, cross_entropy, dropout, embedding,
                     layer_norm, matmul, relu)

LN2 = math.log(2.0)


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 2
    span_limit: int = 64
    ramp: int = 8
    span_kind: str = "adaptive"
    vocab_size: int = 27
    dropout: float = 0.0
    block: int = 64
    penalty: float | None = None
    share_positions: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.penalty is None:
            self.penalty = default_penalty(self.span_limit)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        base = dict(n_layers=12, d_model=512, d_ff=2048, heads=8, span_limit=8192, ramp=32,
                    dropout=0.3, block=512)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        base = dict(n_layers=24, d_model=768, d_ff=4096, heads=8, span_limit=8192, ramp=32,
                    dropout=0.4, block=512)
        base.update(overrides)
        return cls(**base)

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def mask(self) -> MaskConfig:
        return MaskConfig(self.ramp, self.span_limit, self.penalty, self.heads)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first offending field."""
        for name in ("n_layers", "d_model", "d_ff", "heads", "span_limit", "ramp", "vocab_size", "block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.span_kind not in SPAN_KINDS:
            raise ValueError(f"span_kind must be one of {SPAN_KINDS}, got {self.span_kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        MaskConfig(self.ramp, self.span_limit, self.penalty, self.heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            kwargs[key] = _coerce(known[key].type, raw)
        return cls(**kwargs)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return raw
    t = str(type_name)
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return None if raw in ("None", "") else float(raw)
    if t.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


@dataclass
class Block:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionLayer
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def attn_parameters(self) -> list[Tensor]:
        return [self.ln1_gain, self.ln1_bias] + self.attn.parameters()

    def ff_parameters(self) -> list[Tensor]:
        return [self.ln2_gain, self.ln2_bias, self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2]


def _param(data, name):
    return Tensor(data, requires_grad=True, dtype=data.dtype, name=name)


class TransformerLM:
    """Token embedding, pre-norm attention/feedforward blocks, untied output layer."""

    def __init__(self, config: ModelConfig, embed: Tensor, positions: Tensor | None,
                 blocks: list[Block], lnf_gain: Tensor, lnf_bias: Tensor,
                 out_w: Tensor, out_b: Tensor):
        self.config = config
        self.embed = embed
        self.positions = positions
        self.blocks = blocks
        self.lnf_gain = lnf_gain
        self.lnf_bias = lnf_bias
        self.out_w = out_w
        self.out_b = out_b

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "TransformerLM":
        config.validate()
        dt = config.np_dtype
        d, dff, V = config.d_model, config.d_ff, config.vocab_size
        embed = _param(rng.standard_normal((V, d)).astype(dt), "embed")
        positions = None
        if config.share_positions:
            positions = _param(rng.standard_normal((config.span_limit, config.d_head)).astype(dt), "positions")
        blocks = []
        for i in range(config.n_layers):
            p = f"layers.{i}."
            attn = AttentionLayer.init(d, config.heads, config.span_kind, config.mask, rng, dt,
                                       config.dropout, own_positions=not config.share_positions,
                                       prefix=p + "attn.")
            b1, b2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(dff)
            blocks.append(Block(
                _param(np.ones(d, dt), p + "ln1.gain"), _param(np.zeros(d, dt), p + "ln1.bias"),
                attn,
                _param(np.ones(d, dt), p + "ln2.gain"), _param(np.zeros(d, dt), p + "ln2.bias"),
                _param(rng.uniform(-b1, b1, (d, dff)).astype(dt), p + "ff.w1"),
                _param(rng.uniform(-b1, b1, dff).astype(dt), p + "ff.b1"),
                _param(rng.uniform(-b2, b2, (dff, d)).astype(dt), p + "ff.w2"),
                _param(rng.uniform(-b2, b2, d).astype(dt), p + "ff.b2"),
            ))
        bo = 1.0 / math.sqrt(d)
        return cls(config, embed, positions, blocks,
                   _param(np.ones(d, dt), "final_ln.gain"), _param(np.zeros(d, dt), "final_ln.bias"),
                   _param(rng.uniform(-bo, bo, (d, V)).astype(dt), "output.w"),
                   _param(rng.uniform(-bo, bo, V).astype(dt), "output.b"))

    # -- parameter bookkeeping ------------------------------------------------
    def modules(self) -> dict[str, list[Tensor]]:
        """Parameter groups used for per-module gradient clipping."""
        groups = {"embedding": [self.embed] + ([self.positions] if self.positions is not None else [])}
        for i, blk in enumerate(self.blocks):
            groups[f"layers.{i}.attn"] = blk.attn_parameters()
            groups[f"layers.{i}.ff"] = blk.ff_parameters()
        groups["output"] = [self.lnf_gain, self.lnf_bias, self.out_w, self.out_b]
        return groups

    def parameters(self) -> list[Tensor]:
        return [p for group in self.modules().values() for p in group]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise RuntimeError("duplicate parameter names")
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def project_spans(self) -> None:
        for blk in self.blocks:
            if blk.attn.span is not None:
                blk.attn.span.project()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def init_states(self) -> list[AttentionLayerState]:
        return [AttentionLayerState() for _ in self.blocks]

    def cache_keep(self, layer: int) -> int:
        """Tokens of hidden state a layer keeps for the next block."""
        window = self.blocks[layer].attn.static_window()
        block = self.config.block
        return -(-window // block) * block

    def head_spans(self) -> np.ndarray:
        """Current static span per head, ``[n_layers, heads]`` (fixed: the limit)."""
        out = np.full((len(self.blocks), self.config.heads), float(self.config.span_limit))
        for i, blk in enumerate(self.blocks):
            if self.config.span_kind == "adaptive":
                out[i] = blk.attn.span.values()
        return out

    # -- computation --------------------------------------------------------
    def forward(self, tokens, states: list[AttentionLayerState] | None = None,
                rng: np.random.Generator | None = None, training: bool = False):
        """Next-token logits ``[batch, block, vocab]`` for ``tokens`` ``[batch, block]``.

        ``states`` (one per layer) supply cached context and are advanced in
        place.  Returns ``(logits, spans)`` where ``spans`` lists the span
        tensors that the penalty acts on.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)].reshape(-1)[0]
            raise ValueError(f"token id {int(bad)} out of range for vocab_size={cfg.vocab_size}")
        if states is None:
            states = self.init_states()
        B, T = tokens.shape
        h = embedding(self.embed, tokens)
        spans = []
        for i, (blk, state) in enumerate(zip(self.blocks, states)):
            cache_len = state.length
            if cache_len:
                ctx = concat([Tensor(state.cache), h], axis=1)
            else:
                ctx = h
            normed = layer_norm(ctx, blk.ln1_gain, blk.ln1_bias)
            att, z = blk.attn.forward(normed, cache_len, self.positions, rng, training)
            if z is not None:
                spans.append(z)
            state.advance(ctx.data, self.cache_keep(i))
            h = add(h, att)
            f = layer_norm(h, blk.ln2_gain, blk.ln2_bias)
            f = relu(add(matmul(f, blk.ff_w1), blk.ff_b1))
            f = dropout(f, cfg.dropout, rng, training)
            h = add(h, add(matmul(f, blk.ff_w2), blk.ff_b2))
        h = layer_norm(h, self.lnf_gain, self.lnf_bias)
        logits = add(matmul(h, self.out_w), self.out_b)
        return logits, spans

    def penalty(self, spans: list[Tensor]) -> Tensor | None:
        if not spans or self.config.penalty == 0:
            return None
        return span_penalty(spans, self.config.mask)

    def loss(self, logits: Tensor, targets, spans: list[Tensor] | None = None, weights=None):
        """Mean NLL in nats plus the span penalty.  Returns ``(loss, nll)``."""
        nll = cross_entropy(logits, np.asarray(targets), weights)
        pen = self.penalty(spans or [])
        total = nll if pen is None else add(nll, pen)
        return total, float(nll.data)


def init(config: ModelConfig, rng: np.random.Generator) -> TransformerLM:
    return TransformerLM.init(config, rng)


def bpc(nll_nats: float) -> float:
    """Bits per character from a per-character NLL in nats."""
    return nll_nats / LN2
