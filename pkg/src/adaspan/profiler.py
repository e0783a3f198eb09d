"""Analytic cost model for one-step prediction and span statistics.

A multiply-accumulate counts as 2 FLOPs.  Per layer the feedforward costs
``2 * 2 * d_model * d_ff``, the four projections ``2 * 4 * d_model**2``, and
each head pays ``span * (2*d_head + 2*d_head + 2*d_head + 5)``: content
score, position score, value mix, and a flat 5 for mask and softmax.
Adaptive and dynamic heads are charged their effective span, fixed heads
the full limit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerLM
from .span import effective_span
from .tensor import no_grad

SOFTMAX_FLOPS = 5


@dataclass
class CostReport:
    components: dict[str, float]
    layer_windows: list[int]
    memory_bytes: list[int]

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))

    @property
    def shares(self) -> dict[str, float]:
        total = self.total
        return {k: v / total for k, v in self.components.items()}

    @property
    def attention_flops(self) -> float:
        return self.components["attention_scores"] + self.components["attention_output"]

    @property
    def attention_share(self) -> float:
        return self.attention_flops / self.total

    @property
    def feedforward_share(self) -> float:
        return self.components["feedforward"] / self.total

    @property
    def total_memory_bytes(self) -> int:
        return int(sum(self.memory_bytes))


def head_windows(config: ModelConfig, spans=None) -> np.ndarray:
    """Attended positions per head, ``[n_layers, heads]``."""
    shape = (config.n_layers, config.heads)
    if config.span_kind == "fixed":
        return np.full(shape, config.span_limit, dtype=np.int64)
    z = np.zeros(shape) if spans is None else np.broadcast_to(np.asarray(spans, dtype=float), shape)
    return np.asarray(effective_span(z, config.mask), dtype=np.int64).reshape(shape)


def flops_one_step(config: ModelConfig, spans=None, layer_max: bool = False) -> CostReport:
    """FLOPS to predict one token given the current spans.

    ``spans`` is ``[n_layers, heads]`` span values (ignored for fixed-span
    models; defaults to all zeros).  With ``layer_max`` every head of a layer
    is charged the layer's largest window, as when heads are computed
    together.
    """
    d, dff, dk, V = config.d_model, config.d_ff, config.d_head, config.vocab_size
    windows = head_windows(config, spans)
    if layer_max:
        windows = np.repeat(windows.max(axis=1, keepdims=True), config.heads, axis=1)
    attended = float(windows.sum())
    components = {
        "attention_scores": attended * (2 * dk + 2 * dk + SOFTMAX_FLOPS),
        "attention_output": attended * 2 * dk,
        "projections": config.n_layers * 2.0 * 4 * d * d,
        "feedforward": config.n_layers * 2.0 * (d * dff + dff * d),
        "output": 2.0 * d * V,
    }
    elem = config.np_dtype.itemsize
    layer_max_windows = [int(w) for w in windows.max(axis=1)]
    memory = [w * d * elem for w in layer_max_windows]
    return CostReport(components, layer_max_windows, memory)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count of :class:`TransformerLM` for ``config``."""
    d, dff, V, M, S = config.d_model, config.d_ff, config.vocab_size, config.heads, config.span_limit
    positions = S * config.d_head
    per_layer = 4 * d * d + 2 * d + 2 * d + d * dff + dff + dff * d + d
    if config.span_kind == "adaptive":
        per_layer += M
    elif config.span_kind == "dynamic":
        per_layer += M * (d + 1)
    if not config.share_positions:
        per_layer += positions
    total = V * d + config.n_layers * per_layer + 2 * d + d * V + V
    if config.share_positions:
        total += positions
    return total


@dataclass
class SpanReport:
    spans: np.ndarray  # [n_layers, heads]
    span_limit: int
    trace_positions: list[int] = field(default_factory=list)
    trace_chars: list[str] = field(default_factory=list)
    trace_mean_span: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(self.spans.mean())

    @property
    def layer_max(self) -> np.ndarray:
        return self.spans.max(axis=1)


def span_stats(model: TransformerLM, tokens=None, symbols=None) -> SpanReport:
    """Per-head spans; for dynamic models also the per-position span trace.

    Dynamic models need ``tokens``: their per-head span is the mean of
    ``z_t`` over the input, and the trace averages ``z_t`` over layers and
    heads at each position.
    """
    cfg = model.config
    if cfg.span_kind != "dynamic":
        return SpanReport(model.head_spans(), cfg.span_limit)
    if tokens is None:
        raise ValueError("dynamic span statistics need an input sequence")
    tokens = np.asarray(tokens).reshape(-1)
    states = model.init_states()
    per_layer = [[] for _ in model.blocks]
    with no_grad():
        for lo in range(0, len(tokens), cfg.block):
            model.forward(tokens[None, lo:lo + cfg.block], states, training=False)
            for i, blk in enumerate(model.blocks):
                per_layer[i].append(blk.attn.last_spans[0])  # [heads, T]
    z = np.stack([np.concatenate(chunks, axis=1) for chunks in per_layer])  # [L, M, N]
    trace = z.mean(axis=(0, 1))
    chars = [symbols[int(t)] for t in tokens] if symbols is not None else [str(int(t)) for t in tokens]
    return SpanReport(z.mean(axis=2), cfg.span_limit, list(range(len(tokens))), chars,
                      [float(v) for v in trace])


def model_flops(model: TransformerLM, report: SpanReport | None = None, layer_max: bool = False) -> CostReport:
    report = report or span_stats(model)
    return flops_one_step(model.config, report.spans, layer_max)


# -- CSV export ---------------------------------------------------------------

def write_spans_csv(report: SpanReport, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "span"])
        for layer, row in enumerate(report.spans):
            for head, z in enumerate(row):
                w.writerow([layer, head, repr(float(z))])


def write_flops_csv(report: CostReport, path) -> None:
    shares = report.shares
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "flops", "share"])
        for name, flops in report.components.items():
            w.writerow([name, repr(float(flops)), repr(shares[name])])


def write_trace_csv(report: SpanReport, path) -> None:
    if not report.trace_positions:
        raise ValueError("span report carries no dynamic trace")
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "char", "mean_span"])
        for pos, ch, z in zip(report.trace_positions, report.trace_chars, report.trace_mean_span):
            w.writerow([pos, ch, repr(z)])
