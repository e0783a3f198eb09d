"""Training loop: Adagrad with linear warm-up and per-module gradient clipping.

Each of ``batch`` streams reads its own contiguous shard of the training
split block by block, carrying the layer caches from one block to the next.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .corpus import CharCorpus, batcher
from .model import LN2, TransformerLM
from .tensor import backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = 0.07
    warmup_steps: int = 32000
    batch: int = 64
    clip: float = 0.03
    adagrad_eps: float = 1e-7
    steps: int = 600_000
    log_interval: int = 100
    eval_interval: int = 1000
    eval_blocks: int | None = None
    eval_batch: int | None = None
    finetune_steps: int = 0
    finetune_lr_factor: float = 0.1
    early_stop: bool = False
    patience: int = 3
    record_wall_time: bool = False

    def validate(self) -> None:
        for name in ("lr", "batch", "clip", "adagrad_eps", "steps", "log_interval", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 0 or self.finetune_steps < 0:
            raise ValueError("warmup_steps and finetune_steps must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Learning rate after ``step`` updates: linear ramp from 0, then constant."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(total)


def clip_module_grads(params, threshold: float) -> float:
    """Rescale the module's gradients to L2 norm ``threshold`` if above it.

    Returns the norm before clipping.
    """
    norm = grad_norm(params)
    if norm > threshold:
        _scale_grads(params, threshold / norm)
        # float32 rounding can leave the result a hair above the bound
        after = grad_norm(params)
        if after > threshold:
            _scale_grads(params, threshold / after * (1 - 1e-6))
    return norm


def _scale_grads(params, factor: float) -> None:
    for p in params:
        if p.grad is not None:
            p.grad *= p.grad.dtype.type(factor)


class Adagrad:
    """Per-coordinate Adagrad; the accumulator only ever grows."""

    def __init__(self, params, eps: float = 1e-7):
        self.params = list(params)
        self.eps = eps
        self.sums = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            acc = self.sums[id(p)]
            acc += g * g
            p.data -= (lr * g / (np.sqrt(acc) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        return {f"adagrad.{p.name}": self.sums[id(p)] for p in self.params}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.params:
            key = f"adagrad.{p.name}"
            if key in arrays:
                self.sums[id(p)][...] = arrays[key]


def adagrad_step(params, state: Adagrad, lr: float, model: TransformerLM | None = None) -> None:
    state.step(lr)
    if model is not None:
        model.project_spans()


def span_summary(model: TransformerLM) -> tuple[float, float]:
    """Mean and max current span over all heads."""
    if model.config.span_kind == "dynamic":
        vals = [blk.attn.last_spans for blk in model.blocks if blk.attn.last_spans is not None]
        if not vals:
            return 0.0, 0.0
        per_head = np.concatenate([v.mean(axis=(0, 2)) if v.ndim == 3 else v for v in vals])
        return float(per_head.mean()), float(per_head.max())
    spans = model.head_spans()
    return float(spans.mean()), float(spans.max())


def evaluate(model: TransformerLM, corpus: CharCorpus, split: str = "dev", batch: int = 8,
             block: int | None = None, max_blocks: int | None = None) -> float:
    """Mean NLL in nats per scored character, streaming with caches, no dropout."""
    block = block or model.config.block
    states = model.init_states()
    total, weight = 0.0, 0.0
    with no_grad():
        for k, (x, y, w) in enumerate(batcher(corpus, batch, block, split, with_scored=True)):
            if max_blocks is not None and k >= max_blocks:
                break
            logits, _ = model.forward(x, states, training=False)
            z = logits.data.astype(np.float64)
            z = z - z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
            total += float((nll * w).sum())
            weight += float(w.sum())
    if weight == 0:
        raise ValueError(f"split {split!r} has no scored positions")
    return total / weight


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    best_dev_bpc: float = math.inf
    steps: int = 0


def train(model: TransformerLM, corpus: CharCorpus, cfg: OptimConfig, seed: int = 0,
          out_dir: str | Path | None = None, start_step: int = 0,
          optimizer_state: dict[str, np.ndarray] | None = None,
          stop_when: Callable[[int, TransformerLM, dict], bool] | None = None,
          meta: dict | None = None) -> TrainResult:
    """Train ``model`` on the train split of ``corpus``.

    Writes ``log.jsonl`` plus ``best.ckpt``/``last.ckpt`` when ``out_dir`` is
    given.  ``stop_when`` is consulted after every evaluation and may end
    training early.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    opt = Adagrad(model.parameters(), cfg.adagrad_eps)
    if optimizer_state:
        opt.load_state(optimizer_state)
    groups = model.modules()
    block = model.config.block
    eval_batch = cfg.eval_batch or min(cfg.batch, 8)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "a" if start_step else "w")

    result = TrainResult(steps=start_step)
    main_steps, total_steps = cfg.steps, cfg.steps + cfg.finetune_steps
    stale, finetuning = 0, start_step >= main_steps
    meta = dict(meta or {})

    def batches():
        skip = start_step
        while True:
            states = model.init_states()
            for x, y in batcher(corpus, cfg.batch, block, "train"):
                if skip:
                    skip -= 1
                    continue
                yield states, x, y

    stream = batches()
    interval_loss, interval_n = 0.0, 0
    t0 = time.perf_counter()
    step = start_step
    try:
        while step < total_steps:
            states, x, y = next(stream)
            step += 1
            lr = lr_schedule(step, cfg)
            if finetuning:
                lr *= cfg.finetune_lr_factor
            try:
                logits, spans = model.forward(x, states, rng, training=True)
                loss, nll = model.loss(logits, y, spans)
                value = float(loss.data)
            except FloatingPointError:
                value = math.nan
            if not np.isfinite(value):
                # gradients still hold the previous step for the dump
                _diverged(out, step, lr, groups, value)
            model.zero_grad()
            backward(loss)
            for params in groups.values():
                clip_module_grads(params, cfg.clip)
            adagrad_step(model.parameters(), opt, lr, model)
            interval_loss += nll
            interval_n += 1

            do_eval = step % cfg.eval_interval == 0 or step == total_steps
            if step % cfg.log_interval == 0 or do_eval:
                mean_span, max_span = span_summary(model)
                rec = {
                    "step": step,
                    "loss_nats": interval_loss / interval_n,
                    "bpc": interval_loss / interval_n / LN2,
                    "lr": lr,
                    "mean_span": mean_span,
                    "max_span": max_span,
                    "wall_ms": (time.perf_counter() - t0) * 1000 if cfg.record_wall_time else None,
                }
                interval_loss, interval_n = 0.0, 0
                if do_eval:
                    dev = evaluate(model, corpus, "dev", eval_batch, block, cfg.eval_blocks) / LN2
                    rec["dev_bpc"] = dev
                    if dev < result.best_dev_bpc:
                        result.best_dev_bpc = dev
                        stale = 0
                        if out is not None:
                            checkpoint.save(out / "best.ckpt", model, {**meta, "step": step, "dev_bpc": repr(dev)})
                    else:
                        stale += 1
                result.records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                log.info("step %d loss %.4f bpc %.4f lr %.5f span %.1f/%.1f", step, rec["loss_nats"],
                         rec["bpc"], lr, mean_span, max_span)
                if do_eval:
                    if stop_when is not None and stop_when(step, model, rec):
                        break
                    if cfg.early_stop and not finetuning and stale >= cfg.patience:
                        log.info("dev bpc stalled for %d evals; entering fine-tune phase", stale)
                        main_steps = step
                        total_steps = step + cfg.finetune_steps
                if not finetuning and step >= main_steps and cfg.finetune_steps:
                    finetuning = True
    finally:
        if log_fh is not None:
            log_fh.close()
    result.steps = step
    if out is not None:
        checkpoint.save(out / "last.ckpt", model, {**meta, "step": step}, opt.state())
    return result


def _diverged(out: Path | None, step: int, lr: float, groups, loss: float) -> None:
    norms = {name: grad_norm(params) for name, params in groups.items()}
    info = {"step": step, "lr": lr, "loss": loss, "grad_norms": norms}
    if out is not None:
        (out / "diverged.json").write_text(json.dumps(info, indent=2))
    raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:g}); grad norms: {norms}")
