"""Command line: ``adaspan train | eval | profile | spans``.

Runs are described by a plain-text ``key = value`` file (``#`` comments)
whose keys are the model and optimizer fields plus ``data``, ``format``,
``data_limit``, ``synth_length``, ``seed`` and ``out``.  Flags override the
file.  The resolved configuration is written to ``<out>/config.txt`` before
training starts.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .corpus import TEXT8_SYMBOLS, CharCorpus, CorpusError, _alphabet, load, parse_synth
from .model import LN2, ModelConfig, TransformerLM
from .profiler import (flops_one_step, span_stats, write_flops_csv, write_spans_csv,
                       write_trace_csv)
from .trainer import OptimConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("adaspan")

MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
OPTIM_KEYS = {f.name: f for f in fields(OptimConfig)}
RUN_KEYS = {"data": str, "format": str, "data_limit": int, "synth_length": int, "seed": int, "out": str}
ALIASES = {"lambda": "penalty"}
RUN_DEFAULTS = {"format": "text8", "synth_length": 200_000, "seed": 0, "out": "run"}


class UsageError(Exception):
    """Bad configuration or arguments (exit code 2)."""


# -- configuration ------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + path.read_text(), source=str(path))
    except configparser.Error as err:
        raise UsageError(f"cannot parse {path}: {err}") from None
    return dict(parser["run"])


def _convert(key: str, raw):
    if raw is None or not isinstance(raw, str):
        return raw
    typ = RUN_KEYS.get(key)
    if typ is None:
        f = MODEL_KEYS.get(key) or OPTIM_KEYS[key]
        typ = str(f.type)
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if raw in ("None", "none", "") and "None" in name:
            return None
        if name.startswith("int"):
            return int(raw)
        if name.startswith("float"):
            return float(raw)
        if name.startswith("bool"):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes", "on")
    except ValueError:
        raise UsageError(f"config field {key!r} has invalid value {raw!r}") from None
    return raw


def resolve(file_values: dict[str, str], overrides: dict) -> dict:
    """Merge file values and flag overrides into typed settings."""
    merged = dict(RUN_DEFAULTS)
    for source in (file_values, overrides):
        for key, val in source.items():
            if val is None:
                continue
            key = ALIASES.get(key, key)
            if key not in MODEL_KEYS and key not in OPTIM_KEYS and key not in RUN_KEYS:
                raise UsageError(f"unknown config field {key!r}")
            merged[key] = _convert(key, val)
    return merged


def build_configs(settings: dict, corpus: CharCorpus | None) -> tuple[ModelConfig, OptimConfig]:
    model_kw = {k: v for k, v in settings.items() if k in MODEL_KEYS}
    if corpus is not None:
        if "vocab_size" in model_kw and model_kw["vocab_size"] != corpus.vocab_size:
            raise UsageError(f"vocab_size={model_kw['vocab_size']} does not match the corpus "
                             f"vocabulary of {corpus.vocab_size} symbols")
        model_kw["vocab_size"] = corpus.vocab_size
    try:
        mcfg = ModelConfig(**model_kw)
        mcfg.validate()
        ocfg = OptimConfig(**{k: v for k, v in settings.items() if k in OPTIM_KEYS})
        ocfg.validate()
    except (ValueError, TypeError) as err:
        raise UsageError(f"invalid configuration: {err}") from None
    return mcfg, ocfg


def version_string() -> str:
    rev = "unknown"
    with contextlib.suppress(OSError, subprocess.SubprocessError):
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            rev = out.stdout.strip()
    return f"{__version__}+{rev}"


def write_run_config(path: Path, settings: dict, mcfg: ModelConfig, ocfg: OptimConfig) -> None:
    lines = [f"# adaspan {version_string()}"]
    for key in sorted(RUN_KEYS):
        if key in settings:
            lines.append(f"{key} = {settings[key]}")
    for key, val in mcfg.to_dict().items():
        lines.append(f"{key} = {val}")
    for key, val in ocfg.to_dict().items():
        lines.append(f"{key} = {val}")
    path.write_text("\n".join(lines) + "\n")


# -- data -------------------------------------------------------------------

def load_corpus(settings: dict) -> CharCorpus:
    spec = settings.get("data")
    if not spec:
        raise UsageError("no data given (use --data or a 'data' config entry)")
    if spec.startswith("synth:"):
        try:
            corpus = parse_synth(spec, settings.get("synth_length", 200_000), settings.get("seed", 0))
        except CorpusError as err:
            raise UsageError(str(err)) from None
        limit = settings.get("data_limit")
        if limit is not None:
            corpus = CharCorpus(corpus.data[:limit], corpus.symbols, corpus.fractions,
                                None if corpus.scored is None else corpus.scored[:limit], corpus.name)
        return corpus
    path = Path(spec)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    try:
        return load(path, settings.get("format", "text8"), settings.get("data_limit"))
    except CorpusError as err:
        raise UsageError(f"{path}: {err}") from None


def data_meta(settings: dict, corpus: CharCorpus) -> dict:
    return {
        "data": settings["data"],
        "format": settings.get("format", "text8"),
        "data_limit": settings.get("data_limit"),
        "synth_length": settings.get("synth_length"),
        "data_seed": settings.get("seed", 0),
        "symbols": checkpoint.encode_symbols(corpus.symbols),
    }


def _meta_int(meta: dict, key: str):
    val = meta.get(key)
    return None if val in (None, "None", "") else int(val)


def symbols_for(config: ModelConfig, meta: dict | None = None) -> list[str]:
    if meta and meta.get("symbols"):
        return checkpoint.decode_symbols(meta["symbols"])
    if config.vocab_size == 27:
        return list(TEXT8_SYMBOLS)
    if config.vocab_size == 256:
        return [chr(i) for i in range(256)]
    return _alphabet(config.vocab_size)


# -- commands ---------------------------------------------------------------

def _overrides(args) -> dict:
    return {
        "data": args.data, "data_limit": args.data_limit, "seed": args.seed, "out": args.out,
        "span_kind": args.span_kind, "span_limit": args.span_limit, "penalty": args.penalty,
        "ramp": args.ramp, "steps": args.steps, "format": getattr(args, "format", None),
    }


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    settings = resolve(file_values, _overrides(args))
    out = Path(settings["out"])
    start_step, opt_state = 0, None
    if args.resume:
        ckpt = Path(args.resume)
        if ckpt.is_dir():
            ckpt = ckpt / "last.ckpt"
        if not ckpt.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    corpus = load_corpus(settings)
    mcfg, ocfg = build_configs(settings, corpus)
    meta = {**data_meta(settings, corpus), "seed": settings["seed"],
            "eval_batch": ocfg.eval_batch or min(ocfg.batch, 8), "eval_blocks": ocfg.eval_blocks}
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, ck_meta, extra = checkpoint.load(ckpt)
        if model.config != mcfg:
            raise UsageError(_config_mismatch(model.config, mcfg))
        start_step = int(ck_meta.get("step", 0))
        opt_state = {k: v for k, v in extra.items() if k.startswith("adagrad.")}
        log.info("resuming from %s at step %d", ckpt, start_step)
    else:
        model = TransformerLM.init(mcfg, np.random.default_rng(settings["seed"]))
        write_run_config(out / "config.txt", settings, mcfg, ocfg)
    log.info("%d parameters, corpus %s of %d symbols", model.num_parameters(), corpus.name, len(corpus))
    result = train(model, corpus, ocfg, seed=settings["seed"] + start_step, out_dir=out,
                   start_step=start_step, optimizer_state=opt_state, meta=meta)
    # dynamic spans depend on the input; report their mean over a slice of the dev split
    probe = corpus.split("dev")[:mcfg.block * 4] if mcfg.span_kind == "dynamic" else None
    write_spans_csv(span_stats(model, probe), out / "spans.csv")
    print(json.dumps({"steps": result.steps, "best_dev_bpc": result.best_dev_bpc}))
    return 0


def _config_mismatch(have: ModelConfig, want: ModelConfig) -> str:
    for key, val in have.to_dict().items():
        if want.to_dict()[key] != val:
            return f"checkpoint {key}={val} does not match the requested {key}={want.to_dict()[key]}"
    return "checkpoint configuration differs"


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    try:
        model, meta, _ = checkpoint.load(ckpt)
    except checkpoint.CheckpointError as err:
        raise UsageError(f"{ckpt}: {err}") from None
    settings = {
        "data": args.data or meta.get("data"),
        "format": args.format or meta.get("format", "text8"),
        "data_limit": args.data_limit if args.data_limit is not None else _meta_int(meta, "data_limit"),
        "synth_length": _meta_int(meta, "synth_length") or 200_000,
        "seed": _meta_int(meta, "data_seed") or 0,
    }
    corpus = load_corpus(settings)
    if corpus.vocab_size != model.config.vocab_size:
        raise UsageError(f"vocab_size mismatch: checkpoint has {model.config.vocab_size}, "
                         f"corpus has {corpus.vocab_size}")
    batch = args.batch or _meta_int(meta, "eval_batch") or 8
    max_blocks = args.max_blocks if args.max_blocks is not None else _meta_int(meta, "eval_blocks")
    nll = evaluate(model, corpus, args.split, batch, model.config.block, max_blocks)
    print(json.dumps({"split": args.split, "bpc": nll / LN2}))
    return 0


def _model_from_args(args) -> tuple[TransformerLM, dict]:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        model, meta, _ = checkpoint.load(ckpt)
        return model, meta
    if not args.config:
        raise UsageError("give a checkpoint or --config")
    settings = resolve(read_config(args.config), {
        "span_kind": args.span_kind, "span_limit": args.span_limit, "ramp": args.ramp,
        "seed": args.seed})
    mcfg, _ = build_configs(settings, None)
    return TransformerLM.init(mcfg, np.random.default_rng(settings["seed"])), {}


def _trace_tokens(model: TransformerLM, meta: dict, source: str):
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"trace input not found: {path}")
    symbols = symbols_for(model.config, meta)
    text = path.read_bytes().decode("latin-1")
    corpus = CharCorpus(np.zeros(1, dtype=np.int64), symbols)
    try:
        return corpus.tokenize(text.rstrip("\n")), symbols
    except CorpusError as err:
        raise UsageError(f"{path}: {err}") from None


def cmd_profile(args) -> int:
    model, meta = _model_from_args(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    dynamic = model.config.span_kind == "dynamic"
    if args.trace_input and not dynamic:
        raise UsageError(f"--trace-input needs a dynamic-span model; this one is {model.config.span_kind!r}")
    tokens, symbols = (None, None)
    if args.trace_input:
        tokens, symbols = _trace_tokens(model, meta, args.trace_input)
    elif dynamic:
        raise UsageError("dynamic-span models need --trace-input to report spans")
    report = span_stats(model, tokens, symbols)
    cost = flops_one_step(model.config, report.spans, layer_max=args.layer_max)
    write_flops_csv(cost, out / "flops.csv")
    write_spans_csv(report, out / "spans.csv")
    if args.trace_input:
        write_trace_csv(report, out / "dynamic_trace.csv")
    print(json.dumps({
        "total_flops": cost.total,
        "attention_share": cost.attention_share,
        "feedforward_share": cost.feedforward_share,
        "mean_span": report.mean,
        "layer_windows": cost.layer_windows,
        "memory_bytes": cost.total_memory_bytes,
    }))
    return 0


def cmd_spans(args) -> int:
    model, meta = _model_from_args(args)
    tokens, symbols = (None, None)
    if args.trace_input:
        tokens, symbols = _trace_tokens(model, meta, args.trace_input)
    try:
        report = span_stats(model, tokens, symbols)
    except ValueError as err:
        raise UsageError(f"{err} (use --trace-input)") from None
    for layer, row in enumerate(report.spans):
        print(f"layer {layer}: " + " ".join(f"{z:8.2f}" for z in row))
    print(f"mean span {report.mean:.2f}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaspan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--span-kind", choices=("fixed", "adaptive", "dynamic"))
        sp.add_argument("--span-limit", type=int)
        sp.add_argument("--ramp", type=int)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help="corpus file or synth:<kind>[:arg]")
    t.add_argument("--format", choices=("text8", "bytes"))
    t.add_argument("--data-limit", type=int)
    t.add_argument("--lambda", dest="penalty", type=float, help="span penalty coefficient")
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint (or run directory) to continue from")
    model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bits per character of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    e.add_argument("--data")
    e.add_argument("--format", choices=("text8", "bytes"))
    e.add_argument("--data-limit", type=int)
    e.add_argument("--batch", type=int)
    e.add_argument("--max-blocks", type=int)
    e.set_defaults(func=cmd_eval)

    for name, func, text in (("profile", cmd_profile, "FLOPS and span report files"),
                             ("spans", cmd_spans, "print per-head spans")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("checkpoint", nargs="?")
        sp.add_argument("--config")
        sp.add_argument("--trace-input", help="text file for the dynamic span trace")
        model_flags(sp)
        if name == "profile":
            sp.add_argument("--out")
            sp.add_argument("--layer-max", action="store_true",
                            help="charge every head its layer's largest window")
        sp.set_defaults(func=func)
    return p


def _thread_limit():
    raw = os.environ.get("ADASPAN_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"ADASPAN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, FileNotFoundError) as err:
        print(f"adaspan: error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"adaspan: training diverged: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - report and exit nonzero
        print(f"adaspan: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
