"""Character corpora: text8/byte file loading, splits, batching, synthetic data."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

TEXT8_SYMBOLS = string.ascii_lowercase + " "
SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    pass


@dataclass
class CharCorpus:
    """Token ids over a fixed vocabulary, cut into contiguous train/dev/test splits.

    ``symbols[i]`` is the character for id ``i``.  ``scored`` optionally
    flags the target positions that evaluation should count (the synthetic
    copy task scores only the copied positions).
    """

    data: np.ndarray
    symbols: list[str]
    fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
    scored: np.ndarray | None = None
    name: str = ""
    transition: np.ndarray | None = None
    _index: dict[str, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        self._index = {c: i for i, c in enumerate(self.symbols)}
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions must sum to 1, got {self.fractions}")

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.data)

    def offsets(self) -> dict[str, tuple[int, int]]:
        n = len(self.data)
        a = int(round(n * self.fractions[0]))
        b = a + int(round(n * self.fractions[1]))
        return {"train": (0, a), "dev": (a, b), "test": (b, n)}

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}; expected one of {SPLITS}")
        lo, hi = self.offsets()[name]
        return self.data[lo:hi]

    def split_scored(self, name: str) -> np.ndarray | None:
        if self.scored is None:
            return None
        lo, hi = self.offsets()[name]
        return self.scored[lo:hi]

    def tokenize(self, text: str) -> np.ndarray:
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as err:
            pos = next(i for i, c in enumerate(text) if c not in self._index)
            raise CorpusError(f"unknown symbol {err.args[0]!r} at offset {pos}") from None

    def detokenize(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)


def _text8_ids(raw: bytes) -> np.ndarray:
    lut = np.full(256, -1, dtype=np.int64)
    for i, c in enumerate(TEXT8_SYMBOLS):
        lut[ord(c)] = i
    ids = lut[np.frombuffer(raw, dtype=np.uint8)]
    bad = np.flatnonzero(ids < 0)
    if bad.size:
        off = int(bad[0])
        raise CorpusError(f"byte {raw[off]!r} at offset {off} is not a text8 symbol")
    return ids


def text8_corpus(text: str | bytes, fractions=(0.9, 0.05, 0.05), name: str = "text8") -> CharCorpus:
    raw = text.encode("latin-1") if isinstance(text, str) else text
    return CharCorpus(_text8_ids(raw), list(TEXT8_SYMBOLS), fractions, name=name)


def byte_corpus(raw: bytes, fractions=(0.9, 0.05, 0.05), name: str = "bytes") -> CharCorpus:
    symbols = [chr(i) for i in range(256)]
    return CharCorpus(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), symbols, fractions, name=name)


def load(path, format: str = "text8", limit: int | None = None,
         fractions=(0.9, 0.05, 0.05)) -> CharCorpus:
    """Read a text8-style (a-z and space) or raw byte corpus from ``path``.

    ``limit`` keeps only the first ``limit`` characters.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read() if limit is None else fh.read(limit)
    if format == "text8":
        return text8_corpus(raw, fractions, name=path.name)
    if format == "bytes":
        return byte_corpus(raw, fractions, name=path.name)
    raise CorpusError(f"unknown corpus format {format!r}; expected 'text8' or 'bytes'")


def stream_starts(n: int, batch: int) -> np.ndarray:
    return np.arange(batch) * (n // batch)


def batcher(corpus: CharCorpus | np.ndarray, batch: int, block: int, split: str = "train",
            with_scored: bool = False) -> Iterator[tuple[np.ndarray, ...]]:
    """One epoch of ``(inputs, targets)`` arrays of shape ``[batch, block]``.

    Stream ``i`` walks the ``i``-th contiguous shard of the split in order, so
    consecutive batches continue each stream where the previous one stopped.
    With ``with_scored`` a third array of target weights is yielded.
    """
    if isinstance(corpus, CharCorpus):
        data, scored = corpus.split(split), corpus.split_scored(split)
    else:
        data, scored = np.asarray(corpus), None
    shard = len(data) // batch
    if shard < block + 1:
        raise CorpusError(f"split {split!r} of {len(data)} tokens is too short for "
                          f"{batch} streams of block {block}")
    starts = stream_starts(len(data), batch)
    rows = starts[:, None] + np.arange(shard)[None, :]
    streams = data[rows]
    weights = scored[rows] if scored is not None else None
    for k in range((shard - 1) // block):
        lo = k * block
        x = streams[:, lo:lo + block]
        y = streams[:, lo + 1:lo + block + 1]
        if with_scored:
            w = (np.ones_like(y, dtype=np.float64) if weights is None
                 else weights[:, lo + 1:lo + block + 1].astype(np.float64))
            yield x, y, w
        else:
            yield x, y


def num_blocks(corpus: CharCorpus, batch: int, block: int, split: str = "train") -> int:
    return (len(corpus.split(split)) // batch - 1) // block


# -- synthetic corpora --------------------------------------------------------

def _alphabet(vocab: int) -> list[str]:
    base = string.ascii_lowercase + string.ascii_uppercase + string.digits
    if vocab <= len(base):
        return list(base[:vocab])
    return [chr(0x100 + i) for i in range(vocab)]


def synth(kind: str, length: int, vocab: int = 16, seed: int = 0, *, lag: int = 32,
          segment: int | None = None, pattern: str = "ab", concentration: float = 0.3,
          fractions=(0.9, 0.05, 0.05)) -> CharCorpus:
    """Synthetic corpora for behavioural tests.

    ``copy``: token t equals token t-lag.  Without ``segment`` the first
    ``lag`` tokens are uniform and the rest repeat them.  With ``segment``
    (a multiple of ``lag`` of at least ``2*lag``) each segment opens with
    ``lag`` fresh uniform tokens and continues as a copy at distance ``lag``;
    only copied positions are flagged as scored.

    ``markov``: order-1 chain with a fixed random transition matrix (rows
    drawn from a Dirichlet with ``concentration``); the matrix is kept on
    the returned corpus as ``transition``.

    ``repeat``: tiling of ``pattern``.
    """
    rng = np.random.default_rng(seed)
    if kind == "copy":
        if lag >= length:
            raise CorpusError(f"copy lag {lag} must be below the length {length}")
        data = np.empty(length, dtype=np.int64)
        scored = np.zeros(length, dtype=bool)
        if segment is None:
            data[:] = np.resize(rng.integers(0, vocab, lag), length)
            scored[lag:] = True
        else:
            if segment < 2 * lag or segment % lag:
                raise CorpusError(f"segment {segment} must be a multiple of lag {lag} and >= {2 * lag}")
            for start in range(0, length, segment):
                stop = min(start + segment, length)
                data[start:stop] = np.resize(rng.integers(0, vocab, lag), stop - start)
                scored[min(start + lag, stop):stop] = True
        return CharCorpus(data, _alphabet(vocab), fractions, scored=scored, name=f"copy{lag}")
    if kind == "markov":
        trans = rng.dirichlet(np.full(vocab, concentration), size=vocab)
        cdf = np.cumsum(trans, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(length)
        data = np.empty(length, dtype=np.int64)
        data[0] = rng.integers(0, vocab)
        state = int(data[0])
        for t in range(1, length):
            state = int(np.searchsorted(cdf[state], u[t], side="right"))
            data[t] = state
        return CharCorpus(data, _alphabet(vocab), fractions, name="markov", transition=trans)
    if kind == "repeat":
        if not pattern:
            raise CorpusError("repeat pattern must be non-empty")
        symbols = sorted(set(pattern))
        unit = np.array([symbols.index(c) for c in pattern], dtype=np.int64)
        data = np.tile(unit, -(-length // len(unit)))[:length]
        return CharCorpus(data, symbols, fractions, name="repeat")
    raise CorpusError(f"unknown synthetic corpus kind {kind!r}")


def parse_synth(spec: str, length: int, seed: int = 0) -> CharCorpus:
    """Build a corpus from ``synth:<kind>[:arg]`` strings used on the command line.

    ``synth:copy:32`` (segmented copy at lag 32, vocab 16), ``synth:markov:16``
    (vocab 16), ``synth:repeat:abc``.
    """
    parts = spec.split(":")
    if len(parts) < 2 or parts[0] != "synth":
        raise CorpusError(f"not a synthetic corpus spec: {spec!r}")
    kind, arg = parts[1], (parts[2] if len(parts) > 2 else None)
    if kind == "copy":
        lag = int(arg) if arg else 32
        return synth("copy", length, 16, seed, lag=lag, segment=2 * lag)
    if kind == "markov":
        return synth("markov", length, int(arg) if arg else 16, seed)
    if kind == "repeat":
        return synth("repeat", length, seed=seed, pattern=arg or "ab")
    raise CorpusError(f"unknown synthetic corpus kind {kind!r}")
