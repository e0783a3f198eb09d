import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaspan.corpus import (CharCorpus, CorpusError, batcher, load, num_blocks, parse_synth,
                            synth, text8_corpus)


def test_text8_tokenizes_each_character():
    c = text8_corpus("abc ab")
    assert len(c) == 6
    assert c.data.tolist() == [0, 1, 2, 26, 0, 1]
    assert c.vocab_size == 27


def test_text8_unknown_symbol_names_offset():
    with pytest.raises(CorpusError, match="offset 3"):
        text8_corpus("abcX d")


def test_tokenize_unknown_symbol_names_offset():
    c = text8_corpus("abc")
    with pytest.raises(CorpusError, match="offset 2"):
        c.tokenize("ab!")


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz ", max_size=200))
def test_round_trip(s):
    c = text8_corpus("a")
    assert c.detokenize(c.tokenize(s)) == s


def test_load_limit_and_formats(tmp_path):
    path = tmp_path / "text8"
    path.write_bytes(b"the quick brown fox " * 100)
    assert len(load(path, limit=1000)) == 1000
    assert len(load(path)) == 2000
    raw = load(path, "bytes", limit=10)
    assert raw.vocab_size == 256 and raw.data[0] == ord("t")


def test_load_is_deterministic(tmp_path):
    path = tmp_path / "text8"
    path.write_bytes(b"hello world " * 50)
    assert load(path).data.tobytes() == load(path).data.tobytes()


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        load(tmp_path / "nope.txt")


def test_load_unknown_format(tmp_path):
    (tmp_path / "f").write_bytes(b"ab")
    with pytest.raises(CorpusError, match="format"):
        load(tmp_path / "f", "words")


def test_splits_contiguous_and_disjoint():
    c = CharCorpus(np.arange(1000) % 5, list("abcde"))
    off = c.offsets()
    assert off == {"train": (0, 900), "dev": (900, 950), "test": (950, 1000)}
    np.testing.assert_array_equal(np.concatenate([c.split(s) for s in ("train", "dev", "test")]), c.data)


def test_split_fractions_must_sum_to_one():
    with pytest.raises(CorpusError):
        CharCorpus(np.zeros(10), ["a"], (0.5, 0.2, 0.2))


def test_unknown_split():
    with pytest.raises(CorpusError, match="split"):
        CharCorpus(np.zeros(10), ["a"]).split("valid")


# -- batching --------------------------------------------------------------

def test_stream_starts_by_shard():
    data = np.arange(100)
    batches = list(batcher(data, 2, 5))
    x0, y0 = batches[0]
    assert x0[:, 0].tolist() == [0, 50]
    np.testing.assert_array_equal(y0, x0 + 1)


def test_stream_concatenation_reproduces_shard():
    data = np.arange(100)
    xs = np.concatenate([x for x, _ in batcher(data, 2, 5)], axis=1)
    ys = np.concatenate([y for _, y in batcher(data, 2, 5)], axis=1)
    np.testing.assert_array_equal(xs[0], np.arange(0, 45))
    np.testing.assert_array_equal(xs[1], np.arange(50, 95))
    # targets run one past the inputs but never beyond the shard
    assert ys[0, -1] == 45 and ys[1, -1] == 95


def test_two_epochs_identical():
    c = synth("markov", 5000, vocab=6, seed=1)
    a = [x.tobytes() for x, _ in batcher(c, 3, 16)]
    b = [x.tobytes() for x, _ in batcher(c, 3, 16)]
    assert a == b and len(a) == num_blocks(c, 3, 16)


def test_evaluation_never_reads_train_tokens():
    # train tokens are all 0, dev tokens 1, test tokens 2
    data = np.repeat([0, 1, 2], [900, 50, 50])
    c = CharCorpus(data, list("abc"))
    for split, sym in (("dev", 1), ("test", 2)):
        for x, y in batcher(c, 2, 8, split):
            assert np.all(x == sym) and np.all(y == sym)


def test_batcher_rejects_short_split():
    with pytest.raises(CorpusError, match="too short"):
        list(batcher(np.arange(20), 4, 8))


def test_batcher_yields_scored_weights():
    c = synth("copy", 4000, vocab=8, lag=4, segment=8, seed=0)
    for x, y, w in batcher(c, 2, 16, "dev", with_scored=True):
        assert w.shape == y.shape and set(np.unique(w)) <= {0.0, 1.0}


# -- synthetic ------------------------------------------------------------

def test_copy_definition():
    c = synth("copy", 500, vocab=16, lag=4, seed=0)
    d = c.data
    assert np.all(d[4:] == d[:-4])


def test_segmented_copy_scores_copies_only():
    c = synth("copy", 640, vocab=16, lag=32, segment=64, seed=0)
    d, s = c.data, c.scored
    for start in range(0, 640, 64):
        seg = d[start:start + 64]
        assert np.all(seg[32:] == seg[:32])
        assert not s[start:start + 32].any() and s[start + 32:start + 64].all()


def test_copy_rejects_bad_arguments():
    with pytest.raises(CorpusError):
        synth("copy", 10, lag=32)
    with pytest.raises(CorpusError):
        synth("copy", 1000, lag=32, segment=48)


def test_repeat_is_predictable():
    c = synth("repeat", 101, pattern="ab")
    assert c.detokenize(c.data[:6]) == "ababab"
    # oracle predictor: the next symbol is a function of the current one
    nxt = {int(a): int(b) for a, b in zip(c.data[:-1], c.data[1:])}
    assert all(nxt[int(a)] == int(b) for a, b in zip(c.data[:-1], c.data[1:]))
    assert len(nxt) == 2


def test_markov_transitions_match_matrix():
    # z-scores pooled over seeds 0-7 have std 1.04, so the band is calibrated; with 16 cells
    # some seeds (0 and 7 here) legitimately put one cell just past 3 SE
    c = synth("markov", 1_000_000, vocab=4, seed=1, concentration=1.0)
    trans = c.transition
    prev, nxt = c.data[:-1], c.data[1:]
    for i in range(4):
        rows = nxt[prev == i]
        n = rows.size
        freq = np.bincount(rows, minlength=4) / n
        se = np.sqrt(trans[i] * (1 - trans[i]) / n)
        assert np.all(np.abs(freq - trans[i]) <= 3 * se + 1e-12)


def test_synth_is_seeded():
    assert synth("markov", 2000, seed=3).data.tobytes() == synth("markov", 2000, seed=3).data.tobytes()
    assert synth("markov", 2000, seed=3).data.tobytes() != synth("markov", 2000, seed=4).data.tobytes()


def test_unknown_synth_kind():
    with pytest.raises(CorpusError):
        synth("zipf", 100)


@pytest.mark.parametrize("spec, kind", [("synth:copy:32", "copy32"), ("synth:markov:16", "markov"),
                                        ("synth:repeat:abc", "repeat")])
def test_parse_synth(spec, kind):
    c = parse_synth(spec, 10_000, seed=1)
    assert c.name == kind and len(c) == 10_000


def test_uniform_entropy_of_synthetic_copy_prefix():
    c = synth("copy", 64_000, vocab=16, lag=32, segment=64, seed=0)
    fresh = c.data[~c.scored]
    counts = np.bincount(fresh, minlength=16) / fresh.size
    ent = -(counts * np.log2(counts)).sum()
    assert abs(ent - math.log2(16)) < 0.01
