import math

import numpy as np
import pytest

from adaspan import tensor as T
from adaspan.tensor import Tape, Tensor, backward, no_grad

from conftest import central_difference, rel_err


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# -- matmul ----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_difference():
    a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
    backward(T.matmul(a, b).sum())
    fd = [central_difference(lambda: T.matmul(a, b).data.sum(), a.data, (0, j)) for j in range(2)]
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]], rtol=0, atol=1e-12)
    np.testing.assert_allclose(fd, [3.0, 4.0], atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ---------------------------------------------------------------

@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([0.0, math.log(3.0)], [0.25, 0.75]),
])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x)).data, expected, rtol=0, atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax_lastdim(Tensor([0.0, np.nan]))


def test_softmax_slices_are_distributions(rng):
    x = Tensor(rng.normal(scale=20, size=(50, 7, 13)))
    p = T.softmax_lastdim(x).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=-1) - 1)) < 1e-12


# -- elementwise -----------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_relu_negative_has_zero_value_and_gradient():
    x = leaf([-3.0])
    y = T.relu(x)
    backward(y.sum())
    assert y.item() == 0.0 and x.grad[0] == 0.0


def test_clamp_above_range():
    x = leaf([1.7])
    y = T.clamp(x, 0.0, 1.0)
    backward(y.sum())
    assert y.item() == 1.0 and x.grad[0] == 0.0


def test_clamp_inside_range_has_unit_gradient():
    x = leaf([0.3])
    backward(T.clamp(x, 0.0, 1.0).sum())
    assert x.grad[0] == 1.0


# -- backward --------------------------------------------------------------

def test_backward_of_sum_is_ones():
    w = leaf([1.0, 2.0, 3.0])
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_of_square_sum():
    w = leaf([1.0, 2.0])
    backward((w * w).sum())
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(w * 2.0)


def test_gradients_accumulate_across_backward_calls():
    w = leaf([1.0, 2.0])
    backward((w * w).sum())
    backward((w * w).sum())
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_shared_leaf_accumulates_from_every_use():
    w = leaf([3.0])
    backward((w * w + w).sum())
    assert w.grad[0] == 7.0


def test_every_reachable_node_gets_a_gradient():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    mid = a * b
    out = T.exp(mid).sum()
    tape = backward(out)
    assert all(node.grad is not None and node.grad.shape == node.shape for node in tape.nodes)


def test_tape_is_topological_and_visits_once():
    a = leaf([1.0, -2.0])
    b = T.relu(a)
    c = b * a
    d = T.sigmoid(c) + b
    loss = d.sum()
    tape = Tape.from_root(loss)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(position) == len(tape.nodes)
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


# -- randomised gradient checks against central differences ----------------

def _unary(fn, lo=-2.0, hi=2.0):
    def build(rng):
        x = leaf(rng.uniform(lo, hi, size=(3, 4)))
        w = rng.normal(size=(3, 4))
        return [x], lambda: (fn(x) * w).sum()
    return build


def _binary(fn):
    def build(rng):
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(rng.normal(size=(1, 4)))
        w = rng.normal(size=(3, 4))
        return [a, b], lambda: (fn(a, b) * w).sum()
    return build


def _matmul(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    w = rng.normal(size=(2, 3, 5))
    return [a, b], lambda: (T.matmul(a, b) * w).sum()


def _batched_matmul(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 2)))
    w = rng.normal(size=(2, 3, 2))
    return [a, b], lambda: (T.matmul(a, b) * w).sum()


def _layer_norm(rng):
    x, g, b = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    return [x, g, b], lambda: (T.layer_norm(x, g, b) * w).sum()


def _cross_entropy(rng):
    x = leaf(rng.normal(size=(2, 5, 7)))
    y = rng.integers(0, 7, size=(2, 5))
    wt = rng.uniform(0.1, 1.0, size=(2, 5))
    return [x], lambda: T.cross_entropy(x, y, wt)


def _embedding(rng):
    table = leaf(rng.normal(size=(5, 3)))
    ids = rng.integers(0, 5, size=(2, 4))
    w = rng.normal(size=(2, 4, 3))
    return [table], lambda: (T.embedding(table, ids) * w).sum()


def _take_pairs(rng):
    x = leaf(rng.normal(size=(2, 4, 6)))
    rows = np.array([0, 1, 2, 3, 3])
    src = np.array([0, 2, 5, 1, 4])
    dst = np.array([1, 0, 2, 2, 0])
    w = rng.normal(size=(2, 4, 3))
    return [x], lambda: (T.take_pairs(x, rows, src, dst, 3) * w).sum()


def _reductions(rng):
    x = leaf(rng.normal(size=(3, 4, 2)))
    return [x], lambda: (x.sum(axis=1) * x.mean(axis=(0, 2))[None, :2] ** 1.0).sum() + x.mean()


def _shapes(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 8))
    return [x], lambda: (T.concat([x.transpose(0, 2, 1).reshape(2, 12)[:, 1:7],
                                   x[:, 0, :2].reshape(2, 2)], axis=1) * w).sum()


OPS = {
    "add": _binary(lambda a, b: a + b),
    "mul": _binary(lambda a, b: a * b),
    "sub_div": _binary(lambda a, b: (a - b) / (b * b + 1.0)),
    "scale": _unary(lambda x: T.scale(x, 2.5)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.5, 3.0),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid, -6, 6),
    "clamp": _unary(lambda x: T.clamp(x, -0.5, 0.7)),
    "softmax": _unary(T.softmax_lastdim, -5, 5),
    "log_softmax": _unary(T.log_softmax_lastdim, -5, 5),
    "matmul": _matmul,
    "batched_matmul": _batched_matmul,
    "layer_norm": _layer_norm,
    "cross_entropy": _cross_entropy,
    "embedding": _embedding,
    "take_pairs": _take_pairs,
    "reductions": _reductions,
    "shapes": _shapes,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_random_gradient_check(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(100):
        leaves, f = OPS[name](rng)
        backward(f())
        for x in leaves:
            for idx in np.ndindex(x.shape):
                if name == "relu" and abs(x.data[idx]) < 1e-5:
                    continue
                if name == "clamp" and min(abs(x.data[idx] + 0.5), abs(x.data[idx] - 0.7)) < 1e-5:
                    continue
                fd = central_difference(lambda: f().data, x.data, idx)
                worst = max(worst, rel_err(x.grad[idx], fd))
    assert worst < 1e-6


# -- dropout ---------------------------------------------------------------

def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    assert T.dropout(x, 0.3, rng, training=False) is x


def test_dropout_preserves_expectation(rng):
    x = Tensor(np.full(20_000, 2.0))
    y = T.dropout(x, 0.3, rng, training=True).data
    se = y.std(ddof=1) / math.sqrt(y.size)
    assert abs(y.mean() - 2.0) < 3 * se
    assert set(np.unique(y).round(12)) <= {0.0, round(2.0 / 0.7, 12)}


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(p, rng):
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), p, rng)
