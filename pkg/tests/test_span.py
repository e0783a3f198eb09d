import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaspan.span import (DynamicSpan, MaskConfig, StaticSpan, default_penalty, dynamic_span,
                          effective_span, masked_attention_weights, soft_mask, span_penalty)
from adaspan.tensor import Tensor, backward, softmax_lastdim

CFG32 = MaskConfig(ramp=32, span_limit=512)


def test_mask_plateau():
    assert soft_mask(0, 0, CFG32) == 1.0


def test_mask_zero_region():
    assert soft_mask(42, 10, CFG32) == 0.0


def test_mask_ramp_midpoint():
    assert abs(soft_mask(26, 10, CFG32) - 0.5) < 1e-12


@pytest.mark.parametrize("x, expected", [(26, 1 / 32), (5, 0.0), (50, 0.0)])
def test_mask_gradient_in_z(x, expected):
    z = Tensor(10.0, requires_grad=True, dtype=np.float64)
    backward(soft_mask(x, z, CFG32))
    assert abs(float(z.grad) - expected) < 1e-15


def test_mask_rejects_span_outside_limit():
    with pytest.raises(ValueError, match="span value"):
        soft_mask(3, 600, CFG32)
    with pytest.raises(ValueError):
        soft_mask(3, -1, CFG32)


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(ramp=0)
    with pytest.raises(ValueError):
        MaskConfig(ramp=64, span_limit=32)
    with pytest.raises(ValueError):
        MaskConfig(penalty=-1.0)


def test_default_penalty_by_limit():
    assert default_penalty(512) == 2e-6
    assert default_penalty(8192) == 0.5e-6


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 512), st.floats(0, 600), st.floats(0, 600), st.integers(1, 64))
def test_mask_monotone_in_distance(z, x1, x2, ramp):
    cfg = MaskConfig(ramp=ramp, span_limit=512)
    lo, hi = sorted((x1, x2))
    m_lo, m_hi = soft_mask(lo, z, cfg), soft_mask(hi, z, cfg)
    assert 0.0 <= m_hi <= m_lo <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 512), st.floats(0, 512), st.floats(0, 600))
def test_mask_monotone_in_span(z1, z2, x):
    lo, hi = sorted((z1, z2))
    assert soft_mask(x, lo, CFG32) <= soft_mask(x, hi, CFG32)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 512))
def test_mask_vanishes_outside_effective_span(z):
    w = effective_span(z, CFG32)
    if w < CFG32.span_limit:
        assert soft_mask(w, z, CFG32) == 0.0
    if z % 1 == 0 or z % 1 > 1e-9:  # a sub-ulp fraction rounds away inside R + z
        assert soft_mask(max(w - 1, 0), z, CFG32) > 0.0


@pytest.mark.parametrize("z, expected", [(0, 32), (100.5, 133), (512, 512)])
def test_effective_span_examples(z, expected):
    assert effective_span(z, CFG32) == expected


def test_effective_span_vectorised():
    np.testing.assert_array_equal(effective_span(np.array([0.0, 100.5, 512.0]), CFG32), [32, 133, 512])


# -- masked softmax ----------------------------------------------------------

def test_masked_softmax_hand_value():
    out = masked_attention_weights(Tensor(np.zeros(3)), np.array([1.0, 0.5, 0.0])).data
    np.testing.assert_allclose(out, [2 / 3, 1 / 3, 0.0], rtol=0, atol=1e-15)


def test_masked_softmax_all_ones_is_softmax(rng):
    s = Tensor(rng.normal(size=(6, 9)))
    out = masked_attention_weights(s, np.ones(9)).data
    np.testing.assert_array_equal(out, softmax_lastdim(s).data)


def test_zero_mask_excludes_position():
    np.testing.assert_array_equal(masked_attention_weights(Tensor([5.0, 1.0]), np.array([0.0, 1.0])).data,
                                  [0.0, 1.0])


def test_zero_mask_position_gets_no_score_gradient(rng):
    s = Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)
    m = np.array([1.0, 0.7, 0.2, 0.0, 0.0])
    backward((masked_attention_weights(s, m) * Tensor(rng.normal(size=5))).sum())
    assert np.all(s.grad[3:] == 0.0)
    assert np.all(s.grad[:3] != 0.0)


def test_degenerate_denominator_fallback():
    # all mask values zero: uniform over the positions with the largest mask value
    s = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    out = masked_attention_weights(s, np.zeros(3))
    np.testing.assert_array_equal(out.data, [1 / 3, 1 / 3, 1 / 3])
    backward((out * Tensor([1.0, -2.0, 0.5])).sum())
    np.testing.assert_array_equal(s.grad, 0.0)


def test_fallback_respects_invalid_positions():
    out = masked_attention_weights(Tensor([0.0, 0.0, 0.0]), np.zeros(3), np.array([False, True, True]))
    np.testing.assert_array_equal(out.data, [0.0, 0.5, 0.5])


def test_tiny_mask_is_not_degenerate():
    # the denominator is measured after the max(s + log m) shift, so tiny masks still normalise
    out = masked_attention_weights(Tensor([0.0, 0.0]), np.array([1e-12, 0.0])).data
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_masked_softmax_rejects_bad_mask():
    with pytest.raises(ValueError):
        masked_attention_weights(Tensor(np.zeros(3)), np.array([1.2, 0.0, 0.0]))
    with pytest.raises(ValueError):
        masked_attention_weights(Tensor(np.zeros(3)), np.ones(2))


def test_masked_softmax_gradients_match_finite_differences(rng):
    from conftest import central_difference, rel_err

    for _ in range(50):
        s = Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=np.float64)
        m = Tensor(rng.uniform(0.05, 1.0, size=6), requires_grad=True, dtype=np.float64)
        w = rng.normal(size=(3, 6))

        def f():
            return (masked_attention_weights(s, m).data * w).sum()

        backward((masked_attention_weights(s, m) * Tensor(w)).sum())
        for t in (s, m):
            for idx in np.ndindex(t.shape):
                assert rel_err(t.grad[idx], central_difference(f, t.data, idx)) < 1e-7


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masked_softmax_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    s = Tensor(rng.normal(scale=10, size=(4, 7)))
    m = rng.uniform(0, 1, size=(4, 7))
    m[:, 0] = rng.uniform(0.01, 1, size=4)  # at least one live position per row
    out = masked_attention_weights(s, m).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1)) < 1e-12


# -- penalty ----------------------------------------------------------------

def test_penalty_value():
    cfg = MaskConfig(ramp=32, span_limit=4096, penalty=2e-6, heads=8)
    z = Tensor(np.full(8, 125.0))
    assert abs(span_penalty([z], cfg).item() - 2.5e-4) < 1e-18


def test_penalty_zero_lambda():
    cfg = MaskConfig(ramp=32, span_limit=512, penalty=0.0, heads=8)
    assert span_penalty([Tensor(np.full(8, 300.0))], cfg).item() == 0.0


def test_penalty_gradient_on_fraction():
    cfg = MaskConfig(ramp=32, span_limit=4096, penalty=2e-6, heads=8)
    span = StaticSpan.init(8, 4096)
    span.fraction.data[:] = np.linspace(0, 1, 8)
    backward(span_penalty([span.spans()], cfg))
    np.testing.assert_allclose(span.fraction.grad, 1.024e-3, rtol=0, atol=1e-15)


def test_penalty_rejects_out_of_range_span():
    with pytest.raises(ValueError):
        span_penalty([Tensor([600.0])], CFG32)


# -- span parameters --------------------------------------------------------

def test_dynamic_span_midpoint():
    x = Tensor(np.ones(4))
    z = dynamic_span(x, Tensor(np.zeros(4)), Tensor(0.0), 64)
    assert z.item() == 32.0


def test_dynamic_span_initial_value():
    z = dynamic_span(Tensor(np.ones(4)), Tensor(np.zeros(4)), Tensor(-4.0), 1024)
    assert abs(z.item() - 1024 / (1 + math.exp(4))) < 1e-12
    assert abs(z.item() - 18.417) < 1e-3


def test_dynamic_span_increases_with_bias(rng):
    x, v = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    values = [dynamic_span(x, v, Tensor(b), 64).item() for b in np.linspace(-5, 5, 21)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_dynamic_span_per_head_shape(rng):
    span = DynamicSpan.init(6, 3, 64)
    z = span.spans(Tensor(rng.normal(size=(2, 5, 6))))
    assert z.shape == (2, 5, 3)
    np.testing.assert_allclose(z.data, 64 / (1 + math.exp(4)))


def test_static_span_init_and_projection():
    span = StaticSpan.init(4, 64)
    assert np.all(span.fraction.data == 0.0)
    span.fraction.data[:] = [-0.2, 0.5, 1.3, 1.0]
    span.project()
    np.testing.assert_array_equal(span.fraction.data, [0.0, 0.5, 1.0, 1.0])
    np.testing.assert_array_equal(span.values(), [0.0, 32.0, 64.0, 64.0])
