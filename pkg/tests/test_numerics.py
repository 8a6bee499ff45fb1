import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dinocell import numerics as N
from dinocell.errors import ConfigError, NumericError, RangeError, ShapeError

finite = st.floats(-20, 20, allow_nan=False, width=64)


def test_softmax_temp_closed_forms():
    np.testing.assert_allclose(N.softmax_temp(np.array([0.0, 0.0]), 0.1), [0.5, 0.5])
    np.testing.assert_allclose(N.softmax_temp(np.array([1.0, 0.0]), 1.0), [0.73106, 0.26894], atol=1e-5)
    np.testing.assert_allclose(N.softmax_temp(np.array([1.0, 0.0]), 0.5), [0.88080, 0.11920], atol=1e-5)


def test_softmax_temp_errors():
    with pytest.raises(ConfigError):
        N.softmax_temp(np.zeros(3), 0.0)
    with pytest.raises(ConfigError):
        N.softmax_temp(np.zeros(3), -1.0)
    with pytest.raises(NumericError):
        N.softmax_temp(np.array([0.0, np.inf]), 1.0)
    with pytest.raises(NumericError):
        N.softmax_temp(np.array([0.0, np.nan]), 1.0)


def test_softmax_temp_stable_for_huge_logits():
    p = N.softmax_temp(np.array([1e4, 0.0, -1e4]), 0.04)
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


@given(arrays(np.float64, st.integers(2, 12), elements=finite), st.floats(0.01, 5.0))
def test_softmax_temp_sums_to_one_and_permutes(logits, tau):
    p = N.softmax_temp(logits, tau)
    assert abs(p.sum() - 1.0) <= 1e-6
    assert np.all(p >= 0)
    perm = np.random.default_rng(0).permutation(len(logits))
    np.testing.assert_allclose(N.softmax_temp(logits[perm], tau), p[perm], rtol=1e-12, atol=1e-300)


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-3, 3)), st.floats(0.05, 2.0))
def test_lower_tau_sharpens(logits, tau):
    top = np.sort(logits)[::-1]
    if top[0] - top[1] < 1e-3:
        return  # tied maxima converge to 1/m, not to 1
    hi = N.softmax_temp(logits, tau).max()
    lo = N.softmax_temp(logits, tau * 0.5).max()
    # strict unless floating point has already saturated
    assert lo >= hi
    if hi < 0.99 and lo < 0.99:
        assert lo > hi


def test_cross_entropy_examples():
    u = np.full(4, 0.25)
    assert N.cross_entropy_soft(u, u) == pytest.approx(math.log(4), abs=1e-5)
    assert N.cross_entropy_soft(np.array([0.5, 0.5]), np.array([0.9, 0.1])) == pytest.approx(1.20397, abs=1e-5)
    assert N.cross_entropy_soft(np.array([1.0, 0.0]), np.array([1 - 1e-9, 1e-9])) < 1e-8
    # the floor keeps a zero prediction finite
    assert np.isfinite(N.cross_entropy_soft(np.array([0.5, 0.5]), np.array([1.0, 0.0])))
    with pytest.raises(ShapeError):
        N.cross_entropy_soft(np.ones(3) / 3, np.ones(4) / 4)


@given(arrays(np.float64, 6, elements=st.floats(-4, 4)), arrays(np.float64, 6, elements=st.floats(-4, 4)))
def test_gibbs_inequality(a, b):
    p = N.softmax_forward(a)
    q = N.softmax_forward(b)
    assert N.cross_entropy_soft(p, q) >= N.cross_entropy_soft(p, p) - 1e-12


def test_bce_examples():
    loss, _ = N.bce_with_logits(np.array([0.0]), np.array([1.0]))
    assert loss == pytest.approx(math.log(2), abs=1e-5)
    assert N.bce_with_logits(np.array([20.0]), np.array([1.0]))[0] < 1e-8
    assert N.bce_with_logits(np.array([0.0]), np.array([0.0]))[0] == N.bce_with_logits(np.array([0.0]), np.array([1.0]))[0]
    with pytest.raises(ShapeError):
        N.bce_with_logits(np.zeros(3), np.zeros(2))


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), arrays(np.int8, (3, 4), elements=st.integers(0, 1)))
def test_bce_nonnegative(logits, t):
    loss, grad = N.bce_with_logits(logits, t.astype(np.float64))
    assert loss >= 0 and np.all(np.isfinite(grad))


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        s = N.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_adamw_decay_only():
    w = {"w": np.array([1.0])}
    st_ = N.OptimizerState.for_params(w, lr=1e-4, weight_decay=0.04)
    N.adamw_step(st_, w, {"w": np.array([0.0])})
    assert w["w"][0] == pytest.approx(0.999996, abs=1e-12)
    assert st_.step == 1


def test_adamw_identity_without_grad_or_decay():
    w = {"a": np.array([1.5, -2.0]), "b": np.array([[0.3]])}
    before = {k: v.copy() for k, v in w.items()}
    st_ = N.OptimizerState.for_params(w, lr=1e-3, weight_decay=0.0)
    for _ in range(3):
        N.adamw_step(st_, w, {k: np.zeros_like(v) for k, v in w.items()})
    for k in w:
        np.testing.assert_array_equal(w[k], before[k])
    assert st_.step == 3


def test_adamw_first_step_moves_by_lr():
    w = {"w": np.array([1.0, 1.0])}
    st_ = N.OptimizerState.for_params(w, lr=1e-3, weight_decay=0.0)
    N.adamw_step(st_, w, {"w": np.array([0.5, -3.0])})
    np.testing.assert_allclose(w["w"], [1.0 - 1e-3, 1.0 + 1e-3], rtol=0, atol=1e-8)


def test_adamw_no_decay_names_and_shape_errors():
    w = {"w": np.array([1.0]), "b": np.array([1.0])}
    st_ = N.OptimizerState.for_params(w, lr=0.1, weight_decay=0.5)
    N.adamw_step(st_, w, {"w": np.zeros(1), "b": np.zeros(1)}, no_decay={"b"})
    assert w["w"][0] == pytest.approx(0.95)
    assert w["b"][0] == 1.0
    with pytest.raises(ShapeError):
        N.adamw_step(st_, w, {"w": np.zeros(2)})
    with pytest.raises(ShapeError):
        N.adamw_step(st_, w, {"zz": np.zeros(1)})


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    total = N.clip_grad_norm(g, 1.0)
    assert total == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("kind", ["cosine-annealing", "cosine-ramp"])
def test_schedule_boundaries_and_midpoint(kind):
    s = N.Schedule(kind, 0.996, 1.0, 100)
    assert N.schedule_value(s, 0) == 0.996
    assert N.schedule_value(s, 100) == 1.0
    assert N.schedule_value(s, 50) == pytest.approx((0.996 + 1.0) / 2)
    with pytest.raises(RangeError):
        N.schedule_value(s, 101)
    with pytest.raises(RangeError):
        N.schedule_value(s, -1)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(1, 500))
def test_schedule_monotone(a, b, total):
    s = N.Schedule("cosine-annealing", a, b, total)
    vals = [N.schedule_value(s, i) for i in range(total + 1)]
    d = np.diff(vals)
    assert np.all(d <= 1e-12) if a >= b else np.all(d >= -1e-12)


def test_schedule_warmup():
    s = N.Schedule("cosine-annealing", 1.0, 0.0, 10, warmup=2)
    assert N.schedule_value(s, 0) == 0.0
    assert N.schedule_value(s, 1) == 0.5
    assert N.schedule_value(s, 2) == 1.0
    with pytest.raises(ConfigError):
        N.Schedule("cosine-annealing", 1.0, 0.0, 10, warmup=11)
    with pytest.raises(ConfigError):
        N.Schedule("linear", 1.0, 0.0, 10)


def test_dropout_eval_is_identity_and_train_is_inverted(rng):
    x = rng.standard_normal((200, 50))
    y, mask = N.dropout_forward(x, 0.5, rng, train=False)
    assert y is x and mask is None
    y, mask = N.dropout_forward(x, 0.5, np.random.default_rng(0), train=True)
    kept = mask != 0
    np.testing.assert_allclose(y[kept], 2 * x[kept])
    assert 0.4 < kept.mean() < 0.6
    with pytest.raises(ConfigError):
        N.dropout_forward(x, 0.5, None, train=True)


def test_layer_norm_rows_normalized(rng):
    x = rng.standard_normal((5, 16)) * 3 + 2
    y, _ = N.layer_norm_forward(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-7)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


# ----------------------------------------------------------------- grad_check


def test_grad_check_linear_exact(rng):
    w = rng.standard_normal((4, 3))
    r = rng.standard_normal((2, 3))

    def fn(x):
        return float((r * (x @ w)).sum()), r @ w.T

    assert N.grad_check(fn, rng.standard_normal((2, 4)), elementwise=True) <= 1e-8


def test_grad_check_softmax_temp_elementwise(rng):
    r = rng.standard_normal(6)

    def fn(x):
        p = N.softmax_temp(x, 0.5)
        return float((r * p).sum()), N.softmax_temp_backward(r, p, 0.5)

    assert N.grad_check(fn, rng.standard_normal(6), eps=1e-5, elementwise=True) <= 1e-6


def test_grad_check_flags_corrupted_backward(rng):
    r = rng.standard_normal(6)

    def fn(x):
        p = N.softmax_temp(x, 0.5)
        return float((r * p).sum()), N.softmax_temp_backward(r, p, 0.5) + 0.1

    assert N.grad_check(fn, rng.standard_normal(6)) > 1e-2
    assert N.grad_check(fn, rng.standard_normal(6), elementwise=True) > 1e-2


def test_grad_check_non_finite():
    with pytest.raises(NumericError):
        N.grad_check(lambda x: (float("nan"), x), np.zeros(2))
    with pytest.raises(ShapeError):
        N.grad_check(lambda x: (0.0, np.zeros(3)), np.zeros(2))


def test_ops_bit_identical_on_repeat(rng):
    x = rng.standard_normal((64, 32)).astype(np.float32)
    g = rng.standard_normal(32).astype(np.float32)
    b = rng.standard_normal(32).astype(np.float32)
    a1 = N.layer_norm_forward(x, g, b)[0]
    a2 = N.layer_norm_forward(x, g, b)[0]
    assert a1.tobytes() == a2.tobytes()
    assert N.gelu_forward(x).tobytes() == N.gelu_forward(x).tobytes()
    assert N.softmax_temp(x, 0.1).tobytes() == N.softmax_temp(x, 0.1).tobytes()
