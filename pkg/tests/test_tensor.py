import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import sani.tensor as T
from gradcheck_util import finite_difference_check
from sani.errors import NotScalarLoss, ShapeMismatch


def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))


def test_softmax_uniform_on_zero_row():
    out = T.softmax_rows(T.Tensor(np.zeros((2, 5))))
    assert np.allclose(out.data, 0.2)


@given(arrays(np.float64, (4, 7), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(T.Tensor(x))
    assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)


def test_cross_entropy_closed_form():
    loss = T.cross_entropy(T.Tensor(np.zeros((1, 2))), np.array([0]), ignore_id=-1)
    assert loss.data == pytest.approx(math.log(2.0), abs=1e-12)


def test_cross_entropy_all_ignored_is_zero_with_zero_grads():
    logits = T.Tensor(np.random.default_rng(0).normal(size=(3, 5)), name="logits")
    with T.Tape() as tape:
        loss = T.cross_entropy(logits, np.full(3, 9), ignore_id=9)
    grads = T.backward(tape, loss, {"logits": logits})
    assert loss.data == 0.0
    assert np.all(grads["logits"].data == 0.0)


def test_cross_entropy_grad_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    logits = T.Tensor(rng.normal(size=(6, 9)), name="logits")
    targets = np.array([1, 2, 3, 9, 0, 8])
    with T.Tape() as tape:
        loss = T.cross_entropy(logits, targets, ignore_id=9)
    grads = T.backward(tape, loss, {"logits": logits})
    sums = grads["logits"].data.sum(axis=1)
    assert np.all(np.abs(sums) < 1e-12)


def test_cross_entropy_ignores_perturbation_at_ignored_positions():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(4, 6))
    targets = np.array([1, 9, 3, 9])

    def run(x):
        logits = T.Tensor(x, name="logits")
        with T.Tape() as tape:
            loss = T.cross_entropy(logits, targets, ignore_id=9)
        g = T.backward(tape, loss, {"logits": logits})["logits"].data
        return float(loss.data), g

    l0, g0 = run(base)
    bumped = base.copy()
    bumped[1] += 100.0
    bumped[3] -= 5.0
    l1, g1 = run(bumped)
    assert l0 == l1
    assert np.array_equal(g0[0], g1[0]) and np.array_equal(g0[2], g1[2])
    assert np.all(g1[1] == 0.0) and np.all(g1[3] == 0.0)


def test_backward_linear_outer_product():
    # loss = sum(W @ x) with x fixed -> dL/dW[i,j] = x[j]
    rng = np.random.default_rng(3)
    W = T.Tensor(rng.normal(size=(4, 5)), name="W")
    x = T.Tensor(rng.normal(size=(5, 1)))
    with T.Tape() as tape:
        loss = T.sum_all(T.matmul(W, x))
    grads = T.backward(tape, loss, {"W": W})
    expect = np.tile(x.data[:, 0], (4, 1))
    assert np.allclose(grads["W"].data, expect, atol=1e-12)


def test_backward_requires_scalar_loss():
    x = T.Tensor(np.zeros((2, 2)))
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(NotScalarLoss):
        T.backward(tape, y)


def test_backward_unreached_params_get_zero_grads():
    used = T.Tensor(np.ones((2, 2)), name="used")
    unused = T.Tensor(np.ones((3,)), name="unused")
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(used, used))
    grads = T.backward(tape, loss, {"used": used, "unused": unused})
    assert np.allclose(grads["used"].data, 2.0)
    assert np.all(grads["unused"].data == 0.0)
    assert grads["unused"].data.shape == (3,)


def test_layer_norm_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(2.0, 3.0, size=(32, 16))
    out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-8)


def _composite_loss(params, ids, targets):
    """Small network touching every differentiable primitive."""
    h = T.embed(ids, params["emb"])  # [B,Tk,D]
    h = T.add(h, params["pos"])  # rows broadcast
    h = T.layer_norm(h, params["gain"], params["bias"])
    B, S, D = h.shape
    flat = T.reshape(h, (B * S, D))
    q = T.add(T.matmul(flat, params["w1"]), params["b1"])
    q = T.gelu(q)
    q3 = T.reshape(q, (B, S, -1))
    att = T.softmax_rows(T.scale(T.matmul(q3, T.swap_axes(q3, 1, 2)), 0.3))
    ctx = T.matmul(att, q3)
    pooled = T.first_position(ctx)
    logits = T.matmul(pooled, T.swap_axes(params["w2"], 0, 1))
    return T.cross_entropy(logits, targets, ignore_id=-1)


def test_finite_difference_composite_network():
    rng = np.random.default_rng(5)
    params = {
        "emb": T.Tensor(rng.normal(0, 0.5, (7, 6)), name="emb"),
        "pos": T.Tensor(rng.normal(0, 0.5, (4, 6)), name="pos"),
        "gain": T.Tensor(rng.normal(1, 0.1, 6), name="gain"),
        "bias": T.Tensor(rng.normal(0, 0.1, 6), name="bias"),
        "w1": T.Tensor(rng.normal(0, 0.5, (6, 8)), name="w1"),
        "b1": T.Tensor(rng.normal(0, 0.1, 8), name="b1"),
        "w2": T.Tensor(rng.normal(0, 0.5, (5, 8)), name="w2"),
    }
    ids = rng.integers(0, 7, size=(3, 4))
    targets = np.array([1, 4, 2])
    with T.Tape() as tape:
        loss = _composite_loss(params, ids, targets)
    grads = T.backward(tape, loss, params)
    worst, where = finite_difference_check(params, grads, lambda: float(_composite_loss(params, ids, targets).data))
    assert worst <= 1e-4, f"gradient mismatch {worst} at {where}"


def test_ops_without_tape_do_not_record():
    x = T.Tensor(np.ones((2, 2)))
    out = T.gelu(x)
    assert out.grad is None and not T._TAPES


class TestAdam:
    def test_zero_gradients_leave_params_and_moments_unchanged(self):
        p = {"w": T.Tensor(np.array([1.0, -2.0]), name="w")}
        g = {"w": T.Tensor(np.zeros(2))}
        state = T.AdamState()
        before = p["w"].data.copy()
        for _ in range(5):
            T.adam_step(p, g, state, lr=0.1)
        assert np.array_equal(p["w"].data, before)
        assert np.all(state.m["w"] == 0.0) and np.all(state.v["w"] == 0.0)

    def test_constant_gradient_step_approaches_lr(self):
        # fixed point: m -> g, v -> g^2, so |update| -> lr * g/(|g|+eps) ~ lr
        p = {"w": T.Tensor(np.array([0.0]), name="w")}
        g = {"w": T.Tensor(np.array([0.37]))}
        state = T.AdamState()
        lr = 1e-3
        prev = p["w"].data.copy()
        for _ in range(500):
            prev = p["w"].data.copy()
            T.adam_step(p, g, state, lr=lr)
        step_size = abs(float(p["w"].data[0] - prev[0]))
        assert abs(step_size - lr) < lr * 1e-3

    def test_deterministic_over_100_steps(self):
        def run():
            rng = np.random.default_rng(11)
            p = {"w": T.Tensor(rng.normal(size=(4, 3)), name="w")}
            state = T.AdamState()
            for _ in range(100):
                g = {"w": T.Tensor(rng.normal(size=(4, 3)))}
                T.adam_step(p, g, state, lr=1e-2)
            return p["w"].data
        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_shape_mismatch_raises(self):
        p = {"w": T.Tensor(np.zeros((2, 2)), name="w")}
        g = {"w": T.Tensor(np.zeros(3))}
        with pytest.raises(ShapeMismatch):
            T.adam_step(p, g, T.AdamState(), lr=0.1)
