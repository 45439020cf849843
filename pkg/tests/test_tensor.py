"""Tape engine: hand-worked oracles, gradient checks, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from needlebench import tensor as T
from needlebench.tensor import (NonFiniteError, Parameter, ShapeError, Tensor,
                                grad_check, no_grad)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward oracles (hand-derived values frozen here) ----------------------


def test_matmul_hand_oracle():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = T.matmul(a, b)
    assert out.data.tolist() == [[17.0], [39.0]]


def test_softmax_hand_oracle():
    # softmax([0, ln 2]) = [1/3, 2/3]
    out = T.softmax(Tensor([0.0, math.log(2.0)]))
    assert np.allclose(out.data, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)


def test_layer_norm_hand_oracle():
    # x=[1,3]: mu=2, biased var=1, xhat = [-1,1]/sqrt(1+eps)
    g = Tensor([1.0, 1.0])
    b = Tensor([0.0, 0.0])
    out = T.layer_norm(Tensor([1.0, 3.0]), g, b)
    expect = np.array([-1.0, 1.0]) / math.sqrt(1.0 + T.LAYER_NORM_EPS)
    assert np.allclose(out.data, expect, atol=1e-15)


def test_linear_hand_oracle():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([10.0, 20.0])
    out = T.linear(x, w, b)
    assert out.data.tolist() == [[11.0, 22.0]]


def test_gelu_hand_oracle():
    # gelu(0) = 0; gelu at large +x approaches x; symmetric tail at -x.
    out = T.gelu(Tensor([0.0, 10.0, -10.0]))
    assert out.data[0] == 0.0
    assert abs(out.data[1] - 10.0) < 1e-12
    assert abs(out.data[2]) < 1e-12


def test_bce_hand_oracle():
    # logit 0 against target 0.5: loss = log 2 regardless of target term.
    out = T.bce_with_logits(Tensor([0.0]), np.array([0.5]))
    assert abs(out.item() - math.log(2.0)) < 1e-15


# -- error contracts ---------------------------------------------------------


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)),
                     Tensor(np.ones(3)))


def test_nonfinite_raises_with_op_name():
    with np.errstate(over="ignore"):
        big = Tensor([1e308])
        with pytest.raises(NonFiniteError) as ei:
            T.add(big, big)
        assert "add" in str(ei.value)
        with pytest.raises(NonFiniteError) as ei:
            T.exp(Tensor([1000.0]))
        assert "exp" in str(ei.value)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


# -- invariants ---------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = rng(seed).normal(0, 5, size=(n, m))
    out = T.softmax(Tensor(x), axis=-1)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all(out.data >= 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1),
       st.floats(-100, 100, allow_nan=False))
def test_softmax_shift_invariance(m, seed, shift):
    x = rng(seed).normal(0, 3, size=m)
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + shift)).data
    assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2 ** 31 - 1))
def test_layer_norm_standardizes(n, seed):
    x = rng(seed).normal(3, 10, size=(4, n))
    out = T.layer_norm(Tensor(x), Tensor(np.ones(n)), Tensor(np.zeros(n)))
    assert np.max(np.abs(out.data.mean(axis=-1))) < 1e-12
    # biased variance of output is var/(var+eps), just below 1
    v = out.data.var(axis=-1)
    assert np.all(v <= 1.0 + 1e-12)
    assert np.all(v > 0.9)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = T.mul(a, 2.0)
    assert out._backward is None and not out.requires_grad


def test_same_parent_twice_accumulates():
    a = Tensor([3.0], requires_grad=True)
    out = T.mean(T.add(a, a))
    out.backward()
    assert a.grad[0] == 2.0


# -- gradient checks ----------------------------------------------------------


def check_unary(op, seed=0, size=(3, 4), scale=1.0, tol=1e-5):
    x = Tensor(rng(seed).normal(0, scale, size=size), requires_grad=True)
    with no_grad():
        out_shape = op(x).shape
    w = rng(seed + 1).normal(0, 1, size=out_shape)  # fixed mixing weights
    err = grad_check(lambda: T.mean(T.mul(op(x), Tensor(w))), [x])
    assert err < tol, f"{op}: {err}"


def test_grad_matmul():
    a = Tensor(rng(1).normal(0, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng(2).normal(0, 1, (4, 2)), requires_grad=True)
    err = grad_check(lambda: T.mean(T.matmul(a, b)), [a, b])
    assert err < 1e-6


def test_grad_matmul_batched():
    a = Tensor(rng(3).normal(0, 1, (2, 3, 4)), requires_grad=True)
    b = Tensor(rng(4).normal(0, 1, (2, 4, 5)), requires_grad=True)
    c = Tensor(rng(5).normal(0, 1, (4, 5)), requires_grad=True)
    err = grad_check(lambda: T.mean(T.matmul(a, b)), [a, b])
    assert err < 1e-6
    err = grad_check(lambda: T.mean(T.matmul(a, c)), [a, c])
    assert err < 1e-6


def test_grad_layer_norm():
    n = 6
    x = Tensor(rng(6).normal(0, 2, (3, n)), requires_grad=True)
    g = Tensor(rng(7).normal(1, 0.2, n), requires_grad=True)
    b = Tensor(rng(8).normal(0, 0.2, n), requires_grad=True)
    w = rng(9).normal(0, 1, (3, n))
    err = grad_check(
        lambda: T.mean(T.mul(T.layer_norm(x, g, b), Tensor(w))), [x, g, b])
    assert err < 1e-5


def test_grad_linear():
    x = Tensor(rng(10).normal(0, 1, (5, 3)), requires_grad=True)
    w = Tensor(rng(11).normal(0, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng(12).normal(0, 1, 4), requires_grad=True)
    err = grad_check(lambda: T.mean(T.linear(x, w, b)), [x, w, b])
    assert err < 1e-5


def test_grad_softmax_cross_entropy():
    # composite: CE(softmax(x), onehot) via explicit log
    x = Tensor(rng(13).normal(0, 2, (4, 5)), requires_grad=True)
    target = np.zeros((4, 5))
    target[np.arange(4), [0, 3, 1, 4]] = 1.0

    def ce():
        p = T.softmax(x, axis=-1)
        return T.mul(T.mean(T.sum_(T.mul(T.log(p), Tensor(target)),
                                   axis=-1)), -1.0)

    err = grad_check(ce, [x])
    assert err < 1e-5


def test_grad_elementwise_and_shape_ops():
    check_unary(T.gelu, seed=20)
    check_unary(T.tanh, seed=21)
    check_unary(T.sigmoid, seed=22)
    check_unary(T.exp, seed=23, scale=0.5)
    check_unary(lambda t: T.relu(t), seed=24)
    check_unary(lambda t: T.abs_(t), seed=25)
    check_unary(lambda t: T.reshape(t, (4, 3)), seed=26)
    check_unary(lambda t: T.transpose(t), seed=27)
    check_unary(lambda t: T.narrow(t, 1, 1, 2), seed=28, tol=1e-5)


def test_grad_binary_ops():
    a = Tensor(rng(30).normal(0, 1, (3, 4)), requires_grad=True)
    b = Tensor(rng(31).normal(0, 1, (3, 4)) + 3.0, requires_grad=True)
    for op in (T.add, T.sub, T.mul, T.div, T.minimum, T.maximum):
        err = grad_check(lambda op=op: T.mean(op(a, b)), [a, b])
        assert err < 1e-5, op.__name__


def test_grad_broadcast_add_mul():
    a = Tensor(rng(32).normal(0, 1, (2, 3, 4)), requires_grad=True)
    v = Tensor(rng(33).normal(0, 1, 4), requires_grad=True)
    err = grad_check(lambda: T.mean(T.add(a, v)), [a, v])
    assert err < 1e-5
    err = grad_check(lambda: T.mean(T.mul(a, v)), [a, v])
    assert err < 1e-5


def test_grad_concat_and_sum():
    a = Tensor(rng(34).normal(0, 1, (2, 3)), requires_grad=True)
    b = Tensor(rng(35).normal(0, 1, (4, 3)), requires_grad=True)
    w = rng(36).normal(0, 1, (6, 3))
    err = grad_check(
        lambda: T.mean(T.mul(T.concat([a, b], axis=0), Tensor(w))), [a, b])
    assert err < 1e-5
    err = grad_check(lambda: T.sum_(T.mul(a, a)), [a])
    assert err < 1e-5


def test_grad_bce_and_losses():
    x = Tensor(rng(37).normal(0, 2, (3, 4)), requires_grad=True)
    t = rng(38).uniform(0, 1, (3, 4))
    err = grad_check(lambda: T.bce_with_logits(x, t), [x])
    assert err < 1e-5
    err = grad_check(lambda: T.mse_loss(x, t), [x])
    assert err < 1e-5
    err = grad_check(lambda: T.l1_loss(x, t), [x])
    assert err < 1e-4  # |.| kink keeps this one looser


def test_grad_mlp_composite():
    x = Tensor(rng(40).normal(0, 1, (4, 3)), requires_grad=True)
    w1 = Tensor(rng(41).normal(0, 0.5, (3, 6)), requires_grad=True)
    b1 = Tensor(np.zeros(6), requires_grad=True)
    w2 = Tensor(rng(42).normal(0, 0.5, (6, 2)), requires_grad=True)
    b2 = Tensor(np.zeros(2), requires_grad=True)
    err = grad_check(lambda: T.mean(T.mlp(x, w1, b1, w2, b2)),
                     [x, w1, b1, w2, b2])
    assert err < 1e-4


def test_parameter_trainable_flag():
    p = Parameter(np.ones(3))
    q = Parameter(np.ones(3), trainable=False)
    assert p.trainable and p.requires_grad
    assert not q.trainable and q.requires_grad  # frozen still carries grads
