import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heterformer import tensor as T
from heterformer.tensor import (ContractError, GradCheckError, ShapeError, Tape,
                                Tensor, backward, grad_check)

RNG = np.random.default_rng(7)


def finite_arrays(shape):
    return arrays(np.float64, shape,
                  elements=st.floats(-5, 5, allow_nan=False, allow_infinity=False))


# ---------------------------------------------------------------------------
# Forward values


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, expect, atol=1e-12, rtol=0)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_uniform():
    out = T.masked_softmax(Tensor([0.0, 0.0, 0.0]), np.array([True] * 3))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_single_unmasked():
    out = T.masked_softmax(Tensor([5.0, -100.0]), np.array([True, False]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


def test_softmax_reference_values():
    out = T.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.array([True] * 3))
    np.testing.assert_allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ContractError):
        T.masked_softmax(Tensor(np.zeros((2, 3))),
                         np.array([[True, True, True], [False, False, False]]))


def test_layer_norm_constant_row_is_zero():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = T.layer_norm(Tensor(np.full(4, 3.0)), g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-5)


def test_layer_norm_already_normalized():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = T.layer_norm(Tensor([1.0, -1.0]), g, b, eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-12)


def test_layer_norm_scalar_oracle():
    x = np.array([1.0, 2.0, 3.0])
    mu = x.mean()
    sd = math.sqrt(((x - mu) ** 2).mean() + 1e-12)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, (x - mu) / sd, atol=1e-10, rtol=0)


def test_gelu_values():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(6.0)).item() - 6.0) < 1e-6
    assert abs(T.gelu(Tensor(1.0)).item() - 0.84119) < 5e-6


def test_uniform_scores_loss_is_ln_b():
    loss = T.in_batch_cross_entropy(Tensor(np.ones((4, 4))))
    assert abs(loss.item() - math.log(4)) < 1e-9


def test_dominant_diagonal_loss_vanishes():
    loss = T.in_batch_cross_entropy(Tensor(np.eye(3) * 1000.0))
    assert loss.item() < 1e-9


def test_in_batch_loss_scalar_oracle():
    s = RNG.normal(size=(5, 5))
    expect = 0.0
    for i in range(5):
        expect += math.log(sum(math.exp(v) for v in s[i])) - s[i, i]
    expect /= 5
    assert abs(T.in_batch_cross_entropy(Tensor(s)).item() - expect) < 1e-10


def test_in_batch_loss_contracts():
    with pytest.raises(ShapeError):
        T.in_batch_cross_entropy(Tensor(np.zeros((3, 4))))
    with pytest.raises(ContractError):
        T.in_batch_cross_entropy(Tensor(np.zeros((1, 1))))


# ---------------------------------------------------------------------------
# Backward correctness


def test_sum_of_squares_gradient():
    x = T.param(RNG.normal(size=(3, 4)))
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_untracked_inputs_get_no_grads():
    x = Tensor(RNG.normal(size=(3,)))
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    backward(loss, tape)
    assert x.grad is None
    assert not tape.records


def test_backward_requires_scalar():
    x = T.param(np.zeros((2, 2)))
    with Tape() as tape:
        y = T.add(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)


PRIMITIVE_CASES = [
    ("add", lambda a, b: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: T.sum_all(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    ("sub", lambda a, b: T.sum_all(T.mul(T.sub(a, b), T.sub(a, b))), [(2, 3), (2, 3)]),
    ("mul", lambda a, b: T.sum_all(T.mul(a, b)), [(4,), (4,)]),
    ("scale", lambda a: T.sum_all(T.mul(T.scale(a, 1.7), a)), [(3, 2)]),
    ("gelu", lambda a: T.sum_all(T.gelu(a)), [(5,)]),
    ("matmul", lambda a, b: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b))), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: T.sum_all(T.matmul(a, b)), [(2, 3, 4), (2, 4, 2)]),
    ("transpose", lambda a: T.sum_all(T.mul(T.transpose_last(a), T.transpose_last(a))), [(3, 4)]),
    ("reshape", lambda a: T.sum_all(T.mul(T.reshape(a, (6,)), T.reshape(a, (6,)))), [(2, 3)]),
    ("narrow", lambda a: T.sum_all(T.mul(T.narrow(a, 1, 1, 2), T.narrow(a, 1, 1, 2))), [(3, 4)]),
    ("mean", lambda a: T.mean_all(T.mul(a, a)), [(3, 3)]),
    ("layer_norm", lambda a, g, b: T.sum_all(T.mul(T.layer_norm(a, g, b), T.layer_norm(a, g, b))),
     [(2, 4), (4,), (4,)]),
    ("in_batch_xent", lambda a: T.in_batch_cross_entropy(a), [(4, 4)]),
]


@pytest.mark.parametrize("name,f,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_grad_check_primitives(name, f, shapes):
    rng = np.random.default_rng(hash(name) & 0xFFFF)
    inputs = [Tensor(rng.normal(size=s)) for s in shapes]
    report = grad_check(f, inputs)
    assert report["passed"], report


def test_grad_check_concat():
    a, b = Tensor(RNG.normal(size=(2, 3))), Tensor(RNG.normal(size=(2, 3)))

    def f(a, b):
        c = T.concat([a, b], axis=0)
        return T.sum_all(T.mul(c, c))

    assert grad_check(f, [a, b])["passed"]


def test_grad_check_index_rows_with_repeats():
    a = Tensor(RNG.normal(size=(4, 3)))

    def f(a):
        g = T.index_rows(a, [0, 2, 2, 1])
        return T.sum_all(T.mul(g, g))

    assert grad_check(f, [a])["passed"]


def test_grad_check_masked_softmax_dot():
    logits = Tensor(RNG.normal(size=(2, 5)))
    mask = np.array([[True, True, False, True, True],
                     [True, False, True, True, False]])
    w = RNG.normal(size=(2, 5))

    def f(logits):
        return T.sum_all(T.mul(T.masked_softmax(logits, mask), Tensor(w)))

    assert grad_check(f, [logits])["passed"]


def test_masked_positions_get_zero_gradient():
    logits = T.param(RNG.normal(size=(5,)))
    mask = np.array([True, False, True, False, True])
    with Tape() as tape:
        loss = T.sum_all(T.mul(T.masked_softmax(logits, mask), Tensor(RNG.normal(size=5))))
    backward(loss, tape)
    assert logits.grad[1] == 0.0 and logits.grad[3] == 0.0


def test_grad_check_negative_control():
    """A corrupted backward rule must be caught."""

    def bad_square(x):
        out = Tensor(x.data ** 2)

        def back(g):
            if x.tracked:
                x._accumulate(g * 3.0 * x.data)  # wrong: should be 2x

        return T._record((x,), out, back)

    x = Tensor(RNG.normal(size=(4,)) + 2.0)
    report = grad_check(lambda x: T.sum_all(bad_square(x)), [x])
    assert not report["passed"]


def test_grad_check_rejects_nonfinite():
    with pytest.raises(GradCheckError):
        grad_check(lambda x: Tensor(np.inf), [Tensor(np.zeros(2))])


def test_repeated_use_accumulates():
    x = T.param(np.array([2.0, 3.0]))
    with Tape() as tape:
        loss = T.sum_all(T.add(T.mul(x, x), x))  # x^2 + x
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-12)


def test_index_rows_bounds():
    with pytest.raises(ContractError):
        T.index_rows(Tensor(np.zeros((3, 2))), [0, 3])


# ---------------------------------------------------------------------------
# Properties


@given(finite_arrays((3, 4)), finite_arrays((4, 5)))
@settings(max_examples=50, deadline=None)
def test_matmul_matches_einsum(a, b):
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, np.einsum("ij,jk->ik", a, b), atol=1e-9)


@given(finite_arrays((4, 6)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_normalize(x):
    mask = np.ones((4, 6), dtype=bool)
    mask[:, -2:] = False
    y = T.masked_softmax(Tensor(x), mask).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y[:, -2:] == 0.0).all()
    assert (y >= 0).all()


@given(finite_arrays((5,)), finite_arrays((5,)))
@settings(max_examples=50, deadline=None)
def test_add_commutes(a, b):
    x, y = Tensor(a), Tensor(b)
    np.testing.assert_array_equal(T.add(x, y).data, T.add(y, x).data)


@given(finite_arrays((3, 8)))
@settings(max_examples=50, deadline=None)
def test_layer_norm_standardizes(x):
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    # unit variance unless the row is (nearly) constant and eps dominates
    rowvar = x.var(axis=-1)
    for i in range(3):
        if rowvar[i] > 1e-6:
            assert abs(out[i].var() - 1.0) < 1e-6
