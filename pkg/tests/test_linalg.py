from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from linattn.linalg import (
    ContractViolation,
    axpy,
    elementwise_mul,
    identity,
    matmul,
    matvec,
    outer,
    sigmoid,
    softmax,
    transpose,
    zeros,
)


def softmax_oracle(xs):
    getcontext().prec = 50
    es = [Decimal(x).exp() for x in xs]
    total = sum(es)
    return [float(e / total) for e in es]


def test_matvec_examples():
    assert_array_equal(matvec(identity(3), [1, 2, 3]), [1, 2, 3])
    assert_array_equal(matvec(zeros(2, 2), [5, 7]), [0, 0])
    assert_array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3, 7])


def test_matvec_shape_mismatch():
    with pytest.raises(ContractViolation):
        matvec(identity(3), [1, 2])


def test_outer_examples():
    assert_array_equal(outer([1, 0], [1, 0]), [[1, 0], [0, 0]])
    assert_array_equal(outer([0, 0], [4, 5, 6]), np.zeros((2, 3)))
    assert_array_equal(outer([1, 2], [3, 4]), [[3, 4], [6, 8]])


def test_softmax_examples():
    for c in (-700.0, 0.0, 3.5, 1e6):
        assert_array_equal(softmax([c]), [1.0])
    assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    assert_allclose(softmax([1.0, 2.0, 3.0]), softmax_oracle([1, 2, 3]), rtol=1e-15)


def test_softmax_large_inputs_do_not_overflow():
    out = softmax([1000.0, 1000.0, -1000.0])
    assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-300)


def test_softmax_empty_rejected():
    with pytest.raises(ContractViolation):
        softmax([])


def test_sigmoid_elementwise_matmul():
    assert_array_equal(sigmoid([0.0]), [0.5])
    assert_array_equal(elementwise_mul([1, 2], [0, 5]), [0, 10])
    M = np.random.default_rng(0).standard_normal((3, 4))
    assert_array_equal(matmul(identity(3), M), M)


def test_sigmoid_matches_direct_formula_and_saturates():
    x = np.linspace(-30, 30, 121)
    assert_allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-14)
    out = sigmoid([-1000.0, 1000.0])
    assert out[0] == 0.0 and out[1] == 1.0
    assert np.all(np.isfinite(out))


def test_axpy():
    X, Y = np.ones((2, 2)), identity(2)
    assert_array_equal(axpy(3.0, X, Y), [[4, 3], [3, 4]])
    with pytest.raises(ContractViolation):
        axpy(1.0, np.ones((2, 3)), Y)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_matvec_associativity(r, c, p, seed):
    rng = np.random.default_rng(seed)
    A, B, v = rng.standard_normal((r, c)), rng.standard_normal((c, p)), rng.standard_normal(p)
    lhs, rhs = matvec(matmul(A, B), v), matvec(A, matvec(B, v))
    # relative to the size of the terms summed, since entries can cancel to ~0
    scale = np.abs(A) @ (np.abs(B) @ np.abs(v))
    assert np.all(np.abs(lhs - rhs) <= 1e-10 * scale)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_transpose_involution(r, c, seed):
    M = np.random.default_rng(seed).standard_normal((r, c))
    assert_array_equal(transpose(transpose(M)), M)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=1, max_size=64))
def test_softmax_is_a_distribution(xs):
    # a spread of at most 600 keeps exp(-spread) above the float64 underflow
    p = softmax(xs)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all((p > 0.0) & (p <= 1.0))


def test_operations_are_pure():
    rng = np.random.default_rng(1)
    A, v = rng.standard_normal((5, 5)), rng.standard_normal(5)
    assert_array_equal(matvec(A, v), matvec(A, v))
    assert_array_equal(softmax(v), softmax(v))
    assert_array_equal(outer(v, v), outer(v, v))
