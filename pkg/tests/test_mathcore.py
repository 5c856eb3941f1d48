from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from s4c.errors import ArgumentError, ShapeError
from s4c.mathcore import argmax, check_prob_dist, matmul, rms_normalize, softmax, temper, top_k

finite = st.floats(-30, 30, allow_nan=False)


def test_matmul_examples():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])
    assert np.array_equal(matmul(np.zeros((2, 3)), m), np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_softmax_examples():
    assert np.allclose(softmax([4.0, 4.0, 4.0]), [1 / 3] * 3, atol=1e-15)
    # mpmath reference values
    assert np.allclose(softmax([2.0, 0.0]), [0.880797077977882444, 0.119202922022117556], atol=1e-15)
    assert np.array_equal(softmax([1.0, 5.0, 5.0], 0.0), [0.0, 1.0, 0.0])


def test_softmax_rejects_bad_input():
    with pytest.raises(ArgumentError):
        softmax([1.0, 2.0], -0.5)
    with pytest.raises(ShapeError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 5.0))
def test_softmax_is_a_distribution(logits, temp):
    p = softmax(logits, temp)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    # logits closer than float resolution tie in p, so compare values rather than indices
    assert p[argmax(p)] == p.max() == p[int(np.argmax(logits))]


@given(arrays(np.float64, st.integers(2, 10), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant(logits, shift):
    assert np.allclose(softmax(logits), softmax(logits + shift), atol=1e-12)


def test_softmax_rows():
    x = np.array([[2.0, 0.0], [0.0, 0.0]])
    assert np.allclose(softmax(x), [[0.880797077977882444, 0.119202922022117556], [0.5, 0.5]])


def test_temper_matches_softmax_of_logs():
    p = np.array([0.1, 0.6, 0.3])
    for t in (0.5, 1.0, 2.0):
        assert np.allclose(temper(p, t), softmax(np.log(p), t), atol=1e-14)
    assert np.array_equal(temper(p, 0), [0, 1, 0])


def test_top_k_examples():
    assert top_k([0.1, 0.7, 0.2], 1) == [(1, 0.7)]
    assert top_k([0.4, 0.4, 0.2], 2) == [(0, 0.4), (1, 0.4)]
    assert top_k([0.25] * 4, 3) == [(0, 0.25), (1, 0.25), (2, 0.25)]


def test_top_k_bounds():
    with pytest.raises(ArgumentError):
        top_k([0.5, 0.5], 3)
    with pytest.raises(ArgumentError):
        top_k([0.5, 0.5], 0)


@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(0, 1)), st.data())
def test_top_k_sorted_and_stable(p, data):
    k = data.draw(st.integers(1, p.size))
    out = top_k(p, k)
    probs = [v for _, v in out]
    assert probs == sorted(probs, reverse=True)
    for (i, a), (j, b) in zip(out, out[1:]):
        assert a > b or i < j


def test_rms_normalize_examples():
    assert np.allclose(rms_normalize([1.0, 1.0, 1.0, 1.0], np.ones(4), 1e-12), 1.0)
    assert np.allclose(rms_normalize([2.0, 2.0], np.ones(2), 1e-12), 1.0)
    assert np.array_equal(rms_normalize(np.zeros(3), np.ones(3), 1e-6), np.zeros(3))


def test_rms_normalize_errors():
    with pytest.raises(ShapeError):
        rms_normalize(np.ones(3), np.ones(2))
    with pytest.raises(ArgumentError):
        rms_normalize(np.ones(3), np.ones(3), 0.0)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-10, 10)).filter(lambda x: np.abs(x).max() > 1e-3))
def test_rms_normalize_unit_rms(x):
    y = rms_normalize(x, np.ones(x.size), 1e-12)
    assert abs(np.sqrt(np.mean(y * y)) - 1.0) < 1e-6


def test_check_prob_dist():
    check_prob_dist([0.25, 0.75])
    for bad in ([0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]):
        with pytest.raises(ArgumentError):
            check_prob_dist(bad)
    with pytest.raises(ShapeError):
        check_prob_dist([])
