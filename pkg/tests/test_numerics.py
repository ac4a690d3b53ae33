import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginmerge.errors import CorruptionError, NumericError, ShapeError
from marginmerge.numerics import (
    PsdFactor,
    SeededRng,
    decode_matrix,
    encode_matrix,
    grad_check,
    load_matrix,
    matmul,
    psd_factor,
    sample_gaussian,
    save_matrix,
)


def test_matmul_examples():
    M = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), M), M)
    np.testing.assert_array_equal(matmul(np.zeros((1, 3)), M), np.zeros((1, 4)))
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative(n, k, p, q, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, p)), rng.normal(size=(p, q))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * max(1.0, np.linalg.norm(left))


# ---------------------------------------------------------------- rng


def test_rng_reproducible_and_labelled():
    a = SeededRng(7).substream("x", 3).normal(5)
    b = SeededRng(7).substream("x", 3).normal(5)
    c = SeededRng(7).substream("x", 4).normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, SeededRng(8).substream("x", 3).normal(5))


def test_substream_ignores_parent_consumption():
    parent = SeededRng(1)
    first = parent.substream("k").normal(3)
    parent.normal(100)
    np.testing.assert_array_equal(first, parent.substream("k").normal(3))


def test_rng_known_values():
    # frozen: guards against silent changes to key derivation
    got = SeededRng(0, "probe").normal(3)
    np.testing.assert_array_equal(got, [0.2050164318257049, 0.9743714578047251, 0.49148489331925777])


# ---------------------------------------------------------------- psd


def test_psd_factor_examples():
    np.testing.assert_array_equal(psd_factor(np.eye(2), floor=0).lower, np.eye(2))
    np.testing.assert_allclose(psd_factor(np.zeros((2, 2)), floor=1e-4).lower, 1e-2 * np.eye(2), rtol=1e-12)
    np.testing.assert_array_equal(psd_factor([[4.0, 0.0], [0.0, 9.0]], floor=0).lower, np.diag([2.0, 3.0]))


def test_psd_factor_rejects_bad_input():
    with pytest.raises(ShapeError):
        psd_factor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        psd_factor([[1.0, 0.5], [0.0, 1.0]])


def test_psd_factor_singular_without_floor():
    # floor 0 factors singular input exactly instead of perturbing it
    np.testing.assert_array_equal(psd_factor(np.zeros((2, 2)), floor=0).lower, np.zeros((2, 2)))
    x = np.random.default_rng(0).normal(size=(2, 5))
    lower = psd_factor(x.T @ x, floor=0).lower
    assert np.array_equal(np.tril(lower), lower)
    assert np.linalg.norm(lower @ lower.T - x.T @ x) <= 1e-9 * np.linalg.norm(x.T @ x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_psd_factor_roundtrip(d, n, seed):
    # n < d gives a rank-deficient covariance that needs the floor
    x = np.random.default_rng(seed).normal(size=(n, d))
    sigma = x.T @ x / n
    fac = psd_factor(sigma, floor=1e-6)
    recon = fac.lower @ fac.lower.T
    assert np.allclose(np.tril(fac.lower), fac.lower)
    target = sigma
    if np.linalg.norm(recon - sigma) > 1e-9 * max(1.0, np.linalg.norm(sigma)):
        target = sigma + fac.floor * np.eye(d)
    assert np.linalg.norm(recon - target) <= 1e-9 * max(1.0, np.linalg.norm(target))


# ---------------------------------------------------------------- sampling


def test_sample_gaussian_zero_factor_returns_mean():
    mean = np.array([1.5, -2.0, 3.0])
    fac = PsdFactor(np.zeros((3, 3)), 0.0)
    np.testing.assert_array_equal(sample_gaussian(mean, fac, SeededRng(0)), mean)


def test_sample_gaussian_reproducible():
    fac = psd_factor(np.eye(4), floor=0)
    a = sample_gaussian(np.zeros(4), fac, SeededRng(11, "s"))
    b = sample_gaussian(np.zeros(4), fac, SeededRng(11, "s"))
    np.testing.assert_array_equal(a, b)


def test_sample_gaussian_monte_carlo_variance():
    fac = psd_factor(4.0 * np.eye(3), floor=0)
    x = sample_gaussian(np.zeros(3), fac, SeededRng(3), n=100_000)
    var = x.var(axis=0)
    assert np.all(np.abs(var - 4.0) < 0.05 * 4.0)


def test_sample_gaussian_shape_mismatch():
    with pytest.raises(ShapeError):
        sample_gaussian(np.zeros(3), psd_factor(np.eye(2), 0), SeededRng(0))


# ---------------------------------------------------------------- grad check


def test_grad_check_square():
    def f(ps):
        (x,) = ps
        return float(x[0] ** 2), [2 * x]

    assert grad_check(f, [np.array([3.0])], eps=1e-5) < 1e-8


def test_grad_check_constant_and_linear():
    assert grad_check(lambda ps: (1.0, [np.zeros_like(ps[0])]), [np.ones((2, 2))]) == 0.0
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert grad_check(lambda ps: (float(ps[0].sum()), [np.ones_like(ps[0])]), [x]) < 1e-10


def test_grad_check_detects_wrong_gradient():
    def f(ps):
        return float((ps[0] ** 2).sum()), [ps[0]]  # missing factor 2

    assert grad_check(f, [np.array([1.0, 2.0])]) > 0.4


def test_grad_check_restores_params():
    x = np.array([1.0, 2.0, 3.0])
    before = x.copy()
    grad_check(lambda ps: (float((ps[0] ** 3).sum()), [3 * ps[0] ** 2]), [x])
    np.testing.assert_array_equal(x, before)


def test_grad_check_nonfinite():
    with pytest.raises(NumericError):
        grad_check(lambda ps: (float("nan"), [np.zeros(1)]), [np.zeros(1)])


# ---------------------------------------------------------------- SMPMAT01


def test_encode_layout_by_hand():
    buf = encode_matrix([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert buf[:8] == b"SMPMAT01"
    assert struct.unpack("<QQ", buf[8:24]) == (2, 3)
    assert struct.unpack("<6d", buf[24:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_matrix_roundtrip_bitwise(r, c, seed):
    a = np.random.default_rng(seed).normal(size=(r, c)) * 1e3
    b = decode_matrix(encode_matrix(a))
    assert b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_matrix_file_roundtrip(tmp_path):
    a = np.array([[np.pi, -0.0], [1e-300, 1e300]])
    digest = save_matrix(tmp_path / "a.mat", a)
    assert len(digest) == 64
    assert load_matrix(tmp_path / "a.mat").tobytes() == a.tobytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b[:-1],
        lambda b: b + b"\x00",
        lambda b: b"SMPMAT02" + b[8:],
        lambda b: b[:10],
    ],
)
def test_corrupt_matrix_rejected(mutate):
    with pytest.raises(CorruptionError):
        decode_matrix(mutate(encode_matrix(np.ones((2, 2)))))
