"""Dual-path kernel correctness and numba/numpy parity."""

import numpy as np
import pytest

from patchforge import kernels
from patchforge.accel import JIT_ENABLED
from patchforge.rng import substream

needs_jit = pytest.mark.skipif(not JIT_ENABLED, reason="numba path disabled")


def test_segment_sum_basic():
    data = np.array([[1.0], [2.0], [3.0]], dtype=np.float32)
    out = kernels.segment_sum_rows(data, np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(out, [[3.0], [3.0]])


def test_segment_sum_empty_and_errors():
    out = kernels.segment_sum_rows(np.zeros((0, 4), np.float32), np.zeros(0, np.int64), 3)
    assert out.shape == (3, 4) and not out.any()
    with pytest.raises(ValueError):
        kernels.segment_sum_rows(np.zeros((2, 1), np.float32), np.array([0, 5]), 2)
    with pytest.raises(ValueError):
        kernels.segment_sum_rows(np.zeros((2, 1), np.float32), np.array([0]), 2)


def test_segment_sum_total_preserved_f64():
    rng = substream(0, "seg")
    data = rng.normal(size=(500, 7))
    seg = rng.integers(0, 13, 500)
    out = kernels.segment_sum_rows(data, seg, 13)
    np.testing.assert_array_equal(out.sum(axis=0), data.sum(axis=0))


@needs_jit
def test_segment_sum_paths_bit_identical():
    rng = substream(1, "seg-parity")
    for dtype in (np.float32, np.float64):
        data = rng.normal(size=(400, 9)).astype(dtype)
        seg = rng.integers(0, 37, 400)
        a = np.zeros((37, 9), dtype)
        b = np.zeros((37, 9), dtype)
        kernels.segment_sum_rows_numba(data, seg, a)
        kernels.segment_sum_rows_numpy(data, seg, b)
        np.testing.assert_array_equal(a, b)


def test_fisher_yates_distinct_and_in_range():
    rng = substream(2, "fy")
    targets = np.arange(100, 200, dtype=np.int32)
    out = np.empty(30, dtype=np.int64)
    for _ in range(200):
        u = rng.random(30)
        kernels.fisher_yates_take(targets, 0, 100, 30, u, 0, out)
        assert len(set(out.tolist())) == 30
        assert out.min() >= 100 and out.max() < 200


def test_with_replacement_within_range():
    rng = substream(3, "wr")
    targets = np.arange(50, dtype=np.int32)
    out = np.empty(20, dtype=np.int64)
    u = rng.random(20)
    kernels.with_replacement_take(targets, 10, 30, 20, u, 0, out)
    assert out.min() >= 10 and out.max() < 40


def test_jacobi_matches_lapack():
    rng = substream(4, "jac")
    for n in (3, 8, 24):
        base = rng.normal(size=(n, n))
        sym = (base + base.T) / 2
        w, v = kernels.sym_eigh_desc(sym)
        w_ref = np.linalg.eigvalsh(sym)[::-1]
        np.testing.assert_allclose(w, w_ref, atol=1e-10)
        # eigen equation and orthonormality
        np.testing.assert_allclose(sym @ v, v @ np.diag(w), atol=1e-9)
        np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-10)


def test_jacobi_zero_and_diagonal():
    w, v = kernels.sym_eigh_desc(np.zeros((4, 4)))
    np.testing.assert_array_equal(w, np.zeros(4))
    w, v = kernels.sym_eigh_desc(np.diag([1.0, 5.0, 3.0]))
    np.testing.assert_allclose(w, [5.0, 3.0, 1.0], atol=1e-14)


@needs_jit
def test_jacobi_paths_agree():
    rng = substream(5, "jac-parity")
    base = rng.normal(size=(17, 17))
    sym = (base + base.T) / 2
    a1, v1 = sym.copy(), np.eye(17)
    a2, v2 = sym.copy(), np.eye(17)
    kernels.jacobi_sweeps_numba(a1, v1, 1e-14, 50)
    kernels.jacobi_sweeps_numpy(a2, v2, 1e-14, 50)
    np.testing.assert_allclose(a1, a2, atol=1e-10)
    np.testing.assert_allclose(v1, v2, atol=1e-10)


def test_sym_eigh_rejects_nonsquare():
    with pytest.raises(ValueError):
        kernels.sym_eigh_desc(np.zeros((3, 4)))
