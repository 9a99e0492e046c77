"""The numba kernels and their numpy twins must agree."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpkit import _jit, kernels

seeds = st.integers(0, 2**32 - 1)


def test_dispatch_follows_flag():
    name = "numba" if _jit.USE_NUMBA else "numpy"
    assert kernels.adamw_update is getattr(kernels, f"adamw_update_{name}")
    assert kernels.paired_iou is getattr(kernels, f"paired_iou_{name}")


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 30), st.integers(1, 40))
def test_scatter_add_rows(seed, n_rows, n_src):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_rows, n_src)
    src = rng.standard_normal((n_src, 3))
    a = kernels.scatter_add_rows_numpy(n_rows, idx, src)
    b = kernels.scatter_add_rows_numba(n_rows, idx, src)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from([np.float32, np.float64]))
def test_layer_norm(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 7)).astype(dtype) * 3
    gamma = rng.standard_normal(7).astype(dtype)
    beta = rng.standard_normal(7).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    fa = kernels.layer_norm_fwd_numpy(x, gamma, beta, 1e-5)
    fb = kernels.layer_norm_fwd_numba(x, gamma, beta, 1e-5)
    for u, w in zip(fa, fb):
        np.testing.assert_allclose(u, w, rtol=tol, atol=tol)
    g = rng.standard_normal((5, 7)).astype(dtype)
    ba = kernels.layer_norm_bwd_numpy(g, fa[1], fa[2], gamma)
    bb = kernels.layer_norm_bwd_numba(g, fa[1], fa[2], gamma)
    for u, w in zip(ba, bb):
        np.testing.assert_allclose(u, w, rtol=tol, atol=tol)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(0, 25))
def test_aligned_pair_count(seed, n):
    rng = np.random.default_rng(seed)
    cols = [rng.integers(0, 6, n) for _ in range(4)]
    assert kernels.aligned_pair_count_numpy(*cols) == kernels.aligned_pair_count_numba(*cols)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 30))
def test_paired_iou(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 20, (n, 4)).astype(float)
    b = rng.integers(0, 20, (n, 4)).astype(float)
    a[: n // 4, 2] = 0  # some degenerate boxes
    np.testing.assert_allclose(kernels.paired_iou_numpy(a, b), kernels.paired_iou_numba(a, b), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 50))
def test_contingency(seed, n):
    rng = np.random.default_rng(seed)
    la, lb = rng.integers(0, 5, n), rng.integers(0, 4, n)
    np.testing.assert_array_equal(kernels.contingency_numpy(la, lb, 5, 4), kernels.contingency_numba(la, lb, 5, 4))


@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_adamw_update(dtype, tol):
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(50).astype(dtype)
    states = []
    for fn in (kernels.adamw_update_numpy, kernels.adamw_update_numba):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        for t in range(1, 6):
            g = np.random.default_rng(t).standard_normal(50).astype(dtype)
            fn(p, g, m, v, 1e-2, 0.9, 0.99, 0.01, 1 - 0.9 ** t, 1 - 0.99 ** t, 1e-8, 0.5)
        states.append((p, m, v))
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
