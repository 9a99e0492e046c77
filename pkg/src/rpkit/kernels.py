"""Hot inner loops, each with a numba kernel and a numpy twin.

The public names at the bottom are bound to one implementation at import time
according to ``rpkit._jit.USE_NUMBA``. Both variants are always importable under
``*_numba`` / ``*_numpy`` so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.
"""
import numpy as np

from rpkit._jit import USE_NUMBA, njit

# --------------------------------------------------------------------------
# embedding backward: out[idx[i]] += src[i]


def scatter_add_rows_numpy(n_rows, idx, src):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


@njit
def _scatter_add_rows_kernel(out, idx, src):
    n, d = src.shape
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += src[i, j]


def scatter_add_rows_numba(n_rows, idx, src):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    _scatter_add_rows_kernel(out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(src))
    return out


# --------------------------------------------------------------------------
# layer norm over the last axis of a 2-D array


def layer_norm_fwd_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd_numpy(g, xhat, rstd, gamma):
    d = xhat.shape[1]
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    gx_hat = g * gamma
    gx = (gx_hat - gx_hat.mean(axis=1, keepdims=True)
          - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return gx.astype(xhat.dtype, copy=False), ggamma, gbeta


@njit
def _ln_fwd_kernel(x, gamma, beta, eps, y, xhat, rstd):
    n, d = x.shape
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            c = x[i, j] - mu
            v += c * c
        r = 1.0 / np.sqrt(v / d + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]


def layer_norm_fwd_numba(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _ln_fwd_kernel(x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


@njit
def _ln_bwd_kernel(g, xhat, rstd, gamma, gx, ggamma, gbeta):
    n, d = g.shape
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[j]
            a += gh
            b += gh * xhat[i, j]
            ggamma[j] += g[i, j] * xhat[i, j]
            gbeta[j] += g[i, j]
        a /= d
        b /= d
        for j in range(d):
            gx[i, j] = (g[i, j] * gamma[j] - a - xhat[i, j] * b) * rstd[i]


def layer_norm_bwd_numba(g, xhat, rstd, gamma):
    g = np.ascontiguousarray(g)
    gx = np.empty_like(g)
    ggamma = np.zeros(g.shape[1], dtype=g.dtype)
    gbeta = np.zeros(g.shape[1], dtype=g.dtype)
    _ln_bwd_kernel(g, xhat, rstd, gamma, gx, ggamma, gbeta)
    return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# ordered leaf pairs sharing a left, top, right or bottom edge


def aligned_pair_count_numpy(left, top, right, bottom):
    n = left.shape[0]
    if n < 2:
        return 0
    hit = (left[:, None] == left[None, :])
    hit |= top[:, None] == top[None, :]
    hit |= right[:, None] == right[None, :]
    hit |= bottom[:, None] == bottom[None, :]
    return int(hit.sum() - n)


@njit
def _aligned_pair_count_kernel(left, top, right, bottom):
    n = left.shape[0]
    c = 0
    for i in range(n):
        for j in range(n):
            if i != j and (left[i] == left[j] or top[i] == top[j]
                           or right[i] == right[j] or bottom[i] == bottom[j]):
                c += 1
    return c


def aligned_pair_count_numba(left, top, right, bottom):
    return int(_aligned_pair_count_kernel(
        np.asarray(left, np.int64), np.asarray(top, np.int64),
        np.asarray(right, np.int64), np.asarray(bottom, np.int64)))


# --------------------------------------------------------------------------
# index-aligned IoU of (left, top, width, height) boxes


def paired_iou_numpy(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = ix * iy
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a + area_b - inter
    za = area_a == 0
    zb = area_b == 0
    out = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    out[za & zb] = 1.0
    out[za ^ zb] = 0.0
    return out


@njit
def _paired_iou_kernel(a, b, out):
    for i in range(a.shape[0]):
        area_a = a[i, 2] * a[i, 3]
        area_b = b[i, 2] * b[i, 3]
        if area_a == 0.0 and area_b == 0.0:
            out[i] = 1.0
            continue
        if area_a == 0.0 or area_b == 0.0:
            out[i] = 0.0
            continue
        ix = min(a[i, 0] + a[i, 2], b[i, 0] + b[i, 2]) - max(a[i, 0], b[i, 0])
        iy = min(a[i, 1] + a[i, 3], b[i, 1] + b[i, 3]) - max(a[i, 1], b[i, 1])
        if ix <= 0.0 or iy <= 0.0:
            out[i] = 0.0
            continue
        inter = ix * iy
        out[i] = inter / (area_a + area_b - inter)


def paired_iou_numba(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(a.shape[0])
    _paired_iou_kernel(a, b, out)
    return out


# --------------------------------------------------------------------------
# contingency table of two integer labelings


def contingency_numpy(la, lb, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    np.add.at(out, (np.asarray(la), np.asarray(lb)), 1)
    return out


@njit
def _contingency_kernel(la, lb, out):
    for i in range(la.shape[0]):
        out[la[i], lb[i]] += 1


def contingency_numba(la, lb, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    _contingency_kernel(np.asarray(la, np.int64), np.asarray(lb, np.int64), out)
    return out


# --------------------------------------------------------------------------
# fused AdamW update, in place on flat float arrays p, m, v


def adamw_update_numpy(p, g, m, v, lr, b1, b2, wd, bc1, bc2, eps, scale):
    if scale != 1.0:
        g = g * scale
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    if wd:
        p *= 1 - lr * wd
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


@njit(fastmath=True)
def _adamw_kernel(p, g, m, v, lr, b1, b2, wd, bc1, bc2, eps, scale):
    one = p.dtype.type(1.0)
    decay = one - lr * wd
    step = lr / bc1
    rbc2 = one / bc2
    for i in range(p.shape[0]):
        gi = g[i] * scale
        mi = b1 * m[i] + (one - b1) * gi
        vi = b2 * v[i] + (one - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - step * mi / (np.sqrt(vi * rbc2) + eps)


def adamw_update_numba(p, g, m, v, lr, b1, b2, wd, bc1, bc2, eps, scale):
    f = p.dtype.type
    _adamw_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                  f(lr), f(b1), f(b2), f(wd), f(bc1), f(bc2), f(eps), f(scale))


if USE_NUMBA:
    scatter_add_rows = scatter_add_rows_numba
    layer_norm_fwd = layer_norm_fwd_numba
    layer_norm_bwd = layer_norm_bwd_numba
    aligned_pair_count = aligned_pair_count_numba
    paired_iou = paired_iou_numba
    contingency = contingency_numba
    adamw_update = adamw_update_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    layer_norm_fwd = layer_norm_fwd_numpy
    layer_norm_bwd = layer_norm_bwd_numpy
    aligned_pair_count = aligned_pair_count_numpy
    paired_iou = paired_iou_numpy
    contingency = contingency_numpy
    adamw_update = adamw_update_numpy
