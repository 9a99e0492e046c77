"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from rpkit.nn.tensor import no_grad


def numeric_grad(fn, p, coords, eps):
    out = np.empty(len(coords))
    flat = p.data.reshape(-1)
    with no_grad():
        for n, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + eps
            hi = float(fn().data)
            flat[i] = old - eps
            lo = float(fn().data)
            flat[i] = old
            out[n] = (hi - lo) / (2 * eps)
    return out


def grad_check(fn, params, eps=1e-4, max_coords=48, seed=0, floor=1e-6, return_details=False):
    """Largest relative error between analytic and finite-difference gradients.

    ``fn`` takes no arguments and returns a scalar ``Tensor``; it must be
    deterministic (re-seed any noise inside it). For each parameter up to
    ``max_coords`` entries are probed and the error is
    ``||a - n|| / max(||a||, ||n||, floor * max(1, |loss|))`` over those entries;
    the floor scales with the loss like finite-difference round-off does, and keeps
    gradients that vanish analytically (e.g. a key bias under softmax) from
    turning round-off into a large ratio.
    Run it on float64 parameters; float32 differences are too noisy.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    floor = floor * max(1.0, abs(float(loss.data)))
    worst = 0.0
    details = []
    for p in params:
        size = p.data.size
        coords = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        analytic = np.zeros(len(coords)) if p.grad is None else p.grad.reshape(-1)[coords].astype(np.float64)
        numeric = numeric_grad(fn, p, coords, eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
        err = float(np.linalg.norm(analytic - numeric) / denom)
        details.append(err)
        worst = max(worst, err)
    return (worst, details) if return_details else worst
