"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rpkit import kernels
from rpkit.nn.tensor import ShapeMismatch


class DivergenceDetected(FloatingPointError):
    pass


def ensure_finite(value, step=None):
    """Raise ``DivergenceDetected`` when a loss value is NaN or infinite."""
    v = float(value)
    if not np.isfinite(v):
        where = "" if step is None else f" at step {step}"
        raise DivergenceDetected(f"loss became {v}{where}")
    return v


@dataclass
class OptimizerConfig:
    learning_rate: float = 1.2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class AdamW:
    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = config or OptimizerConfig()
        self.t = 0
        self.lr_scale = 1.0  # schedule multiplier applied on top of config.learning_rate
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self):
        c = self.config
        self.t += 1
        scale = 1.0
        if c.clip_norm is not None:
            n = self.grad_norm()
            if n > c.clip_norm:
                scale = c.clip_norm / (n + 1e-12)
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeMismatch(f"gradient {p.grad.shape} vs parameter {p.data.shape}")
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            kernels.adamw_update(p.data, p.grad.astype(p.data.dtype, copy=False), m, v,
                                 c.learning_rate * self.lr_scale, c.beta1, c.beta2, c.weight_decay,
                                 bc1, bc2, c.eps, scale)

    def state_dict(self):
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


def optimizer_step(params, grads, config, state=None):
    """Functional AdamW update: returns ``(new_params, new_state)``.

    ``state`` is ``{"t", "m", "v"}`` or None for a fresh start; inputs are not
    modified.
    """
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeMismatch(f"gradient {np.shape(g)} vs parameter {np.shape(p)}")
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    c = config
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = c.beta1 * m + (1 - c.beta1) * g
        v = c.beta2 * v + (1 - c.beta2) * g * g
        p = p * (1 - c.learning_rate * c.weight_decay)
        p = p - c.learning_rate * (m / (1 - c.beta1 ** t)) / (np.sqrt(v / (1 - c.beta2 ** t)) + c.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}
