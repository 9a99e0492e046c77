"""Latent diffusion over per-element VAE latents, conditioned on HTML embeddings.

The noise predictor is a transformer whose first half feeds long skip
connections into the mirrored second half. Its input tokens are the noisy
latents plus the HTML embeddings plus a broadcast time-step embedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from rpkit import embedding as E
from rpkit.nn import MLP, LayerNorm, Linear, Module, TransformerBlock, key_padding_mask, no_grad
from rpkit.nn import tensor as T
from rpkit.nn.checkpoint import ModelNotTrained
from rpkit.nn.layers import DEFAULT_DTYPE
from rpkit.train import make_batch


class BadConfig(ValueError):
    pass


class BadTimestep(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by time step ``t`` in 0..T (entry 0 is the clean state)."""
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise BadTimestep(f"time step outside 1..{self.T}")
        return t

    def posterior_variance(self, t):
        """Variance of q(z_{t-1} | z_t, z_0); zero at t = 1."""
        t = self.check(t)
        return self.betas[t] * (1 - self.alpha_bar[t - 1]) / (1 - self.alpha_bar[t])


def make_schedule(kind="linear", T=1000, beta_start=1e-4, beta_end=0.02):
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise BadConfig("T must be a positive integer")
    if kind != "linear":
        raise BadConfig(f"unknown schedule kind {kind!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise BadConfig("need 0 < beta_start <= beta_end < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bar)


def _bcast(v, like):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def forward_diffuse(z0, t, schedule, seed=None, noise=None):
    """Closed-form draw ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; returns ``(z_t, eps)``.

    ``t`` is a scalar or broadcasts against the leading axes of ``z0``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    t = schedule.check(t)
    eps = np.random.default_rng(seed).standard_normal(z0.shape) if noise is None else np.asarray(noise, np.float64)
    ab = _bcast(schedule.alpha_bar[t], z0)
    return np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps, eps


def forward_stepwise(z0, t, schedule, step_noises):
    """Apply ``z_s = sqrt(alpha_s) z_{s-1} + sqrt(1 - alpha_s) eps_s`` for s = 1..t."""
    z = np.asarray(z0, dtype=np.float64)
    t = int(schedule.check(t))
    for s in range(1, t + 1):
        z = math.sqrt(schedule.alphas[s]) * z + math.sqrt(1 - schedule.alphas[s]) * step_noises[s - 1]
    return z


def aggregate_noise(step_noises, t, schedule):
    """The single standard-normal draw that makes the closed form equal ``forward_stepwise``."""
    t = int(schedule.check(t))
    acc = np.zeros_like(np.asarray(step_noises[0], dtype=np.float64))
    tail = 1.0
    for s in range(t, 0, -1):
        acc += math.sqrt(1 - schedule.alphas[s]) * tail * step_noises[s - 1]
        tail *= math.sqrt(schedule.alphas[s])
    return acc / math.sqrt(1 - schedule.alpha_bar[t])


def reverse_step(z_t, t, eps_hat, schedule, rng=None, literal=False):
    """One ancestral step from ``z_t`` to ``z_{t-1}`` given predicted noise.

    ``literal=True`` applies ``(z_t - (1 - a_t) / sqrt(1 - a_t) * eps) / sqrt(a_t)``
    with the per-step alpha and no added noise, for comparison only.
    """
    t = int(schedule.check(t))
    z_t = np.asarray(z_t, dtype=np.float64)
    a, ab, b = schedule.alphas[t], schedule.alpha_bar[t], schedule.betas[t]
    if literal:
        return (z_t - (1 - a) / math.sqrt(1 - a) * eps_hat) / math.sqrt(a)
    mean = (z_t - b / math.sqrt(1 - ab) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    sigma = math.sqrt(float(schedule.posterior_variance(t)))
    rng = rng if rng is not None else np.random.default_rng(0)
    return mean + sigma * rng.standard_normal(z_t.shape)


def timestep_features(t, d):
    """Sinusoidal features of integer steps ``t`` (B,), shape (B, d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DmConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    T: int = 100
    d_sem: int = E.D_SEM
    blend_mean: bool = False     # diffuse the posterior mean instead of a draw
    latent_grad: bool = False    # let the noise-prediction loss reach the VAE encoder
    predict: str = "x0"          # backbone output: "x0" (clean latent) or "eps" (noise)
    latent_scale: float | None = None  # multiplier into diffusion space; None = track 1/std while training
    scale_momentum: float = 0.99

    @classmethod
    def full_scale(cls):
        return cls(layers=12, heads=8, T=1000)

    def __post_init__(self):
        if self.layers < 1 or self.T < 1:
            raise BadConfig("layers and T must be positive")
        if self.predict not in ("x0", "eps"):
            raise BadConfig("predict must be 'x0' or 'eps'")
        if self.latent_scale is not None and not self.latent_scale > 0:
            raise BadConfig("latent_scale must be positive")

    def to_dict(self):
        return asdict(self)


class SkipTransformer(Module):
    """Transformer with long skips: block i of the first half feeds the mirrored block."""

    def __init__(self, d, layers, heads, rng, ff_mult=4, dtype=DEFAULT_DTYPE):
        n_half = layers // 2
        self.down = [TransformerBlock(d, heads, rng, ff_mult=ff_mult, dtype=dtype) for _ in range(n_half)]
        self.mid = [TransformerBlock(d, heads, rng, ff_mult=ff_mult, dtype=dtype) for _ in range(layers % 2)]
        self.up = [TransformerBlock(d, heads, rng, ff_mult=ff_mult, dtype=dtype) for _ in range(n_half)]
        self.merge = [Linear(2 * d, d, rng, dtype=dtype) for _ in range(n_half)]

    def __call__(self, x, mask=None):
        skips = []
        for blk in self.down:
            x = blk(x, mask=mask)
            skips.append(x)
        for blk in self.mid:
            x = blk(x, mask=mask)
        for blk, merge in zip(self.up, self.merge):
            x = merge(T.concat([x, skips.pop()], axis=-1))
            x = blk(x, mask=mask)
        return x


class DiffusionGenerator(Module):
    def __init__(self, config=None, latent=128, seed=0, dtype=DEFAULT_DTYPE):
        self.config = c = config or DmConfig()
        self.latent = latent
        self.schedule = make_schedule("linear", c.T)
        rng = np.random.default_rng(seed)
        self.embedder = E.HtmlEmbedder(rng, c.d, c.d_sem, dtype=dtype)
        self.z_in = Linear(latent, c.d, rng, dtype=dtype)
        self.time_mlp = MLP([c.d, 4 * c.d, c.d], rng, dtype)
        self.backbone = SkipTransformer(c.d, c.layers, c.heads, rng, c.ff_mult, dtype)
        self.out_ln = LayerNorm(c.d, dtype)
        self.out = Linear(c.d, latent, rng, dtype=dtype)
        self._adapt_scale = c.latent_scale is None
        self.trained = False

    @property
    def dtype(self):
        return self.out.weight.dtype

    @property
    def scale(self):
        return 1.0 if self.config.latent_scale is None else self.config.latent_scale

    def to_diffusion(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale

    def from_diffusion(self, u):
        return np.asarray(u, dtype=np.float64) / self.scale

    def _track_scale(self, z0, valid):
        if not self._adapt_scale:
            return
        inv = 1.0 / max(float(np.asarray(z0.data, dtype=np.float64)[valid.reshape(-1)].std()), 1e-8)
        c = self.config
        c.latent_scale = inv if c.latent_scale is None else c.scale_momentum * c.latent_scale + (1 - c.scale_momentum) * inv

    def predict_noise(self, z_t, t, h, valid):
        """eps_psi(z_t, t, H) for (B, S, latent) ``z_t`` and per-page steps ``t`` (B,).

        With ``predict="x0"`` the backbone estimates the clean latent and the
        noise follows from the forward relation
        ``eps = (z_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)``.
        """
        b, s = valid.shape
        z_t = T.as_tensor(z_t)
        temb = self.time_mlp(T.Tensor(timestep_features(t, self.config.d).astype(self.dtype)))
        x = self.z_in(z_t) + h + temb.reshape(b, 1, self.config.d)
        x = self.backbone(x, key_padding_mask(valid, self.dtype))
        out = self.out(self.out_ln(x))
        if self.config.predict == "eps":
            return out
        ab = self.schedule.alpha_bar[np.asarray(t)].reshape(b, 1, 1)
        inv = T.Tensor((1 / np.sqrt(1 - ab)).astype(self.dtype))
        return (z_t - out * T.Tensor(np.sqrt(ab).astype(self.dtype))) * inv

    def loss(self, batch, vae, rng, t=None, noise=None, vae_noise=None):
        """Noise-prediction error (squared norm per element) plus the VAE objective."""
        valid = batch.valid
        b, s = valid.shape
        if b == 0 or not valid.any():
            raise ValueError("zero-length page batch")
        w = valid.reshape(-1).astype(np.float64)
        count = float(w.sum())
        vo = vae.loss(batch.tokens.reshape(b * s, -1), rng, noise=vae_noise, weights=w)
        z0 = vo["mu"] if self.config.blend_mean else vo["z"]
        if not self.config.latent_grad:
            z0 = z0.detach()
        self._track_scale(z0, valid)
        z0 = (z0 * self.scale).reshape(b, s, self.latent)
        t = rng.integers(1, self.config.T + 1, size=b) if t is None else np.asarray(t)
        self.schedule.check(t)
        eps = rng.standard_normal((b, s, self.latent)) if noise is None else np.asarray(noise)
        ab = self.schedule.alpha_bar[t].reshape(b, 1, 1)
        z_t = z0 * T.Tensor(np.sqrt(ab).astype(self.dtype)) + T.Tensor((np.sqrt(1 - ab) * eps).astype(self.dtype))
        h = self.embedder(batch)
        eps_hat = self.predict_noise(z_t, t, h, valid)
        err = T.square(eps_hat - T.Tensor(eps.astype(self.dtype))).sum(axis=-1)
        mse = (err * T.Tensor(valid.astype(self.dtype))).sum() * (1.0 / count)
        return {"loss": mse + vo["loss"], "mse": float(mse.data), "vae": float(vo["loss"].data)}

    def denoise(self, z_t, t_start, batch, seed=0, literal=False, h=None):
        """Reverse process from ``t_start`` down to 0, in diffusion space (see ``to_diffusion``)."""
        if not self.trained:
            raise ModelNotTrained("diffusion generator has no trained weights")
        rng = np.random.default_rng(seed)
        valid = batch.valid
        b = valid.shape[0]
        z = np.asarray(z_t, dtype=np.float64)
        with no_grad():
            h = self.embedder(batch) if h is None else h
            for t in range(int(t_start), 0, -1):
                eps_hat = self.predict_noise(z.astype(self.dtype), np.full(b, t), h, valid).data
                z = reverse_step(z, t, eps_hat.astype(np.float64), self.schedule, rng, literal)
        return z

    def sample_latents(self, batch, seed=0, literal=False):
        rng = np.random.default_rng(seed)
        z_T = rng.standard_normal(batch.valid.shape + (self.latent,))
        u = self.denoise(z_T, self.config.T, batch, seed=int(rng.integers(2**31)), literal=literal)
        return self.from_diffusion(u)

    def generate(self, samples, vae, seed=0, literal=False):
        """Token arrays (S, 13) per sample; page ``i`` uses seed ``seed + i``."""
        out = []
        for i, smp in enumerate(samples):
            batch = make_batch([smp], self.dtype)
            z = self.sample_latents(batch, seed + i, literal)[0, :smp.size]
            out.append(vae.decode_argmax(z.astype(vae.dtype)))
        return out

    def config_dict(self):
        return {"kind": "dm", "latent": self.latent, **self.config.to_dict()}
