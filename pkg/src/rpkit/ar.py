"""Masked-latent encoder-decoder generator.

Training: a cosine schedule picks how many element latents to replace with a
learned MASK vector; the encoder reads HTML embeddings plus those masked
latents, and a causal decoder with cross-attention predicts every latent from
the ones before it (teacher forcing on the VAE latents). Predictions are scored
by decoding them with the VAE and taking cross-entropy against the true tokens.

Inference masks everything and decodes left to right.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from rpkit import codec
from rpkit import embedding as E
from rpkit.nn import LayerNorm, Linear, Module, TransformerBlock, causal_mask, key_padding_mask, no_grad
from rpkit.nn import tensor as T
from rpkit.nn.checkpoint import ModelNotTrained
from rpkit.nn.layers import DEFAULT_DTYPE, param
from rpkit.nn.tensor import ShapeMismatch
from rpkit.train import make_batch


@dataclass
class ArConfig:
    d: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    d_sem: int = E.D_SEM
    blend_mean: bool = False     # blend/teacher-force with the posterior mean instead of a draw
    stop_grad: bool = False      # do not backpropagate generator loss into the VAE encoder
    feedback: str = "reencode"   # "reencode" or "raw" latent fed back at inference

    @classmethod
    def full_scale(cls):
        return cls(enc_layers=6, dec_layers=6, heads=8)

    def __post_init__(self):
        if self.feedback not in ("reencode", "raw"):
            raise ValueError("feedback must be 'reencode' or 'raw'")

    def to_dict(self):
        return asdict(self)


def mask_ratio(r):
    """Cosine schedule: fraction of positions masked at progress ``r``."""
    return math.cos(math.pi * r / 2)


def mask_count(s, r):
    if not 0 <= r < 1:
        raise ValueError("r must lie in [0, 1)")
    return min(s, max(1, math.ceil(mask_ratio(r) * s)))


def build_mask(s, r, seed=None, rng=None):
    """Binary mask with ``ceil(cos(pi r / 2) * s)`` ones at uniformly chosen positions."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    m = np.zeros(s, dtype=np.float64)
    m[rng.choice(s, size=mask_count(s, r), replace=False)] = 1.0
    return m


def mask_latents(z, mask, mask_vector):
    """Row-wise blend ``m_i * MASK + (1 - m_i) * z_i`` on numpy arrays."""
    z = np.asarray(z)
    mask = np.asarray(mask, dtype=z.dtype)
    mask_vector = np.asarray(mask_vector, dtype=z.dtype)
    if mask.shape != z.shape[:-1] or mask_vector.shape != z.shape[-1:]:
        raise ShapeMismatch(f"mask {mask.shape} / MASK {mask_vector.shape} vs latents {z.shape}")
    m = mask[..., None]
    return m * mask_vector + (1 - m) * z


class ArGenerator(Module):
    def __init__(self, config=None, latent=128, seed=0, dtype=DEFAULT_DTYPE):
        self.config = c = config or ArConfig()
        self.latent = latent
        rng = np.random.default_rng(seed)
        self.embedder = E.HtmlEmbedder(rng, c.d, c.d_sem, dtype=dtype)
        self.z_in = Linear(latent, c.d, rng, dtype=dtype) if latent != c.d else None
        self.mask_vec = param((rng.standard_normal(latent) * 0.02).astype(dtype))
        self.bos = param((rng.standard_normal(latent) * 0.02).astype(dtype))
        self.enc = [TransformerBlock(c.d, c.heads, rng, ff_mult=c.ff_mult, dtype=dtype) for _ in range(c.enc_layers)]
        self.enc_ln = LayerNorm(c.d, dtype)
        self.dec = [TransformerBlock(c.d, c.heads, rng, cross=True, ff_mult=c.ff_mult, dtype=dtype)
                    for _ in range(c.dec_layers)]
        self.dec_ln = LayerNorm(c.d, dtype)
        self.head = Linear(c.d, latent, rng, dtype=dtype)
        self.trained = False

    @property
    def dtype(self):
        return self.bos.dtype

    def _lift(self, z):
        return z if self.z_in is None else self.z_in(z)

    def encode_context(self, h, z_masked, valid):
        x = h + self._lift(z_masked)
        pad = key_padding_mask(valid, self.dtype)
        for blk in self.enc:
            x = blk(x, mask=pad)
        return self.enc_ln(x), pad

    def decode_latents(self, h, z_prev, mem, mem_mask):
        """Predicted latents from decoder inputs ``h + z_prev`` (both (B, S, .))."""
        x = h + self._lift(z_prev)
        cm = causal_mask(x.shape[1], self.dtype)
        for blk in self.dec:
            x = blk(x, mask=cm, mem=mem, mem_mask=mem_mask)
        return self.head(self.dec_ln(x))

    def _shift(self, z):
        b = z.shape[0]
        bos = T.reshape(self.bos, (1, 1, self.latent)) * T.Tensor(np.ones((b, 1, 1), self.dtype))
        return T.concat([bos, z[:, :-1]], axis=1)

    def blend(self, z, mask):
        m = T.Tensor(mask[..., None].astype(self.dtype))
        return z * (1.0 - m) + self.mask_vec * m

    def sample_masks(self, valid, rng):
        b, s = valid.shape
        out = np.zeros((b, s))
        for i in range(b):
            n = int(valid[i].sum())
            out[i, :n] = build_mask(n, rng.random(), rng=rng)
        return out

    def loss(self, batch, vae, rng, masks=None, noise=None):
        """Generator cross-entropy (through the VAE decoder) plus the VAE objective.

        Both terms are means over the valid elements of the batch.
        """
        valid = batch.valid
        b, s = valid.shape
        if b == 0 or not valid.any():
            raise ValueError("zero-length page batch")
        flat_tok = batch.tokens.reshape(b * s, codec.W)
        w = valid.reshape(-1).astype(np.float64)
        count = float(w.sum())
        vo = vae.loss(flat_tok, rng, noise=noise, weights=w)
        z = vo["mu"] if self.config.blend_mean else vo["z"]
        if self.config.stop_grad:
            z = z.detach()
        z = z.reshape(b, s, self.latent)
        masks = self.sample_masks(valid, rng) if masks is None else masks
        h = self.embedder(batch)
        mem, mem_mask = self.encode_context(h, self.blend(z, masks), valid)
        zhat = self.decode_latents(h, self._shift(z), mem, mem_mask)
        logits = vae.decode(zhat.reshape(b * s, self.latent))
        ce = vae.reconstruction_ce(logits, flat_tok, w) * (1.0 / count)
        total = ce + vo["loss"]
        return {"loss": total, "gen_ce": float(ce.data), "vae": float(vo["loss"].data), "zhat": zhat}

    def generate_latents(self, batch, vae):
        """Sequentially emitted latents, (B, S, latent)."""
        if not self.trained:
            raise ModelNotTrained("AR generator has no trained weights")
        valid = batch.valid
        b, s = valid.shape
        with no_grad():
            h = self.embedder(batch)
            zm = np.broadcast_to(self.mask_vec.data, (b, s, self.latent))
            mem, mem_mask = self.encode_context(h, T.Tensor(np.ascontiguousarray(zm)), valid)
            prev = np.zeros((b, s, self.latent), self.dtype)
            prev[:, 0] = self.bos.data
            out = np.zeros((b, s, self.latent), self.dtype)
            for i in range(s):
                zhat = self.decode_latents(h[:, :i + 1], T.Tensor(prev[:, :i + 1]), mem, mem_mask).data[:, i]
                out[:, i] = zhat
                if i + 1 < s:
                    prev[:, i + 1] = self._feedback(zhat, vae)
        return out

    def _feedback(self, zhat, vae):
        if self.config.feedback == "raw":
            return zhat
        return vae.encode_mean(vae.decode_argmax(zhat))

    def generate(self, samples, vae, seed=0):
        """Generate token arrays for each sample; returns a list of (S, 13) arrays.

        Decoding is deterministic (argmax); ``seed`` is accepted for interface
        symmetry with the diffusion sampler and does not change the result.
        """
        out = []
        for smp in samples:
            batch = make_batch([smp], self.dtype)
            z = self.generate_latents(batch, vae)[0, :smp.size]
            out.append(vae.decode_argmax(z))
        return out

    def config_dict(self):
        return {"kind": "ar", "latent": self.latent, **self.config.to_dict()}
