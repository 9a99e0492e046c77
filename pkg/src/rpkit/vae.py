"""Per-element variational autoencoder over the 13 rendering-parameter tokens.

The encoder input is the one-hot (13 x 1993) element matrix. Multiplying a
one-hot row by a weight matrix only selects a row, so the first layer is stored
as one table holding, for every slot, the rows of its legal tokens plus PAD.
That is the same linear map restricted to the inputs that can occur.

The decoder emits 13 categorical heads, each over its parameter's legal tokens
only. Columns for illegal tokens are never produced, which is the same as
masking them with -inf before the softmax; ``decode_logits`` exposes the full
(13, 1993) view with those -inf entries.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from rpkit import codec
from rpkit.nn import AdamW, Embedding, Linear, Module, OptimizerConfig, ensure_finite, no_grad
from rpkit.nn import tensor as T
from rpkit.nn.layers import DEFAULT_DTYPE, param
from rpkit.nn.tensor import NonFinite

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    latent: int = 128
    hidden: tuple = (512, 256, 128, 128)
    lambda_kl: float = 1e-6
    in_std: float = 0.3

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 4:
            raise ValueError("hidden must list 4 widths (5 linear maps per side)")
        if self.latent < 1 or self.lambda_kl < 0:
            raise ValueError("latent must be positive and lambda_kl non-negative")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _slot_tables(vocab, with_pad):
    lookup = np.full((codec.W, codec.VOCAB_SIZE), -1, np.int64)
    bounds, tokens = [], []
    n = 0
    for k, p in enumerate(codec.RP_NAMES):
        toks = vocab.legal_tokens(p)
        if with_pad and codec.PAD not in toks:
            toks = np.append(toks, codec.PAD)
        lookup[k, toks] = n + np.arange(len(toks))
        bounds.append((n, n + len(toks)))
        tokens.append(toks)
        n += len(toks)
    return lookup, bounds, np.concatenate(tokens)


class RpVae(Module):
    def __init__(self, config=None, vocab=codec.DEFAULT_VOCAB, seed=0, dtype=DEFAULT_DTYPE):
        self.config = config or VaeConfig()
        self.vocab = vocab
        c = self.config
        rng = np.random.default_rng(seed)
        h = c.hidden
        self._in_lookup, _, _ = _slot_tables(vocab, with_pad=True)
        self._out_lookup, self.out_bounds, self._out_tokens = _slot_tables(vocab, with_pad=False)
        n_in = int(self._in_lookup.max()) + 1
        self.n_out = len(self._out_tokens)

        self.in_table = Embedding(n_in, h[0], rng, dtype, std=c.in_std)
        self.in_bias = param(np.zeros(h[0], dtype))
        self.enc = [Linear(a, b, rng, dtype=dtype) for a, b in zip(h[:-1], h[1:])]
        self.enc_out = Linear(h[-1], 2 * c.latent, rng, dtype=dtype)
        rev = (c.latent,) + h[::-1]
        self.dec = [Linear(a, b, rng, dtype=dtype) for a, b in zip(rev[:-1], rev[1:])]
        self.dec_out = Linear(h[0], self.n_out, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.in_bias.dtype

    @property
    def latent_dim(self):
        return self.config.latent

    # ---- encoder -------------------------------------------------------------

    def input_rows(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != codec.W:
            raise codec.InvalidVector(f"expected (N, {codec.W}) tokens, got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= codec.VOCAB_SIZE):
            raise codec.InvalidVector("token id outside the vocabulary")
        rows = self._in_lookup[np.arange(codec.W), tokens]
        if (rows < 0).any():
            n, k = np.argwhere(rows < 0)[0]
            raise codec.InvalidVector(
                f"row {n}: token {tokens[n, k]} is not legal for {codec.RP_NAMES[k]}")
        return rows

    def encode(self, tokens):
        """(N, 13) tokens -> (mu, logvar), each an (N, latent) Tensor."""
        rows = self.input_rows(tokens)
        x = self.in_table(rows).sum(axis=1) + self.in_bias
        for layer in self.enc:
            x = layer(T.gelu(x))
        out = self.enc_out(T.gelu(x))
        d = self.config.latent
        return out[:, :d], out[:, d:]

    def encode_mean(self, tokens):
        with no_grad():
            mu, _ = self.encode(tokens)
        return mu.data

    def sample(self, mu, logvar, seed=0):
        """Reparameterised draw ``mu + exp(logvar / 2) * eps`` as a numpy array."""
        mu = np.asarray(getattr(mu, "data", mu))
        logvar = np.asarray(getattr(logvar, "data", logvar))
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
        return (mu + np.exp(0.5 * logvar) * eps).astype(mu.dtype)

    # ---- decoder -------------------------------------------------------------

    def decode(self, z):
        """Compact logits (N, n_out); head k occupies columns ``out_bounds[k]``."""
        z = T.as_tensor(z)
        if not np.isfinite(z.data).all():
            raise NonFinite("latent contains NaN or Inf")
        x = z
        for i, layer in enumerate(self.dec):
            x = layer(x if i == 0 else T.gelu(x))
        return self.dec_out(T.gelu(x))

    def _argmax_compact(self, logits):
        out = np.empty((logits.shape[0], codec.W), np.int64)
        for k, (a, b) in enumerate(self.out_bounds):
            out[:, k] = self._out_tokens[a + logits[:, a:b].argmax(axis=1)]
        return out

    def decode_argmax(self, z):
        with no_grad():
            logits = self.decode(np.asarray(getattr(z, "data", z), dtype=self.dtype)).data
        return self._argmax_compact(logits)

    def decode_logits(self, z):
        """Full (N, 13, 1993) logits with -inf on every illegal token."""
        with no_grad():
            logits = self.decode(np.asarray(getattr(z, "data", z), dtype=self.dtype)).data
        full = np.full((logits.shape[0], codec.W, codec.VOCAB_SIZE), -np.inf, logits.dtype)
        for k, (a, b) in enumerate(self.out_bounds):
            full[:, k, self._out_tokens[a:b]] = logits[:, a:b]
        return full

    def targets(self, tokens, weights=None):
        """Absolute compact column of each target token, (N, 13).

        Rows with zero weight may hold anything (e.g. batch padding).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        safe = np.clip(tokens, 0, codec.VOCAB_SIZE - 1)
        cols = self._out_lookup[np.arange(codec.W), safe]
        live = np.ones(len(tokens), bool) if weights is None else np.asarray(weights) != 0
        bad = (cols < 0) & live[:, None]
        if bad.any():
            n, k = np.argwhere(bad)[0]
            raise codec.InvalidVector(f"row {n}: token {tokens[n, k]} is not legal for {codec.RP_NAMES[k]}")
        starts = np.array([a for a, _ in self.out_bounds])
        return np.where(cols < 0, starts[None, :], cols)

    def reconstruction_ce(self, logits, tokens, weights=None):
        """Weighted sum over rows of the 13 per-head cross-entropies."""
        return T.grouped_cross_entropy(logits, self.out_bounds, self.targets(tokens, weights), weights)

    # ---- objective -------------------------------------------------------------

    def loss(self, tokens, rng=None, noise=None, weights=None, lambda_kl=None):
        """Mean over (weighted) elements of CE + lambda_kl * KL, one latent draw each.

        Returns a dict with the scalar ``loss`` Tensor, the drawn latent ``z``,
        ``mu``, ``logvar`` and float summaries ``ce`` and ``kl``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if len(tokens) == 0:
            raise ValueError("empty batch")
        lam = self.config.lambda_kl if lambda_kl is None else lambda_kl
        w = np.ones(len(tokens)) if weights is None else np.asarray(weights, dtype=np.float64)
        count = float(w.sum())
        if count <= 0:
            raise ValueError("batch has no weighted elements")
        mu, logvar = self.encode(np.where(w[:, None] > 0, tokens, self._fill_row()))
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = rng.standard_normal(mu.shape)
        z = T.gaussian_sample(mu, logvar, noise.astype(self.dtype, copy=False))
        ce = self.reconstruction_ce(self.decode(z), tokens, w)
        kl = T.kl_standard_normal(mu, logvar)
        wt = T.Tensor(w.astype(self.dtype))
        kl_sum = (kl * wt).sum()
        total = (ce + kl_sum * lam) * (1.0 / count)
        return {"loss": total, "z": z, "mu": mu, "logvar": logvar,
                "ce": float(ce.data) / count, "kl": float(kl_sum.data) / count}

    def _fill_row(self):
        # any legal vector; stands in for padded rows before they are weighted out
        return np.array([self.vocab.legal_tokens(p)[0] for p in codec.RP_NAMES], np.int64)

    def config_dict(self):
        return {"kind": "vae", **self.config.to_dict()}


def load_vae(path, vocab=codec.DEFAULT_VOCAB):
    from rpkit.nn import load_checkpoint, read_config
    cfg = read_config(path)
    tensors, _ = load_checkpoint(path)
    vae = RpVae(VaeConfig(cfg["latent"], tuple(cfg["hidden"]), cfg["lambda_kl"], cfg.get("in_std", 0.3)), vocab)
    vae.load_state_dict({k[len("vae."):]: v for k, v in tensors.items() if k.startswith("vae.")}
                        if any(k.startswith("vae.") for k in tensors) else tensors)
    return vae


# ---- samplers -----------------------------------------------------------------

def uniform_sampler(vocab=codec.DEFAULT_VOCAB):
    """Each slot drawn uniformly over its legal tokens."""
    legal = [vocab.legal_tokens(p) for p in codec.RP_NAMES]

    def draw(rng, n):
        return np.stack([rng.choice(t, size=n) for t in legal], axis=1)

    return draw


def corpus_sampler(tokens):
    tokens = np.asarray(tokens, dtype=np.int64)

    def draw(rng, n):
        return tokens[rng.integers(0, len(tokens), size=n)]

    return draw


def mixed_sampler(samplers, probs):
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()

    def draw(rng, n):
        counts = rng.multinomial(n, probs)
        parts = [s(rng, c) for s, c in zip(samplers, counts) if c]
        out = np.concatenate(parts)
        return out[rng.permutation(len(out))]

    return draw


# ---- training -----------------------------------------------------------------

def reconstruction_accuracy(vae, tokens):
    """Per-parameter argmax accuracy of decoding the posterior mean, shape (13,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    rec = vae.decode_argmax(vae.encode_mean(tokens))
    return (rec == tokens).mean(axis=0)


@dataclass
class VaeTrainReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    accuracy: np.ndarray | None = None

    def moving_average(self, window=100):
        x = np.asarray(self.losses, dtype=np.float64)
        if len(x) < window:
            return x.copy()
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def train_vae(vae, sampler, steps, batch_size=64, optim=None, seed=0, eval_tokens=None,
              eval_every=0, target_accuracy=None, log_every=0):
    """Fit ``vae`` on vectors drawn from ``sampler(rng, n)``.

    With ``target_accuracy`` set, training stops early once every parameter's
    accuracy on ``eval_tokens`` reaches it (checked every ``eval_every`` steps).
    """
    rng = np.random.default_rng(seed)
    opt = optim if isinstance(optim, AdamW) else AdamW(vae.parameters(), optim or OptimizerConfig(learning_rate=1e-3))
    report = VaeTrainReport()
    for step in range(1, steps + 1):
        batch = sampler(rng, batch_size)
        opt.zero_grad()
        out = vae.loss(batch, rng)
        ensure_finite(out["loss"].data, step)
        out["loss"].backward()
        opt.step()
        report.losses.append(float(out["loss"].data))
        report.steps = step
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f ce %.5f kl %.3f", step, report.losses[-1], out["ce"], out["kl"])
        if eval_every and eval_tokens is not None and step % eval_every == 0:
            report.accuracy = reconstruction_accuracy(vae, eval_tokens)
            if target_accuracy is not None and report.accuracy.min() >= target_accuracy:
                break
    if eval_tokens is not None:
        report.accuracy = reconstruction_accuracy(vae, eval_tokens)
    return report


def pretrain_synthetic(vae, sampler, steps, batch_size=64, optim=None, seed=0, held_out=512, **kw):
    """Pretrain on synthetic vectors and report accuracy on a fresh held-out draw."""
    held = sampler(np.random.default_rng(seed + 1_000_003), held_out)
    return train_vae(vae, sampler, steps, batch_size, optim, seed, eval_tokens=held, **kw)
