"""Page-level metrics: element IoU, style-consistency score, classifier-feature FID.

Pages are ``{element id: (13,) token vector}`` mappings, the same shape the
RP-JSON codec reads and writes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from rpkit import codec, kernels
from rpkit import embedding as E
from rpkit.nn import (
    AdamW, LayerNorm, Linear, Module, OptimizerConfig, TransformerBlock, ensure_finite,
    key_padding_mask, no_grad,
)
from rpkit.nn import tensor as T
from rpkit.nn.layers import DEFAULT_DTYPE, param
from rpkit.vc import MissingStyle

log = logging.getLogger(__name__)


class LengthMismatch(ValueError):
    pass


class IdMismatch(ValueError):
    pass


class SingularCovariance(np.linalg.LinAlgError):
    pass


# ---- element IoU -------------------------------------------------------------------

def boxes(tokens):
    """(N, 4) integer (left, top, width, height) from (N, 13) tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lay = tokens[:, :4]
    if np.any(lay > codec.MAX_PIXEL) or np.any(lay < 0):
        raise codec.InvalidVector("layout slots must hold pixel tokens")
    return lay


def ele_iou(real, gen):
    """Mean IoU of index-aligned (N, 4) boxes."""
    real = np.asarray(real)
    gen = np.asarray(gen)
    if real.shape != gen.shape:
        raise LengthMismatch(f"{real.shape} vs {gen.shape}")
    if len(real) == 0:
        raise LengthMismatch("no boxes")
    if np.any(real[:, 2:] < 0) or np.any(gen[:, 2:] < 0):
        raise ValueError("negative box size")
    return float(kernels.paired_iou(real, gen).mean())


def _aligned(real_page, gen_page):
    ids = sorted(real_page)
    if sorted(gen_page) != ids:
        raise IdMismatch("pages have different element ids")
    a = np.stack([np.asarray(real_page[i]) for i in ids])
    b = np.stack([np.asarray(gen_page[i]) for i in ids])
    return ids, a, b


def page_ele_iou(real_page, gen_page):
    _, a, b = _aligned(real_page, gen_page)
    return ele_iou(boxes(a), boxes(b))


# ---- style consistency ---------------------------------------------------------------

@dataclass(frozen=True)
class StyleSubset:
    members: frozenset
    style: tuple


def style_key(vec):
    vec = np.asarray(vec)
    if vec.shape != (codec.W,):
        raise MissingStyle(f"expected {codec.W} tokens, got shape {vec.shape}")
    return tuple(int(t) for t in vec[codec.STYLE_SLOTS])


def style_partition(page):
    """Elements grouped by identical 9-token style, subsets ordered by their first id."""
    groups = {}
    for eid in sorted(page):
        groups.setdefault(style_key(page[eid]), []).append(eid)
    return [StyleSubset(frozenset(m), k) for k, m in groups.items()]


def sc_score_exact(real_page, gen_page):
    """The score as an exact fraction: sum_j |S_j|/N * max_k Jaccard(S_j, S^_k)."""
    ids = sorted(real_page)
    if sorted(gen_page) != ids:
        raise IdMismatch("pages have different element ids")
    if not ids:
        raise IdMismatch("empty page")
    ra = style_partition(real_page)
    ga = style_partition(gen_page)
    row = {eid: i for i, eid in enumerate(ids)}
    la = np.empty(len(ids), np.int64)
    lb = np.empty(len(ids), np.int64)
    for j, s in enumerate(ra):
        la[[row[e] for e in s.members]] = j
    for k, s in enumerate(ga):
        lb[[row[e] for e in s.members]] = k
    inter = kernels.contingency(la, lb, len(ra), len(ga))
    size_a = inter.sum(axis=1)
    size_b = inter.sum(axis=0)
    n = len(ids)
    total = Fraction(0)
    for j in range(len(ra)):
        best = Fraction(0)
        for k in np.nonzero(inter[j])[0]:
            i = int(inter[j, k])
            best = max(best, Fraction(i, int(size_a[j] + size_b[k]) - i))
        total += Fraction(int(size_a[j]), n) * best
    return total


def sc_score(real_page, gen_page):
    return float(sc_score_exact(real_page, gen_page))


# ---- Frechet distance ---------------------------------------------------------------

@dataclass
class FidStats:
    mean: np.ndarray
    cov: np.ndarray


def fid_stats(features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    return FidStats(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a, b, jitter=1e-9):
    """``|mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)``."""
    d = a.cov.shape[0]
    ca = a.cov + jitter * np.eye(d)
    cb = b.cov + jitter * np.eye(d)
    if not (np.isfinite(ca).all() and np.isfinite(cb).all()):
        raise SingularCovariance("covariance contains NaN or Inf")
    for c in (ca, cb):
        w = np.linalg.eigvalsh((c + c.T) / 2)
        if w.min() < -1e-6 * max(1.0, abs(w).max()):
            raise SingularCovariance("covariance is not positive semidefinite")
    # singular values of sqrt(C_a) sqrt(C_b) are the square roots of the eigenvalues of
    # sqrt(C_a) C_b sqrt(C_a); taking them directly avoids rooting rounding noise
    tr_sqrt = float(np.linalg.svd(_psd_sqrt(ca) @ _psd_sqrt(cb), compute_uv=False).sum())
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_sqrt)


def fid(features_a, features_b, jitter=1e-9):
    return frechet_distance(fid_stats(features_a), fid_stats(features_b), jitter)


# ---- noisers ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    sigma: float = 20.0
    redraw_p: float = 0.15
    substitute_fraction: float = 0.15
    swap_fraction: float = 0.1


def _copy(page):
    return {eid: np.array(v, dtype=np.int64) for eid, v in page.items()}


def perturb_values(page, intensity=1.0, seed=0, config=None, vocab=codec.DEFAULT_VOCAB):
    """Gaussian jitter on pixel slots; categorical slots re-drawn with some probability.

    PAD slots are left alone so inapplicable properties stay inapplicable.
    """
    c = config or NoiseConfig()
    rng = np.random.default_rng(seed)
    out = _copy(page)
    if intensity <= 0:
        return out
    for eid in sorted(out):
        v = out[eid]
        for k, p in enumerate(codec.RP_NAMES):
            t = int(v[k])
            if t == codec.PAD:
                continue
            legal = vocab.legal_tokens(p)
            if t <= codec.MAX_PIXEL:
                cap = int(legal[legal <= codec.MAX_PIXEL].max())
                v[k] = int(np.clip(np.rint(t + rng.normal(0, c.sigma * intensity)), 0, cap))
            elif rng.random() < min(1.0, c.redraw_p * intensity):
                choices = legal[(legal != codec.PAD) & (legal > codec.MAX_PIXEL)]
                v[k] = int(rng.choice(choices))
    return out


def random_vector(rng, vocab=codec.DEFAULT_VOCAB):
    return np.array([rng.choice(vocab.legal_tokens(p)) for p in codec.RP_NAMES], dtype=np.int64)


def substitute_elements(page, intensity=1.0, seed=0, config=None, vocab=codec.DEFAULT_VOCAB):
    """Replace a fraction of element vectors with random valid vectors."""
    c = config or NoiseConfig()
    rng = np.random.default_rng(seed)
    out = _copy(page)
    ids = sorted(out)
    n = min(len(ids), int(round(c.substitute_fraction * intensity * len(ids))))
    if intensity > 0 and n == 0:
        n = 1
    for eid in rng.choice(ids, size=n, replace=False) if n else []:
        out[int(eid)] = random_vector(rng, vocab)
    return out


def swap_pairs(ids, count, rng):
    ids = sorted(ids)
    count = min(count, len(ids) // 2)
    pick = rng.choice(ids, size=2 * count, replace=False)
    return [(int(a), int(b)) for a, b in pick.reshape(-1, 2)]


def apply_swaps(page, pairs):
    out = _copy(page)
    for a, b in pairs:
        out[a], out[b] = out[b], out[a]
    return out


def swap_elements(page, intensity=1.0, seed=0, config=None, pairs=None):
    """Exchange the vectors of random disjoint element pairs."""
    c = config or NoiseConfig()
    if pairs is None:
        if intensity <= 0:
            return _copy(page)
        rng = np.random.default_rng(seed)
        count = max(1, int(round(c.swap_fraction * intensity * len(page) / 2)))
        pairs = swap_pairs(page, count, rng)
    return apply_swaps(page, pairs)


NOISERS = {"perturb": perturb_values, "substitute": substitute_elements, "swap": swap_elements}


def pollute(page, seed=0, intensity=1.0, kinds=("perturb", "substitute", "swap"), config=None):
    """Apply one noiser chosen by ``seed``."""
    rng = np.random.default_rng(seed)
    kind = kinds[int(rng.integers(len(kinds)))]
    return NOISERS[kind](page, intensity, int(rng.integers(2**31)), config)


# ---- FID classifier ------------------------------------------------------------------

VARIANTS = ("overall", "layout", "style")


def variant_tokens(tokens, variant):
    """Hide the inputs a variant must ignore by writing PAD into those slots."""
    tokens = np.array(tokens, dtype=np.int64)
    if variant == "layout":
        tokens[..., codec.STYLE_SLOTS] = codec.PAD
    elif variant == "style":
        tokens[..., codec.LAYOUT_SLOTS] = codec.PAD
    elif variant != "overall":
        raise ValueError(f"unknown FID variant {variant!r}")
    return tokens


class FidClassifier(Module):
    """Real-vs-polluted page classifier; its CLS output is the FID feature."""

    def __init__(self, variant="overall", latent=128, d=128, layers=4, heads=4, d_sem=E.D_SEM,
                 seed=0, dtype=DEFAULT_DTYPE):
        if variant not in VARIANTS:
            raise ValueError(f"unknown FID variant {variant!r}")
        self.variant = variant
        self.latent = latent
        self.shape = {"d": d, "layers": layers, "heads": heads, "d_sem": d_sem}
        rng = np.random.default_rng(seed)
        self.embedder = E.HtmlEmbedder(rng, d, d_sem, dtype=dtype)
        self.z_in = Linear(latent, d, rng, dtype=dtype)
        self.cls = param((rng.standard_normal(d) * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(d, heads, rng, dtype=dtype) for _ in range(layers)]
        self.ln = LayerNorm(d, dtype)
        self.head = Linear(d, 2, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.cls.dtype

    def latents(self, batch, vae):
        """Frozen VAE posterior means of the variant-masked tokens, (B, S, latent)."""
        b, s = batch.valid.shape
        toks = variant_tokens(batch.tokens, self.variant).reshape(b * s, codec.W)
        return vae.encode_mean(toks).reshape(b, s, -1).astype(self.dtype)

    def features(self, batch, z):
        b, s = batch.valid.shape
        d = self.shape["d"]
        x = self.z_in(T.Tensor(z)) + self.embedder(batch)
        cls = T.reshape(self.cls, (1, 1, d)) * T.Tensor(np.ones((b, 1, 1), self.dtype))
        x = T.concat([cls, x], axis=1)
        valid = np.concatenate([np.ones((b, 1), bool), batch.valid], axis=1)
        mask = key_padding_mask(valid, self.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln(x)[:, 0]

    def logits(self, batch, z):
        return self.head(self.features(batch, z))

    def config_dict(self):
        return {"kind": "fid", "variant": self.variant, "latent": self.latent, **self.shape}


@dataclass
class FidTrainReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    train_accuracy: float = 0.0
    held_out_accuracy: float = 0.0


def _labelled_set(samples, seed, noise_config):
    """Each page once as real (label 1) and once polluted (label 0)."""
    out = []
    for i, smp in enumerate(samples):
        page = dict(zip(smp.ids, smp.tokens))
        bad = pollute(page, seed=seed * 7919 + i, config=noise_config)
        out.append((smp, smp.tokens, 1))
        out.append((smp, np.stack([bad[e] for e in smp.ids]), 0))
    return out


def _prepare(clf, vae, items, batch_size):
    from rpkit.train import make_batch
    out = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        batch = make_batch([c[0] for c in chunk], clf.dtype)
        batch.tokens = np.full(batch.valid.shape + (codec.W,), codec.PAD, dtype=np.int64)
        for i, (smp, toks, _) in enumerate(chunk):
            batch.tokens[i, :len(toks)] = toks
        out.append((batch, clf.latents(batch, vae), np.array([c[2] for c in chunk])))
    return out


def classifier_accuracy(clf, prepared):
    hit = tot = 0
    with no_grad():
        for batch, z, y in prepared:
            pred = clf.logits(batch, z).data.argmax(axis=1)
            hit += int((pred == y).sum())
            tot += len(y)
    return hit / max(tot, 1)


def train_fid_classifier(samples, vae, variant="overall", steps=1500, batch_size=16, seed=0,
                         held_out=0.2, optim=None, noise_config=None, log_every=0, **shape):
    """Train a real-vs-polluted classifier on ``samples``; returns ``(classifier, report)``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_test = max(1, int(round(held_out * len(samples))))
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    if not train:
        raise ValueError("need more pages than the held-out share")
    clf = FidClassifier(variant, vae.latent_dim, seed=seed, **shape)
    test_set = _prepare(clf, vae, _labelled_set(test, seed + 1, noise_config), 64)
    opt = AdamW(clf.parameters(), optim or OptimizerConfig(learning_rate=1e-3))
    report = FidTrainReport()
    epoch = 0
    prepared = []
    for step in range(1, steps + 1):
        if not prepared:
            # fresh pollution every epoch
            items = _labelled_set(train, seed * 1009 + epoch, noise_config)
            items = [items[i] for i in rng.permutation(len(items))]
            prepared = _prepare(clf, vae, items, batch_size)
            epoch += 1
        batch, z, y = prepared.pop()
        opt.zero_grad()
        loss = T.cross_entropy(clf.logits(batch, z), y) * (1.0 / len(y))
        ensure_finite(loss.data, step)
        loss.backward()
        opt.step()
        report.losses.append(float(loss.data))
        report.steps = step
        if log_every and step % log_every == 0:
            log.info("fid-%s step %d loss %.4f", variant, step, report.losses[-1])
    report.train_accuracy = classifier_accuracy(clf, _prepare(clf, vae, _labelled_set(train, seed + 2, noise_config), 64))
    report.held_out_accuracy = classifier_accuracy(clf, test_set)
    return clf, report


def classifier_features(clf, vae, samples, token_arrays, batch_size=32):
    """CLS features for pages given as samples plus their (S, 13) token arrays."""
    items = [(s, t, 0) for s, t in zip(samples, token_arrays)]
    feats = []
    with no_grad():
        for batch, z, _ in _prepare(clf, vae, items, batch_size):
            feats.append(clf.features(batch, z).data.astype(np.float64))
    return np.concatenate(feats)
