"""Shared pieces for the page generators: samples, batching, the joint training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rpkit import embedding as E
from rpkit.nn import AdamW, OptimizerConfig, ensure_finite

log = logging.getLogger(__name__)


@dataclass
class PageSample:
    features: E.PageFeatures
    tokens: np.ndarray | None   # (S, 13) or None when only generating
    ids: list
    name: str = ""

    @property
    def size(self):
        return self.features.size


def make_samples(pages, encoder=None, tags=None, require_rps=True):
    encoder = encoder or E.HashedBagEncoder()
    tags = tags or E.TagVocab()
    out = []
    for page in pages:
        if page.size == 0:
            raise ValueError(f"page {page.name!r} has no elements")
        toks = page.token_matrix() if (page.rps is not None or require_rps) else None
        feats = E.featurize_page(page, encoder, tags)
        out.append(PageSample(feats, toks, [e.id for e in page.elements], page.name))
    return out


def make_batch(samples, dtype):
    if not samples:
        raise ValueError("empty page batch")
    toks = None if samples[0].tokens is None else [s.tokens for s in samples]
    return E.collate([s.features for s in samples], toks, dtype)


@dataclass
class GenTrainReport:
    steps: int = 0
    losses: list = field(default_factory=list)


def joint_parameters(model, vae, freeze_vae=False):
    params = list(model.parameters())
    if not freeze_vae:
        params += vae.parameters()
    return params


def train_generator(model, vae, samples, steps, batch_size=8, optim=None, seed=0,
                    freeze_vae=False, log_every=0, callback=None, decay=None):
    """Joint training of ``model`` and ``vae`` on ``samples``.

    Each step draws ``batch_size`` pages without replacement (cycling through a
    seeded permutation) and minimises ``model.loss(batch, vae, rng)["loss"]``.
    ``callback(step, report)`` may return True to stop early. ``decay="cosine"``
    anneals the learning rate to zero over ``steps``.
    """
    if decay not in (None, "cosine"):
        raise ValueError(f"unknown decay {decay!r}")
    if not samples:
        raise ValueError("no training pages")
    rng = np.random.default_rng(seed)
    opt = optim if isinstance(optim, AdamW) else AdamW(joint_parameters(model, vae, freeze_vae),
                                                       optim or OptimizerConfig(learning_rate=5e-4))
    report = GenTrainReport()
    order = []
    for step in range(1, steps + 1):
        if len(order) < min(batch_size, len(samples)):
            order.extend(rng.permutation(len(samples)).tolist())
        pick = [order.pop(0) for _ in range(min(batch_size, len(samples)))]
        batch = make_batch([samples[i] for i in pick], model.dtype)
        if decay == "cosine":
            opt.lr_scale = 0.5 * (1 + math.cos(math.pi * (step - 1) / steps))
        opt.zero_grad()
        out = model.loss(batch, vae, rng)
        ensure_finite(out["loss"].data, step)
        out["loss"].backward()
        opt.step()
        report.losses.append(float(out["loss"].data))
        report.steps = step
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.5f", type(model).__name__, step, report.losses[-1])
        if callback is not None and callback(step, report):
            break
    return report


def tokens_by_id(sample, tokens):
    """Map element id -> (13,) token vector for a generated (S, 13) array."""
    return {eid: np.asarray(tokens[i], dtype=np.int64) for i, eid in enumerate(sample.ids)}
