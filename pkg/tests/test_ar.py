import math

import numpy as np
import pytest

from rpkit import ar, codec, train
from rpkit import embedding as E
from rpkit import html as H
from rpkit.nn import ModelNotTrained, ShapeMismatch
from rpkit.nn import tensor as T

import gradsuite


def test_mask_count_limits():
    assert ar.mask_count(40, 0.0) == 40
    assert ar.mask_count(40, 1 - 1e-12) == 1
    assert ar.mask_count(1, 0.99) == 1
    with pytest.raises(ValueError):
        ar.mask_count(10, 1.0)


def test_mask_counts_match_schedule():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        s = int(rng.integers(1, 130))
        r = float(rng.random())
        m = ar.build_mask(s, r, rng=rng)
        want = min(s, max(1, math.ceil(math.cos(math.pi * r / 2) * s)))
        assert int(m.sum()) == want
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_mask_latents():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 4))
    mv = rng.standard_normal(4)
    np.testing.assert_array_equal(ar.mask_latents(z, np.zeros(5), mv), z)
    full = ar.mask_latents(z, np.ones(5), mv)
    assert (full == mv).all()
    mixed = np.array([1, 0, 0, 1, 0])
    out = ar.mask_latents(z, mixed, mv)
    np.testing.assert_array_equal(out[mixed == 0], z[mixed == 0])
    np.testing.assert_array_equal(out[mixed == 1], np.broadcast_to(mv, (2, 4)))
    with pytest.raises(ShapeMismatch):
        ar.mask_latents(z, np.zeros(4), mv)


def _small(seed=0):
    cfg = ar.ArConfig(d=16, enc_layers=1, dec_layers=1, heads=2, ff_mult=2, d_sem=8)
    return ar.ArGenerator(cfg, latent=6, seed=seed, dtype=np.float64), gradsuite.small_vae(seed)


def test_decoder_is_causal():
    g, _ = _small()
    batch = train.make_batch(gradsuite.toy_samples(), np.float64)
    h = g.embedder(batch)
    mem, mm = g.encode_context(h, g.blend(T.Tensor(np.zeros((2, 4, 6))), np.ones((2, 4))), batch.valid)
    prev = np.random.default_rng(0).standard_normal((2, 4, 6))
    a = g.decode_latents(h, T.Tensor(prev), mem, mm).data
    prev[:, 3] += 5.0
    b = g.decode_latents(h, T.Tensor(prev), mem, mm).data
    np.testing.assert_allclose(a[:, :3], b[:, :3], atol=1e-12)
    assert not np.allclose(a[:, 3], b[:, 3])


def test_empty_batch_rejected():
    g, v = _small()
    batch = train.make_batch(gradsuite.toy_samples(), np.float64)
    batch.valid[:] = False
    with pytest.raises(ValueError):
        g.loss(batch, v, np.random.default_rng(0))


def _loss_curve(seed):
    g, v = _small(seed)
    samples = gradsuite.toy_samples()
    rep = train.train_generator(g, v, samples, 5, batch_size=2, seed=seed)
    return rep.losses


def test_seeded_training_is_deterministic():
    a = _loss_curve(3)
    assert a == _loss_curve(3)
    assert all(np.isfinite(a))


def test_untrained_model_refuses_to_generate():
    g, v = _small()
    with pytest.raises(ModelNotTrained):
        g.generate(gradsuite.toy_samples(), v)


def test_generate_shapes_and_determinism():
    g, v = _small()
    g.trained = True
    samples = gradsuite.toy_samples()
    page = H.page_from_html("<div>only</div>")
    (one,) = train.make_samples([page], encoder=E.HashedBagEncoder(dim=8), require_rps=False)
    (single,) = g.generate([one], v)
    assert single.shape == (1, 13) and codec.validate_vector(single[0]) == []
    a = g.generate(samples, v, seed=1)
    b = g.generate(samples, v, seed=1)
    for x, y, s in zip(a, b, samples):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (s.size, 13)
        assert all(codec.validate_vector(r) == [] for r in x)


def test_feedback_options():
    with pytest.raises(ValueError):
        ar.ArConfig(feedback="other")
    cfg = ar.ArConfig.full_scale()
    assert (cfg.enc_layers, cfg.dec_layers, cfg.heads) == (6, 6, 8)
