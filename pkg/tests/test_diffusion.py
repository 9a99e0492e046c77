import numpy as np
import pytest

from rpkit import codec, diffusion as D, train
from rpkit.nn import ModelNotTrained, key_padding_mask
from rpkit.nn import tensor as T

import gradsuite


@pytest.fixture(scope="module")
def sched():
    return D.make_schedule("linear", 1000)


def test_schedule_basics(sched):
    one = D.make_schedule("linear", 1)
    assert one.alpha_bar[1] == one.alphas[1]
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[0] == 1.0
    ref = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        ref *= 1.0 - b
    assert abs(sched.alpha_bar[1000] - ref) < 1e-10
    assert not sched.alpha_bar.flags.writeable


@pytest.mark.parametrize("kw", [dict(T=0), dict(T=2.5), dict(kind="cosine"), dict(beta_start=0.1, beta_end=0.01)])
def test_schedule_rejects_bad_config(kw):
    with pytest.raises(D.BadConfig):
        D.make_schedule(**{"kind": "linear", "T": 10, **kw})


def test_timestep_range(sched):
    with pytest.raises(D.BadTimestep):
        D.forward_diffuse(np.zeros(3), 0, sched)
    with pytest.raises(D.BadTimestep):
        D.forward_diffuse(np.zeros(3), 1001, sched)


def test_forward_limits(sched):
    z0 = np.random.default_rng(0).standard_normal((4, 8))
    zt, _ = D.forward_diffuse(z0, 1, sched, seed=1)
    assert np.abs(zt - z0).max() < 0.1
    zT, eps = D.forward_diffuse(z0, 1000, sched, seed=1)
    assert np.abs(zT - eps).max() < 0.02


@pytest.mark.parametrize("t", [1, 2, 17, 250, 1000])
def test_closed_form_equals_recursion(sched, t):
    rng = np.random.default_rng(t)
    z0 = rng.standard_normal((3, 16)) * 5
    steps = rng.standard_normal((t, 3, 16))
    stepwise = D.forward_stepwise(z0, t, sched, steps)
    closed, _ = D.forward_diffuse(z0, t, sched, noise=D.aggregate_noise(steps, t, sched))
    assert np.abs(closed - stepwise).max() < 1e-5


def test_aggregate_noise_is_standard_normal(sched):
    steps = np.random.default_rng(0).standard_normal((40, 20000))
    agg = D.aggregate_noise(steps, 40, sched)
    assert abs(agg.mean()) < 0.03 and abs(agg.std() - 1) < 0.03


def test_oracle_one_step_reversal(sched):
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((5, 16)) * 3
    z1, eps = D.forward_diffuse(z0, 1, sched, seed=3)
    back = D.reverse_step(z1, 1, eps, sched)
    assert np.abs(back - z0).max() < 1e-6


def test_posterior_variance(sched):
    assert sched.posterior_variance(1) == 0
    assert 0 < sched.posterior_variance(500) < sched.betas[500]


def test_literal_update(sched):
    # identical to the DDPM mean at t = 1, different afterwards
    z1, eps = D.forward_diffuse(np.ones(4), 1, sched, seed=0)
    np.testing.assert_allclose(D.reverse_step(z1, 1, eps, sched, literal=True), np.ones(4), atol=1e-9)
    t = 50
    zt, eps = D.forward_diffuse(np.ones(4), t, sched, seed=0)
    a, ab = sched.alphas[t], sched.alpha_bar[t]
    ddpm_mean = (zt - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a)
    lit = D.reverse_step(zt, t, eps, sched, literal=True)
    np.testing.assert_allclose(lit, (zt - np.sqrt(1 - a) * eps) / np.sqrt(a), atol=1e-12)
    assert not np.allclose(lit, ddpm_mean, atol=1e-3)


def _small(predict="x0", **kw):
    cfg = D.DmConfig(d=16, layers=3, heads=2, ff_mult=2, T=20, d_sem=8, predict=predict, **kw)
    return D.DiffusionGenerator(cfg, latent=6, seed=0, dtype=np.float64), gradsuite.small_vae()


def test_perfect_predictor_zero_mse():
    g, v = _small(predict="eps", latent_scale=1.0)
    batch = train.make_batch(gradsuite.toy_samples(), np.float64)
    eps = np.random.default_rng(0).standard_normal(batch.valid.shape + (6,))
    g.predict_noise = lambda z_t, t, h, valid: T.Tensor(eps)
    out = g.loss(batch, v, np.random.default_rng(0), t=np.array([4, 9]), noise=eps)
    assert out["mse"] == 0.0


def test_x0_parameterisation_recovers_noise():
    g, _ = _small(predict="x0", latent_scale=1.0)
    batch = train.make_batch(gradsuite.toy_samples(), np.float64)
    h = g.embedder(batch)
    z_t = np.random.default_rng(1).standard_normal(batch.valid.shape + (6,))
    t = np.array([3, 11])
    eps = g.predict_noise(z_t, t, h, batch.valid).data
    x0 = g.out(g.out_ln(g.backbone(g.z_in(T.Tensor(z_t)) + h + g.time_mlp(
        T.Tensor(D.timestep_features(t, 16))).reshape(2, 1, 16), key_padding_mask(batch.valid, np.float64)))).data
    ab = g.schedule.alpha_bar[t][:, None, None]
    rebuilt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    np.testing.assert_allclose(rebuilt[batch.valid], z_t[batch.valid], atol=1e-8)


def test_latent_scale_tracks_std():
    g, v = _small()
    assert g.config.latent_scale is None
    samples = gradsuite.toy_samples()
    train.train_generator(g, v, samples, 3, batch_size=2)
    assert g.config.latent_scale > 0
    np.testing.assert_allclose(g.from_diffusion(g.to_diffusion(np.ones(3))), np.ones(3))


def test_loss_curves_deterministic():
    curves = []
    for _ in range(2):
        g, v = _small()
        curves.append(train.train_generator(g, v, gradsuite.toy_samples(), 4, batch_size=2, seed=5).losses)
    assert curves[0] == curves[1]


def test_generate_contract():
    g, v = _small()
    samples = gradsuite.toy_samples()
    with pytest.raises(ModelNotTrained):
        g.generate(samples, v)
    g.config.latent_scale = 1.0
    g.trained = True
    a = g.generate(samples, v, seed=4)
    b = g.generate(samples, v, seed=4)
    for x, y, s in zip(a, b, samples):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (s.size, 13)
        assert all(codec.validate_vector(r) == [] for r in x)


def test_config_checks():
    with pytest.raises(D.BadConfig):
        D.DmConfig(predict="v")
    with pytest.raises(D.BadConfig):
        D.DmConfig(latent_scale=0.0)
    cfg = D.DmConfig.full_scale()
    assert (cfg.layers, cfg.heads, cfg.T) == (12, 8, 1000)
