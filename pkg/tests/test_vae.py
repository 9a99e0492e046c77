import numpy as np
import pytest
from scipy import integrate, stats

from rpkit import codec, vae as V
from rpkit.nn import NonFinite
from rpkit.nn import tensor as T

from conftest import random_vector


@pytest.fixture(scope="module")
def model():
    return V.RpVae(V.VaeConfig(latent=16, hidden=(32, 32, 16, 16)), seed=0)


def test_output_space_is_legal_tokens_only(model):
    n_legal = sum(len(codec.DEFAULT_VOCAB.legal_tokens(p)) for p in codec.RP_NAMES)
    assert model.n_out == n_legal == 7894


def test_encode_is_finite_on_fuzzed_vectors(model):
    toks = V.uniform_sampler()(np.random.default_rng(0), 1000)
    mu, logvar = model.encode(toks)
    assert np.isfinite(mu.data).all() and np.isfinite(logvar.data).all()


def test_encoder_accepts_pad_in_any_slot(model):
    # masked FID variants write PAD into slots they ignore
    toks = np.full((1, 13), codec.PAD)
    assert np.isfinite(model.encode_mean(toks)).all()


def test_encode_rejects_invalid(model):
    with pytest.raises(codec.InvalidVector):
        model.encode(np.zeros((2, 12), int))
    bad = random_vector(np.random.default_rng(0))[None].copy()
    bad[0, codec.RP_INDEX["width"]] = 1930
    with pytest.raises(codec.InvalidVector):
        model.encode(bad)
    with pytest.raises(codec.InvalidVector):
        model.encode(np.full((1, 13), 5000))


def test_sampling(model):
    mu = np.array([[0.5, -1.0]])
    np.testing.assert_allclose(model.sample(mu, np.full((1, 2), -40.0)), mu, atol=1e-6)
    a = model.sample(mu, np.zeros((1, 2)), seed=3)
    b = model.sample(mu, np.zeros((1, 2)), seed=3)
    np.testing.assert_array_equal(a, b)


def test_decode_always_legal(model):
    z = np.random.default_rng(1).standard_normal((300, 16)) * 10
    for row in model.decode_argmax(z):
        assert codec.validate_vector(row) == []


def test_decode_rejects_nan(model):
    with pytest.raises(NonFinite):
        model.decode(np.full((1, 16), np.nan, dtype=np.float32))


def test_full_logits_mask_illegal(model):
    z = np.random.default_rng(2).standard_normal((3, 16))
    full = model.decode_logits(z)
    legal = codec.DEFAULT_VOCAB.legal_mask
    assert np.isneginf(full[:, ~legal]).all()
    assert np.isfinite(full[:, legal]).all()
    np.testing.assert_array_equal(full.argmax(axis=2), model.decode_argmax(z))


def test_kl_matches_quadrature():
    for mu, var in [(0.0, 1.0), (0.7, 0.3), (-1.5, 2.5), (2.0, 0.05)]:
        p = stats.norm(mu, np.sqrt(var))
        q = stats.norm(0, 1)
        lo, hi = mu - 12 * np.sqrt(var), mu + 12 * np.sqrt(var)
        ref, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi, epsabs=1e-13)
        got = float(T.kl_standard_normal(T.Tensor(np.array([mu])), T.Tensor(np.log([var]))).data)
        assert got == pytest.approx(ref, abs=1e-9)


def test_loss_without_kl_is_mean_ce():
    m = V.RpVae(V.VaeConfig(latent=4, hidden=(8, 8, 8, 8)), seed=1, dtype=np.float64)
    toks = V.uniform_sampler()(np.random.default_rng(0), 6)
    noise = np.random.default_rng(1).standard_normal((6, 4))
    out = m.loss(toks, noise=noise, lambda_kl=0.0)
    assert float(out["loss"].data) == pytest.approx(out["ce"], rel=1e-12)
    z = out["mu"].data + np.exp(0.5 * out["logvar"].data) * noise
    logits = m.decode(z)
    ce = float(m.reconstruction_ce(logits, toks).data) / 6
    assert out["ce"] == pytest.approx(ce, rel=1e-10)


def test_loss_weights_ignore_padding():
    m = V.RpVae(V.VaeConfig(latent=4, hidden=(8, 8, 8, 8)), seed=1, dtype=np.float64)
    toks = V.uniform_sampler()(np.random.default_rng(0), 4)
    noise = np.random.default_rng(1).standard_normal((4, 4))
    padded = toks.copy()
    padded[2:] = codec.PAD  # not valid vectors, but weighted out
    w = np.array([1.0, 1.0, 0.0, 0.0])
    a = m.loss(padded, noise=noise, weights=w)
    b = m.loss(toks[:2], noise=noise[:2])
    assert float(a["loss"].data) == pytest.approx(float(b["loss"].data), rel=1e-12)
    with pytest.raises(ValueError):
        m.loss(toks, weights=np.zeros(4))


def test_zero_steps_leaves_params():
    m = V.RpVae(V.VaeConfig(latent=4, hidden=(8, 8, 8, 8)), seed=1)
    before = m.state_dict()
    V.train_vae(m, V.uniform_sampler(), 0)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_overfit_single_element():
    m = V.RpVae(V.VaeConfig(latent=16, hidden=(64, 32, 32, 32)), seed=0)
    target = random_vector(np.random.default_rng(5))[None]
    V.train_vae(m, V.corpus_sampler(target), 300, batch_size=4)
    np.testing.assert_array_equal(m.decode_argmax(m.encode_mean(target)), target)


def test_samplers_are_seeded():
    s = V.mixed_sampler([V.uniform_sampler(), V.corpus_sampler(np.zeros((1, 13), int) + 5)], [0.5, 0.5])
    a = s(np.random.default_rng(0), 20)
    b = s(np.random.default_rng(0), 20)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (20, 13)


def test_checkpoint_round_trip(tmp_path, model):
    from rpkit.nn import save_module
    save_module(tmp_path / "v.npz", model, model.config_dict())
    back = V.load_vae(tmp_path / "v.npz")
    toks = V.uniform_sampler()(np.random.default_rng(0), 5)
    np.testing.assert_array_equal(back.encode_mean(toks), model.encode_mean(toks))


def test_config_validation():
    with pytest.raises(ValueError):
        V.VaeConfig(hidden=(1, 2, 3))
    with pytest.raises(ValueError):
        V.VaeConfig(lambda_kl=-1)
