from fractions import Fraction

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from rpkit import codec, evaluation as ev, synth, train
from rpkit.vc import MissingStyle

from conftest import random_rp_page, random_vector
from sc_oracle import sc_brute


def test_iou_examples():
    a = np.array([[0, 0, 10, 10]])
    assert ev.ele_iou(a, np.array([[0, 5, 10, 10]])) == pytest.approx(1 / 3, abs=1e-15)
    assert ev.ele_iou(a, a) == 1.0
    assert ev.ele_iou(a, np.array([[20, 20, 5, 5]])) == 0.0
    assert ev.ele_iou(np.array([[3, 3, 0, 0]]), np.array([[3, 3, 0, 0]])) == 1.0


def test_iou_errors():
    with pytest.raises(ev.LengthMismatch):
        ev.ele_iou(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(ev.LengthMismatch):
        ev.ele_iou(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ev.IdMismatch):
        ev.page_ele_iou({1: np.zeros(13, int)}, {2: np.zeros(13, int)})


def _iou_ref(a, b):
    out = []
    for (l1, t1, w1, h1), (l2, t2, w2, h2) in zip(a, b):
        if w1 * h1 == 0 and w2 * h2 == 0:
            out.append(1.0)
            continue
        iw = max(0, min(l1 + w1, l2 + w2) - max(l1, l2))
        ih = max(0, min(t1 + h1, t2 + h2) - max(t1, t2))
        inter = iw * ih
        out.append(inter / (w1 * h1 + w2 * h2 - inter))
    return float(np.mean(out))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    a, b = rng.integers(0, 50, (n, 4)), rng.integers(0, 50, (n, 4))
    assert ev.ele_iou(a, b) == pytest.approx(_iou_ref(a, b), abs=1e-12)


def _styled(styles):
    rng = np.random.default_rng(0)
    base = random_vector(rng)
    page = {}
    for i, s in enumerate(styles, start=1):
        v = base.copy()
        v[codec.RP_INDEX["color"]] = 1921 + s
        page[i] = v
    return page


def test_partition_examples():
    assert len(ev.style_partition(_styled([0] * 7))) == 1
    assert len(ev.style_partition(_styled(range(7)))) == 7
    parts = ev.style_partition(_styled([0, 0, 1, 1, 2, 2]))
    assert [set(p.members) for p in parts] == [{1, 2}, {3, 4}, {5, 6}]
    with pytest.raises(MissingStyle):
        ev.style_partition({1: np.zeros(5, int)})


def test_sc_examples():
    real = _styled([0, 0, 1, 1])
    assert ev.sc_score(real, real) == 1.0
    assert ev.sc_score_exact(real, _styled([5, 5, 5, 5])) == Fraction(1, 2)
    assert ev.sc_score(_styled(range(5)), _styled([3, 1, 4, 0, 2])) == 1.0
    with pytest.raises(ev.IdMismatch):
        ev.sc_score(real, {1: real[1]})


def test_sc_matches_brute_force_exhaustively():
    rng = np.random.default_rng(7)
    for _ in range(400):
        n = int(rng.integers(1, 11))
        k = int(rng.integers(1, 5))
        real = _styled(rng.integers(0, k, n))
        gen = _styled(rng.integers(0, k, n))
        assert ev.sc_score_exact(real, gen) == sc_brute(real, gen)


def test_sc_identity_on_synthetic_pages():
    for page in synth.synth_pages(5, synth.SynthSpec(min_elements=32, max_elements=60), seed=2):
        assert ev.sc_score(page.rps, page.rps) == 1.0
        assert ev.page_ele_iou(page.rps, page.rps) == 1.0


def test_fid_properties():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 16)) @ rng.standard_normal((16, 16))
    y = rng.standard_normal((150, 16)) + 0.5
    assert abs(ev.fid(x, x)) < 1e-6
    assert ev.fid(x, y) == pytest.approx(ev.fid(y, x), abs=1e-6)
    a = ev.FidStats(np.array([0.0]), np.array([[1.0]]))
    b = ev.FidStats(np.array([1.0]), np.array([[1.0]]))
    assert ev.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-9)


def _fid_scipy(x, y):
    ma, mb = x.mean(0), y.mean(0)
    ca, cb = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
    s = scipy.linalg.sqrtm(ca @ cb).real
    return float(((ma - mb) ** 2).sum() + np.trace(ca + cb - 2 * s))


@pytest.mark.parametrize("seed", range(5))
def test_fid_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((300, 10)) @ rng.standard_normal((10, 10))
    y = rng.standard_normal((250, 10)) * 2 + rng.standard_normal(10)
    assert ev.fid(x, y, jitter=0.0) == pytest.approx(_fid_scipy(x, y), rel=1e-7)


def test_fid_input_checks():
    with pytest.raises(ValueError):
        ev.fid(np.zeros((1, 3)), np.zeros((4, 3)))
    bad = ev.FidStats(np.zeros(2), np.array([[np.nan, 0], [0, 1]]))
    with pytest.raises(ev.SingularCovariance):
        ev.frechet_distance(bad, bad)
    neg = ev.FidStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ev.SingularCovariance):
        ev.frechet_distance(neg, neg)


def test_noisers_zero_intensity_is_identity(rng):
    page = random_rp_page(rng, 12)
    for fn in ev.NOISERS.values():
        out = fn(page, 0.0, seed=1)
        assert all(np.array_equal(out[k], page[k]) for k in page)


def test_swap_is_involution(rng):
    page = random_rp_page(rng, 10)
    pairs = ev.swap_pairs(page, 3, rng)
    twice = ev.swap_elements(ev.swap_elements(page, pairs=pairs), pairs=pairs)
    assert all(np.array_equal(twice[k], page[k]) for k in page)


def test_noisers_stay_legal():
    rng = np.random.default_rng(3)
    for i in range(1000):
        page = random_rp_page(rng, int(rng.integers(2, 8)))
        out = ev.pollute(page, seed=i, intensity=float(rng.uniform(0.1, 3.0)))
        assert sorted(out) == sorted(page)
        for v in out.values():
            assert codec.validate_vector(v) == []


def test_perturb_keeps_pad(rng):
    page = random_rp_page(rng, 5)
    page[1][codec.RP_INDEX["font-size"]] = codec.PAD
    out = ev.perturb_values(page, 3.0, seed=0)
    assert out[1][codec.RP_INDEX["font-size"]] == codec.PAD


def test_variant_masking():
    toks = np.arange(13)[None]
    lay = ev.variant_tokens(toks, "layout")
    assert (lay[0, 4:] == codec.PAD).all() and (lay[0, :4] == toks[0, :4]).all()
    sty = ev.variant_tokens(toks, "style")
    assert (sty[0, :4] == codec.PAD).all()
    with pytest.raises(ValueError):
        ev.variant_tokens(toks, "color")


@pytest.fixture(scope="module")
def fid_setup():
    from rpkit import vae as V
    pages = synth.synth_pages(6, synth.SynthSpec(min_elements=32, max_elements=40), seed=4)
    samples = train.make_samples(pages)
    vae = V.RpVae(V.VaeConfig(latent=16, hidden=(32, 32, 16, 16)), seed=0)
    return samples, vae


def test_layout_classifier_ignores_style(fid_setup):
    samples, vae = fid_setup
    clf = ev.FidClassifier("layout", latent=16, d=16, layers=1, heads=2, seed=0)
    toks = samples[0].tokens
    shuffled = toks.copy()
    shuffled[:, 4:] = shuffled[np.random.default_rng(0).permutation(len(toks)), 4:]
    a = ev.classifier_features(clf, vae, samples[:1], [toks])
    b = ev.classifier_features(clf, vae, samples[:1], [shuffled])
    np.testing.assert_array_equal(a, b)


def test_untrained_classifier_near_chance(fid_setup):
    samples, vae = fid_setup
    clf = ev.FidClassifier("overall", latent=16, d=16, layers=1, heads=2, seed=0)
    prepared = ev._prepare(clf, vae, ev._labelled_set(samples, 0, None), 64)
    assert ev.classifier_accuracy(clf, prepared) == 0.5


def test_train_classifier_contract(fid_setup):
    samples, vae = fid_setup
    clf, rep = ev.train_fid_classifier(samples, vae, "style", steps=3, batch_size=4, d=16, layers=1, heads=2)
    assert rep.steps == 3 and len(rep.losses) == 3
    assert 0 <= rep.held_out_accuracy <= 1 and 0 <= rep.train_accuracy <= 1
    assert clf.variant == "style"
    with pytest.raises(ValueError):
        ev.train_fid_classifier(samples[:1], vae, steps=1)
