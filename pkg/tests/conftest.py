import numpy as np
import pytest

from rpkit import codec, synth


def random_vector(rng, vocab=codec.DEFAULT_VOCAB):
    return np.array([rng.choice(vocab.legal_tokens(p)) for p in codec.RP_NAMES], dtype=np.int64)


def random_rp_page(rng, n=None, vocab=codec.DEFAULT_VOCAB):
    n = int(rng.integers(1, 40)) if n is None else n
    return {i: random_vector(rng, vocab) for i in range(1, n + 1)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pages():
    return synth.synth_pages(6, synth.SynthSpec(min_elements=32, max_elements=40), seed=11)
