import numpy as np
import pytest

from xmodal.align import prepare_batch
from xmodal.grad import init_params
from xmodal.synth import SynthConfig, generate


def small_config(**kw):
    base = dict(num_studies=4, d=8, grid=(2, 3), n_words=4, vocab_size=4, concepts_per_study=2,
                n_background=2, noise_sigma=0.3, lateral_fraction=1.0, feature_scale=1.0,
                box_size=(1, 1), seed=3)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def small_corpus():
    return generate(small_config())


@pytest.fixture
def small_batch(small_corpus):
    return prepare_batch(small_corpus.studies)


@pytest.fixture
def params8():
    return init_params(8, seed=1)


def random_instance(rng, n_r=None, n_w=None, d=None):
    """Random small pair with a partly masked lateral half and a masked token."""
    n_r = n_r or int(rng.integers(2, 4))
    n_w = n_w or int(rng.integers(2, 5))
    d = d or int(rng.integers(2, 6))
    V = rng.standard_normal((2 * n_r, d))
    V[n_r + int(rng.integers(0, n_r)):] = 0.0
    T = rng.standard_normal((n_w, d))
    rmask = np.linalg.norm(V, axis=1) > 0
    tmask = np.ones(n_w, dtype=bool)
    if n_w > 2:
        tmask[-1] = False
    return V, rmask, T, tmask


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
