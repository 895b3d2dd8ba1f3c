import numpy as np
import pytest

from cisid import synth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_diag_gmm(rng, k, d, var_lo=0.5, var_hi=2.0):
    """A valid random diagonal GMM parameter set (not a trained model)."""
    weights = rng.dirichlet(np.ones(k))
    means = rng.standard_normal((k, d)) * 2.0
    variances = rng.uniform(var_lo, var_hi, (k, d))
    return weights, means, variances


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """6 speakers x 6 utterances x 2 s; enough for pipeline-level tests."""
    root = tmp_path_factory.mktemp("small_corpus")
    cfg = synth.SynthConfig(num_speakers=6, utterances_per_speaker=6,
                            duration=2.0, seed=77)
    return synth.generate_corpus(root, cfg)
