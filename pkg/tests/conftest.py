import numpy as np
import pytest
import torch

from csdiar.synth import SynthCorpusConfig, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A few short utterances with 16-dim mock embeddings."""
    cfg = SynthCorpusConfig(n_train=12, n_dev=4, n_test=4, min_duration=1.0, max_duration=2.0,
                            max_switches=2, seed=7, embed_dim=16)
    out = tmp_path_factory.mktemp("tiny_corpus")
    return generate_corpus(cfg, out)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
