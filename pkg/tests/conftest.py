import numpy as np
import pytest

from inftrace.data import synth_corpus
from inftrace.model import config_for, train


@pytest.fixture(scope="session")
def toy():
    """Noise-free synthetic corpus: (train, dev, test, lexicon)."""
    return synth_corpus(0, 300, 40, 40)


@pytest.fixture(scope="session")
def toy_mlp(toy):
    train_set = toy[0]
    return train(train_set, config_for(train_set, seed=0))


@pytest.fixture(scope="session")
def convex200():
    train_set, dev, test, lex = synth_corpus(1, 200, 20, 20)
    ckpt = train(train_set, config_for(train_set, mode="convex", d=10))
    return train_set, test, ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
