import numpy as np
import pytest

from latentbank import backbone as B
from latentbank import corpus as C
from latentbank.training import TurnEncoder


@pytest.fixture(scope="session")
def tiny_config():
    return B.BackboneConfig(vocab_size=16, d=8, n_layers_enc=1, n_layers_dec=1, n_heads=2, max_len=16, seed=3)


@pytest.fixture(scope="session")
def tiny_bb(tiny_config):
    return B.init_frozen(tiny_config)


@pytest.fixture(scope="session")
def toy_bb():
    return B.init_frozen(B.BackboneConfig())


@pytest.fixture(scope="session")
def small_spec():
    return C.SyntheticSpec(
        n_sessions=2, turns_per_session=4, n_facts=2, distractor_ratio=0.75,
        lag_distribution=(1, 1, 1, 1, 0), lag_edges=(0, 2, 4, 8, 16), seed=5,
    )


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return C.generate_corpus(small_spec, 6, "c")


@pytest.fixture(scope="session")
def toy_encoder(toy_bb, small_corpus):
    return TurnEncoder(toy_bb, C.build_tokenizer(small_corpus, 64))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
