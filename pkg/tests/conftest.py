import pytest
import torch

from fewgeo.corpus import make_shot_subsets, make_split
from fewgeo.encoder import TinyTextEncoder
from fewgeo.synth import generate_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """Five classes, ten users each; enough for real splits and training."""
    return generate_corpus(n_classes=5, users_per_class=10, posts_per_user=4, seed=13)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    users, _ = small_corpus
    split = make_split(users, global_seed=3)
    return make_shot_subsets(split, users, [1, 2, 8], (31, 32, 33))


@pytest.fixture()
def encoder():
    torch.manual_seed(7)
    return TinyTextEncoder(hidden_size=16, vocab_size=512, max_len=64)


@pytest.fixture()
def encoder64():
    torch.manual_seed(7)
    return TinyTextEncoder(hidden_size=8, vocab_size=64, max_len=32, dtype=torch.float64)
