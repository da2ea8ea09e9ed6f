import random

import pytest
from hypothesis import HealthCheck, settings

from websift.tokenizers import TokenizerSpec, load_tokenizer

settings.register_profile(
    "websift",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("websift")


@pytest.fixture(scope="session")
def tokenizer():
    return load_tokenizer(TokenizerSpec())


def make_texts(rng: random.Random, words, n: int, lo: int = 20, hi: int = 60) -> list[str]:
    return [
        " ".join(rng.choice(words) for _ in range(rng.randint(lo, hi))) for _ in range(n)
    ]
