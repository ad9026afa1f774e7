import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from robust_embed.encoder import Vocab, random_encoder  # noqa: E402

TINY_SENTENCES = [
    "the movie was good",
    "the film was bad",
    "a great plot",
    "dull acting overall",
    "good music and great acting",
]


@pytest.fixture
def tiny_vocab():
    return Vocab.build(TINY_SENTENCES)


@pytest.fixture
def tiny_encoder(tiny_vocab):
    return random_encoder(len(tiny_vocab), seed=3, dtype=torch.float64, dim=8, layers=1, heads=2, max_len=8,
                          dropout_p=0.1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
