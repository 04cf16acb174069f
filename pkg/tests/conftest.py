import sys

import numpy as np
import pytest
import torch
from hypothesis import settings

from bsast.config import SynthConfig, tiny_model
from bsast.synth import build_toy_corpus, make_toy_corpus

settings.register_profile("bsast", max_examples=40, deadline=None)
settings.load_profile("bsast")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus():
    return build_toy_corpus(sample_rate=8000, per_label=2, n_rirs=3, n_noises=2, seconds=1.0, seed=0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_toy_corpus(root, sample_rate=8000, per_label=2, n_rirs=3, n_noises=2, seconds=1.0, seed=0)
    return root


@pytest.fixture
def tiny_cfg():
    return tiny_model()


@pytest.fixture
def short_synth():
    """Half-second 8 kHz scenes with embeddings matching the tiny model."""
    return SynthConfig(sample_rate=8000, duration=0.5, embed_dim=16, min_event_s=0.2)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = module.verdict_lines() if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
