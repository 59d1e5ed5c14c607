"""Shared fixtures: tiny model/dataset factories sized so the whole suite
stays fast on one CPU core."""

import sys

import numpy as np
import pytest

from d2dmoe.data import gen_dataset
from d2dmoe.models import TransformerConfig, build_model


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines after the test summary, where
    output capture can't hide them."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def make_config(**overrides):
    base = dict(vocab_size=64, context_length=16, model_dim=16, num_heads=2,
                num_layers=2, expansion=4, ffn_kind="standard",
                activation="relu", task_head="lm")
    base.update(overrides)
    return TransformerConfig(**base)


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture(scope="session")
def lm_dataset():
    return gen_dataset("byte_lm", num_sequences=96, seq_len=16, seed=7)


@pytest.fixture(scope="session")
def classify_dataset():
    return gen_dataset("toy_classify", num_sequences=96, seq_len=16, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
