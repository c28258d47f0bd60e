import random

import pytest
import torch

from segalign import datakit
from segalign.preference import PreferenceModel, PreferenceTrainConfig, new_preference_model
from segalign.segmentation import SegmentationPolicy


def pytest_configure(config):
    # Filled by the acceptance suite; echoed after the run so the
    # per-criterion verdicts survive pytest's output capture.
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vocab():
    return datakit.build_vocabulary()


@pytest.fixture(scope="session")
def policy():
    return SegmentationPolicy(l_seg=12)


@pytest.fixture(scope="session")
def pref_model(vocab) -> PreferenceModel:
    """Untrained preference model at the default toy scale."""
    return new_preference_model(PreferenceTrainConfig(seed=7), vocab)


@pytest.fixture(scope="session")
def tiny_pref_model(vocab) -> PreferenceModel:
    """Small widths for finite-difference gradient checks."""
    cfg = PreferenceTrainConfig(seed=3, d=6, d_e=4, l_seg=8, image_size=12, image_width=6)
    return new_preference_model(cfg, vocab)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def scenes(rng):
    return [datakit.random_scene(rng, n) for n in (1, 2, 3, 4, 2, 3)]


def unit(i: int, d: int = 16) -> torch.Tensor:
    e = torch.zeros(d, dtype=torch.float64)
    e[i] = 1.0
    return e
