"""Shared fixtures: small deterministic datasets and trained-model caches."""

import numpy as np
import pytest
import torch

from distilldet.data import generate_dataset
from distilldet.presets import desk_dataset_spec

from tests._report import LINES

torch.use_deterministic_algorithms(True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if LINES:
        terminalreporter.section("acceptance summary")
        for line in LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_samples():
    """Eight 64px images; enough to exercise every code path cheaply."""
    return generate_dataset(desk_dataset_spec(num_images=8, seed=3))


@pytest.fixture(scope="session")
def small_samples():
    """A 48-image split for short smoke trainings."""
    return generate_dataset(desk_dataset_spec(num_images=48, seed=21))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
