"""Shared small fixtures. Heavy artifacts are session-scoped."""

import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter):
    """Echo acceptance verdict lines after the run, outside output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", []) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

from oodbench.datagen import GridSpec, generate_grid_positions
from oodbench.neuralcore import init_params, mini_resnet
from oodbench.seeding import hash_seed
from oodbench.splits import partition, sample_combination_ladder


@pytest.fixture(scope="session")
def tiny_gridspec():
    # 3x3 label grid on a 24px canvas keeps every train step cheap.
    return GridSpec(
        num_categories=3,
        num_conditions=3,
        cell_grid=(3, 3),
        glyph_size=8,
        canvas_size=24,
        samples_per_combination=6,
        noise_std=0.02,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_gridspec):
    return generate_grid_positions(tiny_gridspec, seed=42)


@pytest.fixture(scope="session")
def tiny_net():
    return mini_resnet((24, 24, 1), 3, channels=4, probe_width=8)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    ladder = sample_combination_ladder(3, 3, [2], seed=13)
    _, combos, _ = ladder.levels[0]
    # 6 InD cells x 6 samples = 36 items; 3 OoD cells x 6 = 18.
    return partition(tiny_dataset, combos, 24, 6, 12, seed=13, level_label="low")


@pytest.fixture
def tiny_params(tiny_net):
    return init_params(tiny_net, seed=hash_seed(0, "test-init"))
