import logging

import numpy as np
import pytest
import torch

from wristfx.core import build_config
from wristfx.experiment import prepared
from wristfx.synthetic import PhantomSpec, generate

torch.set_num_threads(1)
logging.getLogger("wristfx").setLevel(logging.WARNING)

ACCEPTANCE = pytest.StashKey[list]()

TINY = {
    "profile": "desk",
    "localizer.epochs": 3,
    "localizer.drops": [2],
    "localizer.channels": 8,
    "localizer.depth": 2,
    "localizer.batch_size": 8,
    "classifier.epochs": 4,
    "classifier.drops": [3],
    "classifier.head_only_epochs": 2,
    "classifier.input_size": 32,
    "classifier.blocks": [1, 1],
    "classifier.width": 8,
    "classifier.batch_size": 8,
    "classifier.members": 3,
    "evaluation.n_bootstrap": 50,
}


def tiny_config(**overrides):
    return build_config({**TINY, **overrides})


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def phantom_cases():
    """12 patients, PA and LAT each, contrast-normalised."""
    return prepared(generate(PhantomSpec.for_stratum("easy", seed=77, n_cases=12)))


@pytest.fixture(scope="session")
def pa_pairs(phantom_cases):
    return [(c.radiograph, c.landmarks) for c in phantom_cases if c.radiograph.view.value == "PA"]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
