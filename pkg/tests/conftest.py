"""Shared fixtures.  Full-length training runs are cached per session because
several acceptance checks read the same histories."""

import numpy as np
import pytest

from conslab.engine import ModelConfig, TrainSchedule, run_training
from conslab.losses import LossSpec
from conslab.synth import DatasetConfig, make_dataset

SEEDS = (0, 1, 2)
RUNS = {
    "seg_only+ce": ("seg_only", LossSpec.cross_entropy(), True),
    "gan+ce": ("seg_plus_gan", LossSpec.cross_entropy(), True),
    "gan+cl_warm": ("seg_plus_gan", LossSpec.conservative(lam=5.0), True),
    "gan+cl_cold": ("seg_plus_gan", LossSpec.conservative(lam=5.0), False),
}


@pytest.fixture(scope="session")
def default_data():
    return make_dataset(DatasetConfig())


class RunCache:
    def __init__(self, data):
        self.data = data
        self._cache = {}

    def history(self, key, seed):
        if (key, seed) not in self._cache:
            variant, loss, warm = RUNS[key]
            schedule = TrainSchedule.make(loss, total_steps=2000, warm=warm, seed=seed)
            self._cache[key, seed] = run_training(self.data, schedule, variant, ModelConfig())[0]
        return self._cache[key, seed]

    def finals(self, key):
        return [self.history(key, s).final_target_miou for s in SEEDS]

    def mean_final(self, key):
        return float(np.mean(self.finals(key)))


@pytest.fixture(scope="session")
def runs(default_data):
    return RunCache(default_data)


@pytest.fixture(scope="session")
def small_data():
    cfg = DatasetConfig(H=16, W=16, n_source_train=6, n_source_eval=3, n_target_train=6, n_target_eval=3)
    return make_dataset(cfg)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
