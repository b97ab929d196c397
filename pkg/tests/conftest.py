import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from cbdbid.auction import SimConfig  # noqa: E402
from cbdbid.datagen import collect_dataset, default_policies  # noqa: E402


@pytest.fixture(scope="session")
def tiny_sim():
    return SimConfig(T=6, impressions_per_interval=25.0, competitor_count=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_sim):
    return collect_dataset(default_policies(), tiny_sim, periods=3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_policy(tiny_dataset):
    """Small but complete CBD policy trained for a handful of epochs."""
    from cbdbid.agent import AgentPolicy, InferenceConfig
    from cbdbid.aligner import AlignerConfig, train_aligner
    from cbdbid.diffusion import CompleterConfig, train_completer
    from cbdbid.idm import IDMConfig, train_idm

    x0, y = tiny_dataset.normalized_states(), tiny_dataset.conditions()
    comp = train_completer(x0, y, CompleterConfig(epochs=3, batch=16, K=5, channels=8, blocks=1, kernel=3))
    idm = train_idm(x0, tiny_dataset.actions(), IDMConfig(epochs=3, hidden=(16,))).model
    ali = train_aligner(x0, y, AlignerConfig(epochs=3, hidden=(16,))).model
    return AgentPolicy(comp, idm, tiny_dataset.stats, ali, InferenceConfig(target=0.8, candidates=3))


def pytest_terminal_summary(terminalreporter):
    import _report

    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_report.LINES):
            terminalreporter.write_line(_report.LINES[n])
