import time

import numpy as np
import pytest

from somnograph.model import ModelConfig, MultivariateNet, TrainSpec, train_stage1
from somnograph.preprocess import preprocess_record
from somnograph.signal_io import make_markov_record, make_synthetic_record

CHANNELS = ["EEG Fpz-Cz", "EEG Pz-Oz"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_record():
    """Two EEG channels, 4 epochs per stage, 256 Hz."""
    return make_synthetic_record(4, ["EEG Fpz-Cz", "EEG Pz-Oz"], np.random.default_rng(7), subject_id="s01")


@pytest.fixture(scope="session")
def mixed_record():
    """EEG, EOG and EMG channels on a Markov hypnogram."""
    return make_markov_record(12, ["EEG Fpz-Cz", "EOG horizontal", "EMG submental"],
                              np.random.default_rng(8), subject_id="s02")


@pytest.fixture(scope="session")
def benchmark():
    """Stage-1 network trained on the 5-class synthetic benchmark:
    500 epochs per class for training, 100 for validation and test."""
    seeds = np.random.SeedSequence(2024).spawn(8)
    t0 = time.perf_counter()
    train = preprocess_record(make_synthetic_record(500, CHANNELS, seeds[0], subject_id="train"))
    val = preprocess_record(make_synthetic_record(100, CHANNELS, seeds[1], subject_id="val"))
    test_rec = make_synthetic_record(100, CHANNELS, seeds[2], subject_id="test")
    test = preprocess_record(test_rec)
    net = MultivariateNet(ModelConfig(n_eeg=2, seed=11))
    net, history = train_stage1(net, train, val, TrainSpec(max_epochs=12, patience=3, seed=12))
    elapsed = time.perf_counter() - t0
    return {"net": net, "history": history, "test": test, "test_record": test_rec,
            "seconds": elapsed, "seeds": seeds}


# criterion number -> (title, "PASS"/"FAIL", detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d} {title}: {detail}")
