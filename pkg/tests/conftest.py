import os

import numpy as np
import pytest

from sanmove.src.data_pipeline import (
    EncodedSession,
    PreparedDataset,
    PreprocessConfig,
    Vocab,
    compute_slot_table,
    preprocess,
)
from sanmove.src.predictor import ModelParams, SanMoveModel
from sanmove.src.synthetic import cycle_checkins

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

GOLDEN_CONFIG = PreprocessConfig(min_user_records=5, min_session_records=2, min_user_sessions=2)


def make_session(user, locations, start_slot=8, start_ts=1_333_360_800):
    locations = np.asarray(locations, dtype=np.int64)
    k = locations.size
    return EncodedSession(
        user=user,
        locations=locations,
        timestamps=start_ts + 3600 * np.arange(k, dtype=np.int64),
        slots=(start_slot + np.arange(k, dtype=np.int64)) % 48,
    )


def make_tiny_dataset():
    """2 users, 6 locations: three training sessions and one test session each."""
    coords = np.full((7, 2), np.nan)
    coords[1:] = [
        [40.70, -74.00],
        [40.71, -74.01],
        [40.75, -73.98],
        [40.80, -73.95],
        [40.60, -74.10],
        [40.72, -73.99],
    ]
    vocab = Vocab({"alice": 0, "bob": 1}, {f"v{i}": i for i in range(1, 7)}, coords)
    train = {
        0: [make_session(0, [1, 2, 3, 4, 5], 8), make_session(0, [2, 3, 4, 5, 6], 30), make_session(0, [1, 3, 5, 2], 12)],
        1: [make_session(1, [6, 5, 4, 3, 2], 20), make_session(1, [5, 4, 3, 2, 1], 40), make_session(1, [6, 4, 2, 1], 9)],
    }
    test = {
        0: [make_session(0, [3, 4, 5, 6], 15)],
        1: [make_session(1, [4, 3, 2, 1], 22)],
    }
    slot_table = compute_slot_table(s for sessions in train.values() for s in sessions)
    return PreparedDataset(vocab, train, test, slot_table)


def make_tiny_model(dataset, d=8, seed=0, init_std=0.3, n_layers=1, **kwargs):
    rng = np.random.default_rng(seed)
    params = ModelParams.initialize(
        dataset.vocab.n_users, dataset.vocab.n_locations, d, n_layers, rng, init_std=init_std,
        tie_weights=kwargs.pop("tie_weights", False),
    )
    return SanMoveModel(params, dataset.slot_table, **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_dataset():
    return make_tiny_dataset()


@pytest.fixture
def tiny_model(tiny_dataset):
    return make_tiny_model(tiny_dataset)


@pytest.fixture(scope="session")
def cycle_dataset():
    return preprocess(cycle_checkins(noise=0.0))


@pytest.fixture
def golden_input():
    return os.path.join(DATA_DIR, "golden_checkins.tsv")


@pytest.fixture
def golden_output():
    return os.path.join(DATA_DIR, "golden_dataset.txt")
