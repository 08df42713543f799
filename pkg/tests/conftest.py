import time
from dataclasses import dataclass

import pytest
import torch

from todcl.fixture import load_fixture
from todcl.model import load_checkpoint
from todcl.trainer import TrainConfig, train

torch.set_num_threads(1)

TINY_BACKBONE = {"d_model": 32, "ffn_dim": 64, "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "dropout": 0.0}


@pytest.fixture(scope="session")
def fixture_data():
    return load_fixture()


@pytest.fixture(scope="session")
def sessions(fixture_data):
    return fixture_data[0]


@pytest.fixture(scope="session")
def db(fixture_data):
    return fixture_data[1]


@pytest.fixture(scope="session")
def schema(fixture_data):
    return fixture_data[2]


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=1, validate=False, backbone=dict(TINY_BACKBONE), max_state_len=12, max_response_len=12)


@dataclass
class OverfitRun:
    session: object
    model: object
    artifacts: object
    seconds: float


@pytest.fixture(scope="session")
def overfit_run(sessions, db, schema, tmp_path_factory):
    """Baseline model trained for 200 steps on a single 3-turn fixture session."""
    session = next(s for s in sessions if len(s.turns) == 3)
    cfg = TrainConfig(mode="baseline", epochs=200, validate=False, backbone={"dropout": 0.0})
    t0 = time.time()
    art = train([session], [], db, schema, cfg, tmp_path_factory.mktemp("overfit"))
    seconds = time.time() - t0
    model, _ = load_checkpoint(art.best_checkpoint)
    return OverfitRun(session, model, art, seconds)
