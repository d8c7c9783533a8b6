import math

import pytest

from augopf.case import load_case
from augopf.dataset import BranchRule, generate_dataset, sweep_load_profile
from augopf.nn import TrainConfig
from augopf.training import fit_model


@pytest.fixture(scope="session")
def two_bus():
    return load_case("case2_bistable")


@pytest.fixture(scope="session")
def case39():
    return load_case("case39")


@pytest.fixture(scope="session")
def one_load(two_bus):
    """Every draw at a single load of 0.3 p.u. reactive demand, solved and labelled."""
    profile = sweep_load_profile(two_bus, 1, [0.3])
    return generate_dataset(two_bus, profile, 40, seed=0, angle_range=math.pi / 2, rule=BranchRule(bus=1))


@pytest.fixture(scope="session")
def one_load_model(two_bus, one_load):
    cfg = TrainConfig(batch_size=50, max_epochs=1500, learning_rate=3e-3, final_learning_rate=1e-4)
    model, _ = fit_model(two_bus, one_load, [32, 32], True, cfg, val_fraction=0.0)
    return model
