import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from distill3d import gradcore as gc


@pytest.fixture(autouse=True)
def _reset_precision():
    """Precision is a run-level switch; isolate it per test."""
    prev = gc.default_dtype()
    yield
    gc.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk_dataset16():
    from distill3d.scenes import gen_dataset
    from desk import DESK_DATASET
    return gen_dataset(**DESK_DATASET)


@pytest.fixture(scope="session")
def pretrained16(desk_dataset16):
    from distill3d.field import init_field
    from desk import DESK_FIELD, pretrain_staged
    field = init_field(DESK_FIELD, n_subjects=16, seed=0)
    return pretrain_staged(field, desk_dataset16, seed=0)
