import numpy as np
import pytest

from utils.data_generator import RallyGenerator, calibrate_shot_templates
from utils.datatypes import TableGeometry
from utils.geometry import default_test_rig


@pytest.fixture
def table():
    return TableGeometry()


@pytest.fixture
def rig():
    return default_test_rig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def templates():
    return calibrate_shot_templates()


@pytest.fixture
def generator(templates):
    return RallyGenerator(seed=11, templates=templates)
