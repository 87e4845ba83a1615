import pytest

from lakesweep.harness import inputs


@pytest.fixture
def baseline():
    return inputs.baseline(rows=24)


@pytest.fixture
def driver_bytes():
    return inputs.met_driver(rows=24)
