import pytest

from helpers import flat_scenario


@pytest.fixture
def make_flat():
    return flat_scenario
