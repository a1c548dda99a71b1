import numpy as np
import pytest

from src.core.network import HawkesParams, OpinionParams, build_topology


@pytest.fixture
def two_user_topology():
    # a_01 = 0.3, a_10 = 0.2
    return build_topology([(0, 1, 0.3), (1, 0, 0.2)], 2)


@pytest.fixture
def empty_topology():
    def make(num_users: int):
        return build_topology([], num_users)
    return make


@pytest.fixture
def quiet_hawkes(empty_topology):
    """No events at all"""
    def make(num_users: int):
        return HawkesParams(np.zeros(num_users), empty_topology(num_users))
    return make


@pytest.fixture
def scalar_opinion(empty_topology):
    def make(b: float = 0.0, theta: float = 0.0, omega2: float = 1.0):
        return OpinionParams(np.array([b]), empty_topology(1), omega2, theta)
    return make
