import os

import numpy as np
import pytest

os.environ.setdefault("ENVIRONMENT", "test")

from src.models.world import AgentState, GridWorld  # noqa: E402
from src.schemas.checkpoint import NetTopology  # noqa: E402
from src.schemas.scenario import GroundAgentSpec, ScenarioDocument, UavSpec  # noqa: E402
from src.services.manf_nets import PolicyCheckpoint  # noqa: E402


@pytest.fixture
def rng():
    """Seeded generator so every randomized test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def open_world():
    """4x4 grid, no obstacles, tasks at cells 5 and 10."""
    return GridWorld.create(4, 4, obstacles=[], tasks=[5, 10])


@pytest.fixture
def trio():
    """One UAV, one worker and one car in three corners of the 4x4 grid."""
    return [AgentState.uav(0, 0, 1.0), AgentState.worker(1, 3, 1.0), AgentState.car(2, 12, 1.0)]


@pytest.fixture
def tiny_scenario():
    """4x4 scenario with one obstacle, three tasks and one agent of each kind."""
    return ScenarioDocument(
        width=4,
        height=4,
        obstacles=[6],
        tasks=[1, 9, 14],
        uavs=[UavSpec(loc=0, radius=1, csp=0.4)],
        workers=[GroundAgentSpec(loc=3, radius=1)],
        cars=[GroundAgentSpec(loc=12, radius=1)],
        time_limit=2,
    )


@pytest.fixture
def small_topology():
    return NetTopology(height=4, width=4, agent_count=3, embed_dim=4, hidden_mult=1)


@pytest.fixture
def small_checkpoint(small_topology):
    return PolicyCheckpoint.initialize(small_topology, seed=7)
