"""Global channels and per-agent local features fed to the networks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from src.exceptions import InvalidParameterError
from src.models.observation import GlobalChannels, LocalFeatures, ObservationBundle
from src.models.world import AgentKind, AgentState, GridWorld
from src.services.gridworld import action_mask, decay


def urgency(pow: float | None, csp: float | None, kind: AgentKind) -> float:
    """How badly an agent needs a battery swap, in [0, 1].

    Workers and cars never run out of power, so their urgency is 0.
    """
    if kind is not AgentKind.UAV:
        return 0.0
    if csp is None or csp <= 0:
        raise InvalidParameterError(f"UAV power consumption must be positive, got {csp}")
    return decay(pow, csp)


def build_global(world: GridWorld, agents: Sequence[AgentState]) -> GlobalChannels:
    shape = (world.height, world.width)
    urge = np.zeros(world.size)
    work = np.zeros(world.size)
    car = np.zeros(world.size)
    for agent in agents:
        if agent.kind is AgentKind.UAV:
            urge[agent.loc] += urgency(agent.pow, agent.csp, agent.kind)
        elif agent.kind is AgentKind.WORKER:
            work[agent.loc] += 1
        else:
            car[agent.loc] += 1
    return GlobalChannels(
        obst_dist=world.obst.astype(float).reshape(shape),
        task_dist=world.task.astype(float).reshape(shape),
        urge_dist=urge.reshape(shape),
        work_dist=work.reshape(shape),
        car_dist=car.reshape(shape),
    )


def build_local(world: GridWorld, agent: AgentState, agent_count: int) -> LocalFeatures:
    loc = np.zeros(world.size)
    loc[agent.loc] = 1.0
    ident = np.zeros(agent_count)
    ident[agent.id] = 1.0
    return LocalFeatures(
        loc_onehot=loc.reshape(world.height, world.width),
        agent_id_onehot=ident,
        urge=urgency(agent.pow, agent.csp, agent.kind),
    )


def build_bundle(world: GridWorld, agents: Sequence[AgentState]) -> ObservationBundle:
    """Everything the agents observe at one moment, before any embedding."""
    return ObservationBundle(
        channels=build_global(world, agents),
        locals=tuple(build_local(world, agent, len(agents)) for agent in agents),
        masks=tuple(action_mask(world, agent) for agent in agents),
    )
