"""Simulation of the disaster area: movement, task completion, battery swaps."""

from __future__ import annotations

import dataclasses
import logging
import math
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from src.exceptions import MaskedActionError, PreconditionError, UndefinedRateError
from src.models.world import (
    AgentKind,
    AgentState,
    EpisodeTrace,
    GridWorld,
    StepOutcome,
    Swap,
)

logger = logging.getLogger(__name__)

# Power is rounded after every decrement so that repeated subtraction of csp stays on
# the decimal grid the scenario was written in.
POWER_DECIMALS = 12
# Slack for floor(pow / csp): 0.3 / 0.1 must count three whole steps.
FLOOR_SLACK = 1e-9

JointAction = Mapping[int, int]
Policy = Callable[[GridWorld, Sequence[AgentState], int], JointAction]
StepHook = Callable[[int, StepOutcome, GridWorld, Sequence[AgentState]], None]


def power_units(pow: float, csp: float) -> int:
    """Whole steps of flight left in a battery: floor(pow / csp)."""
    return math.floor(pow / csp + FLOOR_SLACK)


def decay(pow: float, csp: float) -> float:
    """1 / e^floor(pow / csp), the urgency of a UAV battery."""
    return math.exp(-power_units(pow, csp))


@lru_cache(maxsize=65536)
def _reachable(width: int, height: int, obst_key: bytes, loc: int, radius: float) -> tuple[int, ...]:
    obst = np.frombuffer(obst_key, dtype=bool)
    rows, cols = np.divmod(np.arange(width * height), width)
    row, col = divmod(loc, width)
    dist_sq = (rows - row) ** 2 + (cols - col) ** 2
    within = (dist_sq <= radius * radius + 1e-9) & ~obst
    return tuple(int(c) for c in np.flatnonzero(within))


def reachable_set(world: GridWorld, loc: int, radius: float) -> tuple[int, ...]:
    """Cells within Euclidean distance ``radius`` of ``loc`` that are not obstacles.

    Only the destination is checked; obstacles in between do not block movement.
    The result is sorted and always contains ``loc``.
    """
    if not world.contains(loc):
        raise PreconditionError(f"Location {loc} is outside the {world.width}x{world.height} grid")
    if world.obst[loc]:
        raise PreconditionError(f"Location {loc} is an obstacle")
    if radius < 0:
        raise PreconditionError(f"Movement radius must be nonnegative, got {radius}")
    return _reachable(world.width, world.height, world.obstacle_key(), loc, float(radius))


def action_mask(world: GridWorld, agent: AgentState) -> tuple[int, ...]:
    """Legal destinations of ``agent`` for the next step.

    A UAV without enough power for one step may only stay where it is.
    """
    if agent.stopped:
        return (agent.loc,)
    return reachable_set(world, agent.loc, agent.radius)


def _complete_tasks(world: GridWorld, agents: Sequence[AgentState]) -> tuple[GridWorld, tuple[int, ...]]:
    uav_cells = {a.loc for a in agents if a.kind is AgentKind.UAV}
    worker_cells = {a.loc for a in agents if a.kind is AgentKind.WORKER}
    completed = tuple(sorted(c for c in uav_cells & worker_cells if world.task[c]))
    if not completed:
        return world, completed
    task = world.task.copy()
    task[list(completed)] = False
    return world.with_tasks(task), completed


def mitigation(prev_pow: float, csp: float) -> float:
    """Urgency relieved by a battery swap for a UAV that had ``prev_pow`` before moving."""
    full = decay(1.0, csp)
    if prev_pow < csp:
        return 1.0 - full
    return decay(prev_pow - csp, csp) - full


def step(
    world: GridWorld, agents: Sequence[AgentState], joint_action: JointAction
) -> tuple[StepOutcome, GridWorld, list[AgentState]]:
    """Advance the area by one time step.

    All agents move at once, then tasks shared by a UAV and a worker are completed,
    then UAVs meeting a car get their battery swapped, otherwise they pay ``csp``.
    """
    for agent in agents:
        if agent.id not in joint_action:
            raise PreconditionError(f"Joint action has no entry for agent {agent.id}")
        target = joint_action[agent.id]
        if target not in action_mask(world, agent):
            raise MaskedActionError(agent.id, target)

    moved = [dataclasses.replace(a, loc=int(joint_action[a.id])) for a in agents]
    world, completed = _complete_tasks(world, moved)

    cars_at: dict[int, int] = {}
    for agent in moved:
        if agent.kind is AgentKind.CAR:
            cars_at.setdefault(agent.loc, agent.id)

    mitig_sum = 0.0
    swaps: list[Swap] = []
    updated: list[AgentState] = []
    for agent in moved:
        if agent.kind is not AgentKind.UAV:
            updated.append(agent)
            continue
        car_id = cars_at.get(agent.loc)
        if car_id is not None:
            mitig_sum += mitigation(agent.pow, agent.csp)
            swaps.append(Swap(agent.id, car_id, agent.pow))
            updated.append(dataclasses.replace(agent, pow=1.0))
        elif agent.pow >= agent.csp:
            updated.append(dataclasses.replace(agent, pow=round(agent.pow - agent.csp, POWER_DECIMALS)))
        else:
            updated.append(agent)

    outcome = StepOutcome(
        completed_cells=completed,
        task_cpt=len(completed),
        mitig_sum=mitig_sum,
        swaps=tuple(swaps),
    )
    return outcome, world, updated


def initial_completion_sweep(
    world: GridWorld, agents: Sequence[AgentState]
) -> tuple[StepOutcome, GridWorld]:
    """Complete the tasks a UAV and a worker already share at moment 0."""
    world, completed = _complete_tasks(world, agents)
    return StepOutcome(completed_cells=completed, task_cpt=len(completed)), world


def completion_rate(trace: EpisodeTrace, world: GridWorld) -> float:
    """Fraction of the initial tasks completed during the episode."""
    if world.initial_task_count == 0:
        raise UndefinedRateError("Completion rate is undefined for a world without tasks")
    return trace.completed / world.initial_task_count


def completion_curve(trace: EpisodeTrace) -> list[int]:
    """Tasks completed per moment; entry 0 is the sweep before any move."""
    return [trace.sweep_cpt, *trace.per_step_cpt]


def uav_powers(agents: Sequence[AgentState]) -> list[float]:
    return [a.pow for a in agents if a.kind is AgentKind.UAV]


def run_episode(
    world: GridWorld,
    agents: Sequence[AgentState],
    policy: Policy,
    steps: int,
    on_step: StepHook | None = None,
) -> tuple[EpisodeTrace, GridWorld, list[AgentState]]:
    """Sweep at moment 0, then apply ``steps`` joint actions chosen by ``policy``.

    ``on_step`` sees the moment, the outcome and the state right after each step.
    """
    sweep, world = initial_completion_sweep(world, agents)
    agents = list(agents)
    trace = EpisodeTrace(
        routes=[[a.loc] for a in agents],
        powers=[uav_powers(agents)],
        sweep_cpt=sweep.task_cpt,
        horizon=steps,
    )
    for t in range(steps):
        joint_action = policy(world, agents, t)
        outcome, world, agents = step(world, agents, joint_action)
        for route, agent in zip(trace.routes, agents):
            route.append(agent.loc)
        trace.per_step_cpt.append(outcome.task_cpt)
        trace.per_step_swaps.append(list(outcome.swaps))
        trace.powers.append(uav_powers(agents))
        if on_step is not None:
            on_step(t, outcome, world, agents)
    logger.debug(f"Episode finished: {trace.completed}/{world.initial_task_count} tasks in {steps} steps")
    return trace, world, agents


def replay(world: GridWorld, agents: Sequence[AgentState], trace: EpisodeTrace) -> EpisodeTrace:
    """Re-simulate the routes of ``trace`` from the given start state."""
    for agent, route in zip(agents, trace.routes):
        if route[0] != agent.loc:
            raise PreconditionError(f"Route of agent {agent.id} does not start at its location {agent.loc}")

    def follow(_world: GridWorld, current: Sequence[AgentState], t: int) -> dict[int, int]:
        return {a.id: trace.routes[a.id][t + 1] for a in current}

    replayed, _, _ = run_episode(world, agents, follow, trace.horizon)
    return replayed
