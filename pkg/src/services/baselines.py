"""Non-learning comparators: the sequential greedy planner, a random policy and an exact oracle."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.exceptions import InstanceTooLargeError, PreconditionError
from src.models.world import AgentKind, AgentState, GridWorld
from src.services.gridworld import (
    Policy,
    action_mask,
    initial_completion_sweep,
    reachable_set,
    step,
)

logger = logging.getLogger(__name__)

MAX_JOINT_BRANCHING = 10**6
MAX_ORACLE_HORIZON = 4
# Powers are keyed at this precision when memoizing oracle states.
POWER_KEY_DECIMALS = 9


@dataclass(frozen=True)
class GreedyPlan:
    """Joint action for one step, chosen agent by agent in id order."""

    actions: dict[int, int]

    def joint_action(self) -> dict[int, int]:
        return dict(self.actions)


@dataclass
class OracleResult:
    optimal: int
    plan: list[list[int]]
    nodes: int = 0
    runtime: float = 0.0


def _distance_sums(world: GridWorld, candidates: Sequence[int], targets: Sequence[int]) -> np.ndarray:
    """Sum of Euclidean distances from every candidate cell to every target cell."""
    if len(targets) == 0:
        return np.zeros(len(candidates))
    cand = np.array(candidates)
    tgt = np.array(targets)
    cand_rows, cand_cols = np.divmod(cand, world.width)
    tgt_rows, tgt_cols = np.divmod(tgt, world.width)
    dist = np.hypot(cand_rows[:, None] - tgt_rows[None, :], cand_cols[:, None] - tgt_cols[None, :])
    return dist.sum(axis=1)


def _closest(world: GridWorld, mask: Sequence[int], targets: Sequence[int]) -> int:
    cells = sorted(mask)
    return cells[int(np.argmin(_distance_sums(world, cells, targets)))]


def greedy_step(world: GridWorld, agents: Sequence[AgentState]) -> GreedyPlan:
    """Greedy-SC-RP: UAVs and workers head for the cell closest to all remaining tasks,
    cars for the cell closest to where the UAVs are going.

    ``np.argmin`` returns the first minimum, so ties go to the lowest cell index.
    """
    tasks = [int(c) for c in np.flatnonzero(world.task)]
    actions: dict[int, int] = {}
    for kind in (AgentKind.UAV, AgentKind.WORKER):
        for agent in agents:
            if agent.kind is kind:
                actions[agent.id] = _closest(world, action_mask(world, agent), tasks)
    uav_next = [actions[a.id] for a in agents if a.kind is AgentKind.UAV]
    for agent in agents:
        if agent.kind is AgentKind.CAR:
            actions[agent.id] = _closest(world, action_mask(world, agent), uav_next)
    return GreedyPlan(actions)


def random_step(masks: Sequence[Sequence[int]], rng: np.random.Generator) -> list[int]:
    """One uniform draw from every mask."""
    for mask in masks:
        if len(mask) == 0:
            raise PreconditionError("Cannot choose from an empty action mask")
    return [int(mask[int(rng.integers(len(mask)))]) for mask in masks]


def greedy_policy() -> Policy:
    def act(world: GridWorld, agents: Sequence[AgentState], _t: int) -> dict[int, int]:
        return greedy_step(world, agents).joint_action()

    return act


def random_policy(rng: np.random.Generator) -> Policy:
    def act(world: GridWorld, agents: Sequence[AgentState], _t: int) -> dict[int, int]:
        masks = [action_mask(world, agent) for agent in agents]
        return {agent.id: cell for agent, cell in zip(agents, random_step(masks, rng))}

    return act


def joint_branching(world: GridWorld, agents: Sequence[AgentState]) -> int:
    """Upper bound on the joint actions of any one step: product of the largest reachable sets."""
    free = np.flatnonzero(~world.obst)
    total = 1
    for agent in agents:
        total *= max(len(reachable_set(world, int(cell), agent.radius)) for cell in free)
    return total


@dataclass
class _Search:
    horizon: int
    nodes: int = 0
    memo: dict = field(default_factory=dict)

    def key(self, world: GridWorld, agents: Sequence[AgentState], t: int) -> tuple:
        return (
            tuple(a.loc for a in agents),
            tuple(round(a.pow, POWER_KEY_DECIMALS) for a in agents if a.is_uav),
            world.task.tobytes(),
            t,
        )

    def best(self, world: GridWorld, agents: Sequence[AgentState], t: int) -> tuple[int, tuple]:
        if t == self.horizon or world.remaining_tasks == 0:
            return 0, ()
        key = self.key(world, agents, t)
        if key in self.memo:
            return self.memo[key]
        self.nodes += 1
        if t == self.horizon - 1:
            result = self.last_step(world, agents)
        else:
            result = self.expand(world, agents, t)
        self.memo[key] = result
        return result

    def expand(self, world: GridWorld, agents: Sequence[AgentState], t: int) -> tuple[int, tuple]:
        masks = [action_mask(world, agent) for agent in agents]
        best_value, best_plan = -1, ()
        for combo in itertools.product(*masks):
            outcome, next_world, moved = step(world, agents, dict(zip((a.id for a in agents), combo)))
            rest_value, rest_plan = self.best(next_world, moved, t + 1)
            value = outcome.task_cpt + rest_value
            if value > best_value:
                best_value, best_plan = value, (combo, *rest_plan)
                if best_value == world.remaining_tasks:
                    break
        return best_value, best_plan

    def last_step(self, world: GridWorld, agents: Sequence[AgentState]) -> tuple[int, tuple]:
        """Only UAV and worker destinations matter on the final step; cars stay put."""
        masks = [action_mask(world, agent) for agent in agents]
        uav_idx = [i for i, a in enumerate(agents) if a.kind is AgentKind.UAV]
        worker_idx = [i for i, a in enumerate(agents) if a.kind is AgentKind.WORKER]
        default = [a.loc for a in agents]
        best_value, best_combo = -1, tuple(default)
        for uav_cells in itertools.product(*(masks[i] for i in uav_idx)):
            for worker_cells in itertools.product(*(masks[i] for i in worker_idx)):
                value = sum(1 for c in set(uav_cells) & set(worker_cells) if world.task[c])
                if value > best_value:
                    combo = list(default)
                    for i, c in zip(uav_idx, uav_cells):
                        combo[i] = c
                    for i, c in zip(worker_idx, worker_cells):
                        combo[i] = c
                    best_value, best_combo = value, tuple(combo)
        return best_value, (best_combo,)


def solve_exact(world: GridWorld, agents: Sequence[AgentState], horizon: int) -> OracleResult:
    """Maximum number of tasks completable within ``horizon`` steps, with one plan reaching it.

    The count includes tasks completed by the sweep at moment 0. Once every task is done
    the remaining steps of the plan keep all agents in place.
    """
    if horizon < 0:
        raise PreconditionError(f"Horizon must be nonnegative, got {horizon}")
    if horizon > MAX_ORACLE_HORIZON:
        raise InstanceTooLargeError(f"Horizon {horizon} exceeds the oracle limit of {MAX_ORACLE_HORIZON}")
    branching = joint_branching(world, agents)
    if branching > MAX_JOINT_BRANCHING:
        raise InstanceTooLargeError(
            f"Up to {branching} joint actions per step, the oracle handles at most {MAX_JOINT_BRANCHING}"
        )
    started = time.perf_counter()
    sweep, world = initial_completion_sweep(world, agents)
    search = _Search(horizon)
    value, plan = search.best(world, list(agents), 0)
    steps = [list(combo) for combo in plan]
    while len(steps) < horizon:
        steps.append(list(steps[-1]) if steps else [a.loc for a in agents])
    result = OracleResult(
        optimal=sweep.task_cpt + max(value, 0),
        plan=steps,
        nodes=search.nodes,
        runtime=time.perf_counter() - started,
    )
    logger.info(f"Oracle: optimum {result.optimal} over {horizon} steps, {result.nodes} nodes expanded")
    return result
