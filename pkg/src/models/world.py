from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from src.exceptions import PreconditionError


class AgentKind(str, Enum):
    """The three kinds of agents sharing the area."""

    UAV = "uav"
    WORKER = "worker"
    CAR = "car"


class Cell(NamedTuple):
    """Flags of a single area cell."""

    obst: int
    task: int


@dataclass(frozen=True)
class GridWorld:
    """The discrete area: a row-major lattice of obstacle and task flags.

    Instances are treated as values. Operations that change task flags return a new
    world and never touch the arrays of an existing one.
    """

    width: int
    height: int
    obst: np.ndarray
    task: np.ndarray
    initial_task_count: int

    @classmethod
    def create(
        cls, width: int, height: int, obstacles: list[int], tasks: list[int]
    ) -> "GridWorld":
        size = width * height
        obst = np.zeros(size, dtype=bool)
        task = np.zeros(size, dtype=bool)
        for cell in obstacles:
            if not 0 <= cell < size:
                raise PreconditionError(f"Obstacle cell {cell} is outside the {width}x{height} grid")
            obst[cell] = True
        for cell in tasks:
            if not 0 <= cell < size:
                raise PreconditionError(f"Task cell {cell} is outside the {width}x{height} grid")
            if obst[cell]:
                raise PreconditionError(f"Cell {cell} cannot be both an obstacle and a task")
            task[cell] = True
        obst.flags.writeable = False
        task.flags.writeable = False
        return cls(width, height, obst, task, int(task.sum()))

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def cells(self) -> list[Cell]:
        return [Cell(int(o), int(t)) for o, t in zip(self.obst, self.task)]

    @property
    def remaining_tasks(self) -> int:
        return int(self.task.sum())

    def coords(self, cell: int) -> tuple[int, int]:
        """(row, col) of a cell index."""
        return divmod(cell, self.width)

    def contains(self, cell: int) -> bool:
        return 0 <= cell < self.size

    def with_tasks(self, task: np.ndarray) -> "GridWorld":
        task = task.copy()
        task.flags.writeable = False
        return GridWorld(self.width, self.height, self.obst, task, self.initial_task_count)

    def obstacle_key(self) -> bytes:
        return self.obst.tobytes()


@dataclass(frozen=True)
class AgentState:
    """Position and battery of one agent. ``pow``/``csp`` are set for UAVs only."""

    kind: AgentKind
    id: int
    loc: int
    radius: float
    pow: float | None = None
    csp: float | None = None

    @classmethod
    def uav(cls, id: int, loc: int, radius: float, pow: float = 1.0, csp: float = 0.3) -> "AgentState":
        return cls(AgentKind.UAV, id, loc, radius, pow, csp)

    @classmethod
    def worker(cls, id: int, loc: int, radius: float) -> "AgentState":
        return cls(AgentKind.WORKER, id, loc, radius)

    @classmethod
    def car(cls, id: int, loc: int, radius: float) -> "AgentState":
        return cls(AgentKind.CAR, id, loc, radius)

    @property
    def is_uav(self) -> bool:
        return self.kind is AgentKind.UAV

    @property
    def stopped(self) -> bool:
        """A UAV whose battery cannot pay for one more step."""
        return self.is_uav and self.pow < self.csp


class Swap(NamedTuple):
    """A battery swap: the UAV, the car it met and the power it had before."""

    uav_id: int
    car_id: int
    prev_pow: float


@dataclass(frozen=True)
class StepOutcome:
    completed_cells: tuple[int, ...] = ()
    task_cpt: int = 0
    mitig_sum: float = 0.0
    swaps: tuple[Swap, ...] = ()


@dataclass
class EpisodeTrace:
    """Routes and per-step accounting of one episode.

    ``routes[i]`` holds agent ``i``'s location at every moment, ``powers[t]`` the power
    of every UAV (in id order) at moment ``t``.
    """

    routes: list[list[int]]
    per_step_cpt: list[int] = field(default_factory=list)
    per_step_swaps: list[list[Swap]] = field(default_factory=list)
    powers: list[list[float]] = field(default_factory=list)
    sweep_cpt: int = 0
    horizon: int = 0

    @property
    def completed(self) -> int:
        return self.sweep_cpt + sum(self.per_step_cpt)

    @property
    def swap_count(self) -> int:
        return sum(len(swaps) for swaps in self.per_step_swaps)
