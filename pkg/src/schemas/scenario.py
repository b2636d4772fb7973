from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from src.config import settings
from src.exceptions import SchemaVersionError
from src.models.world import AgentState, EpisodeTrace, GridWorld, Swap


class VersionedDocument(BaseModel):
    """Base for every document written to disk."""

    schema_version: int = Field(default_factory=lambda: settings.SCHEMA_VERSION)

    @field_validator("schema_version")
    @classmethod
    def check_version(cls, value: int) -> int:
        if value != settings.SCHEMA_VERSION:
            raise SchemaVersionError(
                f"Unsupported schema version {value}, expected {settings.SCHEMA_VERSION}"
            )
        return value


class UavSpec(BaseModel):
    loc: int
    radius: float = Field(ge=0)
    csp: float = Field(gt=0, le=1)
    pow: float = Field(default=1.0, ge=0, le=1)


class GroundAgentSpec(BaseModel):
    loc: int
    radius: float = Field(ge=0)


class ScenarioDocument(VersionedDocument):
    """A complete episode start state: area, agents and the time limit."""

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    obstacles: List[int] = []
    tasks: List[int] = []
    uavs: List[UavSpec] = []
    workers: List[GroundAgentSpec] = []
    cars: List[GroundAgentSpec] = []
    time_limit: int = Field(ge=0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_cells(self) -> "ScenarioDocument":
        size = self.width * self.height
        obstacles = set(self.obstacles)
        for cell in [*self.obstacles, *self.tasks]:
            if not 0 <= cell < size:
                raise ValueError(f"Cell {cell} is outside the {self.width}x{self.height} grid")
        if obstacles & set(self.tasks):
            raise ValueError("A cell cannot be both an obstacle and a task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("Task cells must be distinct")
        for spec in [*self.uavs, *self.workers, *self.cars]:
            if not 0 <= spec.loc < size or spec.loc in obstacles:
                raise ValueError(f"Agent location {spec.loc} is off the grid or on an obstacle")
        return self

    @property
    def agent_count(self) -> int:
        return len(self.uavs) + len(self.workers) + len(self.cars)

    def build_world(self) -> GridWorld:
        return GridWorld.create(self.width, self.height, self.obstacles, self.tasks)

    def build_agents(self) -> list[AgentState]:
        """Agents with the uniform numbering: UAVs, then workers, then cars."""
        agents: list[AgentState] = []
        for spec in self.uavs:
            agents.append(AgentState.uav(len(agents), spec.loc, spec.radius, spec.pow, spec.csp))
        for spec in self.workers:
            agents.append(AgentState.worker(len(agents), spec.loc, spec.radius))
        for spec in self.cars:
            agents.append(AgentState.car(len(agents), spec.loc, spec.radius))
        return agents

    def build(self) -> tuple[GridWorld, list[AgentState]]:
        return self.build_world(), self.build_agents()


class SwapRecord(BaseModel):
    uav_id: int
    car_id: int
    prev_pow: float


class TraceDocument(VersionedDocument):
    """Routes and per-step counts of one episode, replayable against its scenario."""

    routes: List[List[int]]
    per_step_cpt: List[int]
    per_step_swaps: List[List[SwapRecord]]
    powers: List[List[float]]
    sweep_cpt: int = 0
    horizon: int

    @classmethod
    def from_trace(cls, trace: EpisodeTrace) -> "TraceDocument":
        return cls(
            routes=trace.routes,
            per_step_cpt=trace.per_step_cpt,
            per_step_swaps=[
                [SwapRecord(**swap._asdict()) for swap in swaps] for swaps in trace.per_step_swaps
            ],
            powers=trace.powers,
            sweep_cpt=trace.sweep_cpt,
            horizon=trace.horizon,
        )

    def to_trace(self) -> EpisodeTrace:
        return EpisodeTrace(
            routes=[list(route) for route in self.routes],
            per_step_cpt=list(self.per_step_cpt),
            per_step_swaps=[
                [Swap(s.uav_id, s.car_id, s.prev_pow) for s in swaps] for swaps in self.per_step_swaps
            ],
            powers=[list(row) for row in self.powers],
            sweep_cpt=self.sweep_cpt,
            horizon=self.horizon,
        )
