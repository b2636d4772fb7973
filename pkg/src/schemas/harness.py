from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from src.schemas.scenario import VersionedDocument

RangeSpec = Union[float, Tuple[float, float]]


class ScenarioRecipe(VersionedDocument):
    """How to sample a scenario: sizes, counts, placement modes and attribute ranges.

    A radius or consumption given as a ``[lo, hi]`` pair is drawn per agent; whole-number
    bounds draw integers, anything else draws uniformly and rounds to two decimals.
    """

    name: str = "custom"
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    obstacles: int = Field(ge=0)
    tasks: int = Field(ge=0)
    task_placement: Literal["random", "checkin"] = "random"
    uavs: int = Field(ge=0)
    workers: int = Field(ge=0)
    cars: int = Field(ge=0)
    start_placement: Literal["same", "random", "checkin"] = "random"
    uav_radius: RangeSpec
    worker_radius: RangeSpec
    car_radius: RangeSpec
    csp: RangeSpec
    time_limit: int = Field(default=9, ge=0)
    seed: int = 0
    density_file: Optional[str] = None

    @field_validator("uav_radius", "worker_radius", "car_radius", "csp")
    @classmethod
    def check_range(cls, value: RangeSpec) -> RangeSpec:
        if isinstance(value, tuple):
            lo, hi = value
            if lo > hi:
                raise ValueError(f"Interval [{lo}, {hi}] is not well ordered")
            if lo < 0:
                raise ValueError(f"Interval [{lo}, {hi}] must be nonnegative")
        elif value < 0:
            raise ValueError(f"Value {value} must be nonnegative")
        return value

    @field_validator("csp")
    @classmethod
    def check_csp(cls, value: RangeSpec) -> RangeSpec:
        lo = value[0] if isinstance(value, tuple) else value
        hi = value[1] if isinstance(value, tuple) else value
        if lo <= 0 or hi > 1:
            raise ValueError(f"Power consumption must lie in (0, 1], got {value}")
        return value

    @model_validator(mode="after")
    def check_counts(self) -> "ScenarioRecipe":
        if self.obstacles + self.tasks > self.width * self.height:
            raise ValueError(
                f"{self.obstacles} obstacles and {self.tasks} tasks do not fit a "
                f"{self.width}x{self.height} grid"
            )
        return self

    @property
    def agent_count(self) -> int:
        return self.uavs + self.workers + self.cars


def _survey_row(name: str, start: str, placement: str, fixed: bool, **overrides) -> ScenarioRecipe:
    attributes = (
        dict(uav_radius=8, worker_radius=3, car_radius=5, csp=0.3)
        if fixed
        else dict(uav_radius=(7, 9), worker_radius=(2, 4), car_radius=(4, 6), csp=(0.2, 0.4))
    )
    fields = dict(
        name=name,
        width=16,
        height=16,
        obstacles=20,
        tasks=120,
        task_placement=placement,
        uavs=10,
        workers=25,
        cars=5,
        start_placement=start,
        time_limit=9,
        **attributes,
    )
    fields.update(overrides)
    return ScenarioRecipe(**fields)


PRESETS: Dict[str, ScenarioRecipe] = {
    "row1": _survey_row("row1", "same", "random", fixed=True),
    "row2": _survey_row("row2", "random", "random", fixed=False),
    "row3": _survey_row("row3", "checkin", "random", fixed=False),
    "row4": _survey_row("row4", "checkin", "checkin", fixed=False),
    "row5": _survey_row("row5", "random", "random", fixed=False, uavs=8, workers=20, cars=4),
    "row6": _survey_row("row6", "random", "random", fixed=False, width=12, height=12),
    "row7": _survey_row("row7", "random", "random", fixed=False, tasks=100),
    "row8": _survey_row("row8", "random", "random", fixed=False, obstacles=40),
    "desk8": ScenarioRecipe(
        name="desk8",
        width=8,
        height=8,
        obstacles=4,
        tasks=12,
        uavs=2,
        workers=4,
        cars=1,
        start_placement="random",
        uav_radius=3,
        worker_radius=2,
        car_radius=3,
        csp=0.3,
        time_limit=6,
    ),
    "oracle4": ScenarioRecipe(
        name="oracle4",
        width=4,
        height=4,
        obstacles=1,
        tasks=3,
        uavs=1,
        workers=1,
        cars=1,
        start_placement="random",
        uav_radius=1,
        worker_radius=1,
        car_radius=1,
        csp=0.4,
        time_limit=2,
    ),
}


class SwapMark(BaseModel):
    moment: int
    uav_id: int
    car_id: int
    prev_pow: float


class EpisodeResult(BaseModel):
    policy: str
    recipe: str
    seed: int
    initial_tasks: int
    completed: int
    rate: float
    curve: List[int]
    routes: List[List[int]]
    powers: List[List[float]]
    swaps: List[SwapMark]

    @model_validator(mode="after")
    def check_coherence(self) -> "EpisodeResult":
        if sum(self.curve) != self.completed:
            raise ValueError("Per-step completions must sum to the completed total")
        return self


class PolicySummary(BaseModel):
    policy: str
    recipe: str
    episodes: int
    mean_rate: float
    std_rate: float
    total_swaps: int
    mean_curve: List[float]


class EvalReport(VersionedDocument):
    time_limit: int
    episodes: List[EpisodeResult]
    summaries: List[PolicySummary]


class OracleReport(VersionedDocument):
    optimal: int
    plan: List[List[int]]
    nodes: int
    runtime: float
