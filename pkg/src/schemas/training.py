from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from src.schemas.harness import ScenarioRecipe
from src.schemas.scenario import VersionedDocument


class TrainConfig(VersionedDocument):
    """Hyperparameters of one training run.

    Defaults: learning rate 1e-4, discount 0.7, target
    period 200, replay capacity 5000, batch 32, epsilon annealed from 1 to 0.1.
    """

    algorithm: Literal["dnn", "rl"] = "rl"
    reward_mode: Optional[Literal["task_only", "task_plus_mitig"]] = None
    use_cnn: bool = True
    gamma: float = Field(default=0.7, gt=0, lt=1)
    lr: float = Field(default=1e-4, gt=0)
    target_period: int = Field(default=200, gt=0)
    replay_capacity: int = Field(default=5000, gt=0)
    batch_size: int = Field(default=32, gt=0)
    epsilon_start: float = Field(default=1.0, ge=0, le=1)
    epsilon_end: float = Field(default=0.1, ge=0, le=1)
    epsilon_decay_steps: int = Field(default=1024, ge=0)
    max_steps: int = Field(default=20000, ge=0)
    seed: int = 0
    embed_dim: int = Field(default=32, gt=0)
    hidden_mult: int = Field(default=10, gt=0)
    rms_rho: float = Field(default=0.99, gt=0, lt=1)
    rms_eps: float = Field(default=1e-8, gt=0)
    eval_every: int = Field(default=500, ge=0)
    eval_episodes: int = Field(default=5, gt=0)
    checkpoint_every: int = Field(default=2000, ge=0)
    scenario: Optional[str] = None
    recipe: Optional[ScenarioRecipe] = None

    @model_validator(mode="after")
    def fill_defaults(self) -> "TrainConfig":
        if self.reward_mode is None:
            self.reward_mode = "task_only" if self.algorithm == "rl" else "task_plus_mitig"
        if self.scenario is not None and self.recipe is not None:
            raise ValueError("Give either a scenario file or a recipe, not both")
        return self

    @property
    def label(self) -> str:
        """Name of the algorithm variant this config trains."""
        base = "MANF-RL-RP" if self.algorithm == "rl" else "MANF-DNN-RP"
        default_mode = "task_only" if self.algorithm == "rl" else "task_plus_mitig"
        if not self.use_cnn or self.reward_mode != default_mode:
            return f"{base}-temp"
        return base


class TrainLogRecord(BaseModel):
    step: int
    loss: float
    epsilon: float
    eval_rate: Optional[float] = None
