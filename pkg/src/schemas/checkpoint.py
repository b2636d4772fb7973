from typing import Optional

from pydantic import BaseModel, Field, model_validator

from src.schemas.scenario import VersionedDocument

CONV_CHANNELS_IN = 5
CONV_CHANNELS_OUT = 10


class NetTopology(BaseModel):
    """Shape of a MANF network stack, fixed for the lifetime of a checkpoint."""

    height: int = Field(gt=0)
    width: int = Field(gt=0)
    agent_count: int = Field(gt=0)
    embed_dim: int = Field(default=32, gt=0)
    hidden_mult: int = Field(default=10, gt=0)
    use_cnn: bool = True

    @model_validator(mode="after")
    def check_even(self) -> "NetTopology":
        if self.use_cnn and (self.height % 2 or self.width % 2):
            raise ValueError(
                f"The spatial extractor pools 2x2 blocks and needs even grid dims, got {self.height}x{self.width}"
            )
        return self

    @property
    def cells(self) -> int:
        return self.height * self.width

    @property
    def state_length(self) -> int:
        """Length of the shared embedding s^t."""
        if self.use_cnn:
            return CONV_CHANNELS_OUT * (self.height // 2) * (self.width // 2)
        return CONV_CHANNELS_IN * self.cells

    @property
    def local_length(self) -> int:
        return self.cells + self.agent_count + 1

    @property
    def agent_input_length(self) -> int:
        return self.state_length + self.local_length

    @property
    def agent_hidden(self) -> int:
        return self.hidden_mult * self.agent_input_length


class CheckpointHeader(VersionedDocument):
    topology: NetTopology
    step: int = 0
    seed: Optional[int] = None
