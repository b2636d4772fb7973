import json
import logging
from pathlib import Path
from typing import Type, TypeVar

from pydantic import BaseModel

from src.repositories.checkpoint import CheckpointRepository
from src.schemas.training import TrainConfig, TrainLogRecord
from src.services.manf_nets import PolicyCheckpoint

logger = logging.getLogger(__name__)

Document = TypeVar("Document", bound=BaseModel)

CONFIG_FILE = "config.json"
LOG_FILE = "train_log.jsonl"
CHECKPOINT_DIR = "checkpoints"


def write_document(document: BaseModel, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2) + "\n")
    return path


def read_document(model: Type[Document], path: Path | str) -> Document:
    return model.model_validate_json(Path(path).read_text())


class RunRepository:
    """A training run directory: config snapshot, step log and checkpoints."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.checkpoints = CheckpointRepository(self.root / CHECKPOINT_DIR)

    @property
    def config_path(self) -> Path:
        return self.root / CONFIG_FILE

    @property
    def log_path(self) -> Path:
        return self.root / LOG_FILE

    def start(self, config: TrainConfig) -> None:
        """Create the directory, snapshot ``config`` and truncate any previous log."""
        self.root.mkdir(parents=True, exist_ok=True)
        write_document(config, self.config_path)
        self.log_path.write_text("")
        logger.info(f"Run directory {self.root} ready")

    def append_log(self, record: TrainLogRecord) -> None:
        with self.log_path.open("a") as handle:
            handle.write(record.model_dump_json() + "\n")

    def save_checkpoint(self, checkpoint: PolicyCheckpoint, name: str) -> Path:
        path = self.checkpoints.save(checkpoint, name)
        logger.info(f"Saved checkpoint {path} at step {checkpoint.step}")
        return path

    def load_config(self) -> TrainConfig:
        return read_document(TrainConfig, self.config_path)

    def load_log(self) -> list[TrainLogRecord]:
        lines = self.log_path.read_text().splitlines()
        return [TrainLogRecord.model_validate(json.loads(line)) for line in lines if line.strip()]

    def final_checkpoint(self) -> PolicyCheckpoint:
        return self.checkpoints.load("final")
