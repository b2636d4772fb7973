from pathlib import Path

from src.exceptions import PreconditionError
from src.schemas.checkpoint import CheckpointHeader
from src.services import neuralcore as nc
from src.services.manf_nets import PolicyCheckpoint

EVAL_PREFIX = "eval/"
TARGET_PREFIX = "target/"


def encode_checkpoint(checkpoint: PolicyCheckpoint) -> bytes:
    """Eval and target parameters in one parameter file, the header carrying the topology."""
    combined = nc.ParameterSet(dtype=checkpoint.eval_params.dtype)
    for prefix, params in ((EVAL_PREFIX, checkpoint.eval_params), (TARGET_PREFIX, checkpoint.target_params)):
        for name in params.names():
            combined.add(prefix + name, params[name])
            combined.accumulator(prefix + name)[...] = params.accumulator(name)
    header = CheckpointHeader(topology=checkpoint.topology, step=checkpoint.step, seed=checkpoint.seed)
    return nc.encode_parameters(combined, {"checkpoint": header.model_dump()})


def decode_checkpoint(blob: bytes) -> PolicyCheckpoint:
    combined, header = nc.decode_parameters(blob)
    if "checkpoint" not in header:
        raise PreconditionError("Parameter file has no checkpoint header")
    meta = CheckpointHeader.model_validate(header["checkpoint"])
    split = {EVAL_PREFIX: nc.ParameterSet(dtype=combined.dtype), TARGET_PREFIX: nc.ParameterSet(dtype=combined.dtype)}
    for name in combined.names():
        prefix = EVAL_PREFIX if name.startswith(EVAL_PREFIX) else TARGET_PREFIX
        short = name[len(prefix) :]
        split[prefix].add(short, combined[name])
        split[prefix].accumulator(short)[...] = combined.accumulator(name)
    return PolicyCheckpoint(meta.topology, split[EVAL_PREFIX], split[TARGET_PREFIX], step=meta.step, seed=meta.seed)


class CheckpointRepository:
    def __init__(self, root: Path | str):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / f"{name}.ckpt"

    def save(self, checkpoint: PolicyCheckpoint, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(name)
        path.write_bytes(encode_checkpoint(checkpoint))
        return path

    def load(self, name: str) -> PolicyCheckpoint:
        return load_checkpoint(self.path(name))

    def names(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.ckpt"))


def load_checkpoint(path: Path | str) -> PolicyCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())
