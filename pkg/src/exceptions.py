class ReliefSwarmError(Exception):
    """Base class for every error raised by the workbench."""


class PreconditionError(ReliefSwarmError, ValueError):
    """An operation was called with arguments outside its contract."""


class MaskedActionError(PreconditionError):
    """An agent was asked to move to a cell outside its action mask."""

    def __init__(self, agent_id: int, cell: int, message: str | None = None):
        self.agent_id = agent_id
        self.cell = cell
        super().__init__(
            message or f"Agent {agent_id} chose cell {cell}, which is outside its action mask"
        )


class UndefinedRateError(ReliefSwarmError, ValueError):
    """A completion rate was requested for a world with no initial tasks."""


class InvalidParameterError(ReliefSwarmError, ValueError):
    """A numeric parameter is outside its admissible range."""


class DimensionError(ReliefSwarmError, ValueError):
    """Array shapes do not agree."""


class NumericError(ReliefSwarmError, ArithmeticError):
    """A computation produced non-finite values."""


class InstanceTooLargeError(ReliefSwarmError):
    """An exhaustive search would exceed its branching or depth guard."""


class GenerationError(ReliefSwarmError, ValueError):
    """A scenario recipe cannot be realised."""


class ConfigurationError(ReliefSwarmError, ValueError):
    """A checkpoint, recipe or config does not fit the run it is used in."""


class SchemaVersionError(ReliefSwarmError, ValueError):
    """A document was written with an unsupported schema version."""
