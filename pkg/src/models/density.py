from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from src.exceptions import DimensionError, GenerationError


@dataclass(frozen=True)
class DensityGrid:
    """Where people are likely to be: a nonnegative height x width grid summing to one."""

    values: np.ndarray

    @classmethod
    def normalized(cls, values: np.ndarray) -> "DensityGrid":
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise DimensionError(f"Density must be a 2-d grid, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise GenerationError("Density contains non-finite entries")
        if (values < 0).any():
            raise GenerationError("Density entries must be nonnegative")
        total = values.sum()
        if total <= 0:
            raise GenerationError("Density has zero total mass")
        return cls(values / total)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def masked(self, obst: np.ndarray) -> "DensityGrid":
        """Zero the obstacle cells and renormalize."""
        keep = ~np.asarray(obst, dtype=bool).reshape(self.shape)
        return DensityGrid.normalized(np.where(keep, self.values, 0.0))

    def probabilities(self) -> np.ndarray:
        return self.values.ravel()
