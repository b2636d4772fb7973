from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHANNEL_NAMES = ("obst_dist", "task_dist", "urge_dist", "work_dist", "car_dist")


@dataclass(frozen=True)
class GlobalChannels:
    """Five height x width grids describing the whole area at one moment."""

    obst_dist: np.ndarray
    task_dist: np.ndarray
    urge_dist: np.ndarray
    work_dist: np.ndarray
    car_dist: np.ndarray

    def stack(self) -> np.ndarray:
        """Channels as a (5, H, W) array in the fixed channel order."""
        return np.stack([getattr(self, name) for name in CHANNEL_NAMES])


@dataclass(frozen=True)
class LocalFeatures:
    loc_onehot: np.ndarray
    agent_id_onehot: np.ndarray
    urge: float

    def vector(self) -> np.ndarray:
        """Flat feature vector: location one-hot, id one-hot, urgency."""
        return np.concatenate(
            [self.loc_onehot.ravel(), self.agent_id_onehot, np.array([self.urge])]
        )


@dataclass(frozen=True)
class ObservationBundle:
    channels: GlobalChannels
    locals: tuple[LocalFeatures, ...]
    masks: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.locals)

    def local_matrix(self) -> np.ndarray:
        """(agents, H*W + agents + 1) matrix of local feature vectors."""
        return np.stack([local.vector() for local in self.locals])

    def mask_matrix(self, cells: int) -> np.ndarray:
        """(agents, cells) boolean matrix of legal destinations."""
        matrix = np.zeros((len(self.masks), cells), dtype=bool)
        for i, mask in enumerate(self.masks):
            matrix[i, list(mask)] = True
        return matrix
