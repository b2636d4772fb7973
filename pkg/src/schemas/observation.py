from typing import List

import numpy as np
from pydantic import BaseModel

from src.models.observation import GlobalChannels, LocalFeatures, ObservationBundle
from src.schemas.scenario import VersionedDocument


class LocalFeaturesRecord(BaseModel):
    loc_onehot: List[List[float]]
    agent_id_onehot: List[float]
    urge: float


class ObservationBundleDocument(VersionedDocument):
    """Bundle as structured text; grids are stored row-major."""

    obst_dist: List[List[float]]
    task_dist: List[List[float]]
    urge_dist: List[List[float]]
    work_dist: List[List[float]]
    car_dist: List[List[float]]
    locals: List[LocalFeaturesRecord]
    masks: List[List[int]]

    @classmethod
    def from_bundle(cls, bundle: ObservationBundle) -> "ObservationBundleDocument":
        channels = bundle.channels
        return cls(
            obst_dist=channels.obst_dist.tolist(),
            task_dist=channels.task_dist.tolist(),
            urge_dist=channels.urge_dist.tolist(),
            work_dist=channels.work_dist.tolist(),
            car_dist=channels.car_dist.tolist(),
            locals=[
                LocalFeaturesRecord(
                    loc_onehot=local.loc_onehot.tolist(),
                    agent_id_onehot=local.agent_id_onehot.tolist(),
                    urge=local.urge,
                )
                for local in bundle.locals
            ],
            masks=[list(mask) for mask in bundle.masks],
        )

    def to_bundle(self) -> ObservationBundle:
        return ObservationBundle(
            channels=GlobalChannels(
                obst_dist=np.array(self.obst_dist, dtype=float),
                task_dist=np.array(self.task_dist, dtype=float),
                urge_dist=np.array(self.urge_dist, dtype=float),
                work_dist=np.array(self.work_dist, dtype=float),
                car_dist=np.array(self.car_dist, dtype=float),
            ),
            locals=tuple(
                LocalFeatures(
                    loc_onehot=np.array(record.loc_onehot, dtype=float),
                    agent_id_onehot=np.array(record.agent_id_onehot, dtype=float),
                    urge=record.urge,
                )
                for record in self.locals
            ),
            masks=tuple(tuple(mask) for mask in self.masks),
        )
