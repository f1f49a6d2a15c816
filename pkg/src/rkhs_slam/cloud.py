from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_labels, check_points
from .se3 import Pose

# R, G, B, |grad_x|, |grad_y|
LABEL_DIM = 5


@dataclass(frozen=True, eq=False)
class ColoredPointCloud:
    """3D points with an appearance label vector per point.

    Labels are ``LABEL_DIM`` channels in [0, 1]. Arrays are copied and made
    read-only on construction.
    """

    points: np.ndarray
    labels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        points = check_points(self.points).copy()
        labels = check_labels(self.labels, len(points), LABEL_DIM).copy()
        points.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> ColoredPointCloud:
        return ColoredPointCloud(pose.apply(self.points), self.labels, self.timestamp)
