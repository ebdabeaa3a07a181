"""Per-class hyperparameters: gating distance, focal alpha, simulator size priors."""
from __future__ import annotations

from dataclasses import dataclass

# gating distances (m) and focal alphas for the full driving taxonomy
GATING_DISTANCE = {
    "car": 4.0, "truck": 4.0, "bus": 5.5, "trailer": 3.0,
    "pedestrian": 1.0, "motorcycle": 13.0, "bicycle": 3.0,
}
FOCAL_ALPHA = {
    "car": 4.0, "pedestrian": 4.0, "truck": 2.0, "bus": 2.0, "trailer": 2.0,
    "motorcycle": 2.0, "bicycle": 2.0,
}


@dataclass(frozen=True)
class ObjectClass:
    name: str
    size: tuple[float, float, float]  # mean w, l, h (m)
    size_jitter: tuple[float, float, float]
    speed: tuple[float, float]  # m/s range
    turn_rate: tuple[float, float]  # |omega| rad/s range for turning objects

    @property
    def gating(self) -> float:
        return GATING_DISTANCE[self.name]

    @property
    def focal_alpha(self) -> float:
        return FOCAL_ALPHA[self.name]


DEFAULT_CLASSES = (
    ObjectClass("car", (1.9, 4.5, 1.6), (0.1, 0.3, 0.1), (2.0, 5.0), (0.3, 0.7)),
    ObjectClass("pedestrian", (0.6, 0.6, 1.75), (0.05, 0.05, 0.1), (0.5, 1.4), (0.3, 0.8)),
)


class GatingTable:
    """Per-class-id gating distance G in meters."""

    def __init__(self, distances):
        self.distances = tuple(float(g) for g in distances)
        if any(not g > 0 for g in self.distances):
            raise ValueError("gating distances must be positive")

    @classmethod
    def for_classes(cls, classes=DEFAULT_CLASSES) -> "GatingTable":
        return cls([c.gating for c in classes])

    def __getitem__(self, cls_id: int) -> float:
        return self.distances[int(cls_id)]

    def __len__(self) -> int:
        return len(self.distances)
