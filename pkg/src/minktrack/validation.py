"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import math

import numpy as np

from .nn import ConfigurationError
from .sim import SceneDataset


def check_dataset(X, require_frames: bool = False) -> SceneDataset:
    if not isinstance(X, SceneDataset):
        raise TypeError(f"expected a SceneDataset, got {type(X).__name__}")
    if require_frames and X.n_frames == 0:
        raise ConfigurationError("dataset has no frames")
    for scene in X.scenes:
        for fr in scene.frames:
            check_points(fr.points)
    return X


def check_points(points) -> np.ndarray:
    """An (N, 4) finite float cloud."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ConfigurationError(f"point cloud must be (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError("point cloud has non-finite values")
    return arr


def check_unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(name: str, value, strict: bool = True):
    if not math.isfinite(float(value)) or (value <= 0 if strict else value < 0):
        raise ConfigurationError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return value
