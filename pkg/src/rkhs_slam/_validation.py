"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .se3 import Pose


def check_positive(name, value, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_int(name, value, minimum=0):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_points(points, name="points", min_points=1):
    points = check_array(
        points,
        dtype=np.float64,
        ensure_min_samples=min_points,
        input_name=name,
    )
    if points.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {points.shape}")
    return points


def check_labels(labels, n_points, dim):
    labels = check_array(labels, dtype=np.float64, input_name="labels")
    if labels.shape != (n_points, dim):
        raise ValueError(f"labels must have shape ({n_points}, {dim}), got {labels.shape}")
    if labels.min() < 0.0 or labels.max() > 1.0:
        raise ValueError("label channels must lie in [0, 1]")
    return labels


def check_pose(pose, name="pose"):
    if pose is None:
        return Pose.identity()
    if isinstance(pose, Pose):
        return pose
    arr = np.asarray(pose, dtype=float)
    if arr.shape == (4, 4):
        return Pose.from_matrix(arr)
    raise TypeError(f"{name} must be a Pose or a 4x4 matrix, got {type(pose).__name__}")


def check_information(info):
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise ValueError(f"information matrix must be 6x6, got {info.shape}")
    if not np.allclose(info, info.T, atol=1e-12):
        raise ValueError("information matrix must be symmetric")
    if np.linalg.eigvalsh(info).min() <= 0:
        raise ValueError("information matrix must be positive definite")
    return info
