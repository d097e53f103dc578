"""Small input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .mesh import LabeledSurfaceMesh
from .volume import CalibratedVolume


def check_points(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """Finite float array of shape (n, 3) with at least ``min_rows`` rows."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if len(arr) < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_volume(X, name: str = "volume") -> CalibratedVolume:
    if not isinstance(X, CalibratedVolume):
        raise TypeError(f"{name} must be a CalibratedVolume, got {type(X).__name__}")
    return X


def check_mesh(mesh, name: str = "mesh") -> LabeledSurfaceMesh:
    if not isinstance(mesh, LabeledSurfaceMesh):
        raise TypeError(f"{name} must be a LabeledSurfaceMesh, got {type(mesh).__name__}")
    return mesh


def check_positive(value, name: str) -> float:
    v = float(value)
    if not v > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return v
