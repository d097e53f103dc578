"""Calibrated CT volumes: container, trilinear sampling, HU calibration and raw I/O.

Voxel arrays are stored with shape ``(nz, ny, nx)`` in C order, so the raw
payload has x varying fastest.  The world position of voxel ``(i, j, k)``
(x, y, z indices) is ``origin + (i, j, k) * spacing``; the value lives at the
voxel center.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CalibratedVolume",
    "VolumeFormatError",
    "sample_trilinear",
    "calibrate",
    "read_volume",
    "write_volume",
]

_HEADER_KEYS = ("dims", "spacing", "origin", "data")


class VolumeFormatError(ValueError):
    """Raised for malformed volume headers or payloads."""


@dataclass(frozen=True)
class CalibratedVolume:
    """Immutable 3D grid of BMD values (mg/cc).

    Parameters
    ----------
    data : array of shape (nz, ny, nx)
    spacing : (sx, sy, sz) in mm
    origin : (ox, oy, oz) in mm, world position of voxel (0, 0, 0)
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _lo: np.ndarray = field(init=False, repr=False, compare=False)
    _hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("all dims must be >= 1")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxel values")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must have three components")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        lo = np.asarray(origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(spacing)
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space bounding box of the voxel centers."""
        return self._lo.copy(), self._hi.copy()

    def world_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self._lo) / np.asarray(self.spacing)

    def index_to_world(self, index) -> np.ndarray:
        return self._lo + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def axis(self, k: int) -> np.ndarray:
        """World coordinates of voxel centers along axis ``k`` (0=x, 1=y, 2=z)."""
        return self.origin[k] + np.arange(self.dims[k]) * self.spacing[k]


def sample_trilinear(vol: CalibratedVolume, points) -> np.ndarray | float:
    """Trilinear interpolation at world points.

    Points outside the bounding box of voxel centers yield ``nan`` (no
    clamping).  A single point of shape (3,) returns a scalar (``nan`` when
    absent); arrays of shape (..., 3) return arrays of shape (...).
    """
    p = np.asarray(points, dtype=float)
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    lead = p.shape[:-1]
    p = p.reshape(-1, 3)

    idx = vol.world_to_index(p)
    dims = np.asarray(vol.dims)
    # tolerance absorbs rounding in (p - origin) / spacing for points on the faces
    eps = 1e-9
    inside = np.all((idx >= -eps) & (idx <= dims - 1 + eps), axis=1)
    idx = np.clip(idx, 0, dims - 1)

    out = np.full(len(p), np.nan)
    if np.any(inside):
        q = idx[inside]
        i0 = np.minimum(np.floor(q).astype(np.intp), np.maximum(dims - 2, 0))
        f = q - i0
        # single-voxel axes: i0 = 0, f = 0, both corners collapse onto voxel 0
        i1 = np.minimum(i0 + 1, dims - 1)
        d = vol.data
        x0, y0, z0 = i0.T
        x1, y1, z1 = i1.T
        fx, fy, fz = f.T
        c00 = d[z0, y0, x0] * (1 - fx) + d[z0, y0, x1] * fx
        c10 = d[z0, y1, x0] * (1 - fx) + d[z0, y1, x1] * fx
        c01 = d[z1, y0, x0] * (1 - fx) + d[z1, y0, x1] * fx
        c11 = d[z1, y1, x0] * (1 - fx) + d[z1, y1, x1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[inside] = c0 * (1 - fz) + c1 * fz

    if scalar:
        return float(out[0])
    return out.reshape(lead)


def calibrate(raw: CalibratedVolume, slope: float, intercept: float) -> CalibratedVolume:
    """Linear HU -> BMD conversion, ``slope * v + intercept`` per voxel."""
    if slope == 0:
        raise ValueError("calibration slope must be non-zero")
    data = slope * np.asarray(raw.data, dtype=np.float64) + intercept
    return CalibratedVolume(data, raw.spacing, raw.origin)


def _parse_header(path: Path) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _HEADER_KEYS:
            raise VolumeFormatError(f"{path}:{lineno}: unknown header key {key!r}")
        if key in fields:
            raise VolumeFormatError(f"{path}:{lineno}: duplicate header key {key!r}")
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"{path}: missing header keys {missing}")
    return fields


def _triple(path, key, text, cast):
    parts = text.split()
    if len(parts) != 3:
        raise VolumeFormatError(f"{path}: {key!r} needs three values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: bad {key!r} value {text!r}") from exc


def read_volume(path) -> CalibratedVolume:
    """Read a ``key = value`` header plus its little-endian float32 payload."""
    path = Path(path)
    fields = _parse_header(path)
    dims = _triple(path, "dims", fields["dims"], int)
    spacing = _triple(path, "spacing", fields["spacing"], float)
    origin = _triple(path, "origin", fields["origin"], float)
    if min(dims) < 1:
        raise VolumeFormatError(f"{path}: dims must be positive, got {dims}")
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: spacing must be positive, got {spacing}")
    raw_path = path.parent / fields["data"]
    payload = np.fromfile(raw_path, dtype="<f4")
    n = dims[0] * dims[1] * dims[2]
    if payload.size != n or raw_path.stat().st_size != 4 * n:
        raise VolumeFormatError(
            f"{raw_path}: size mismatch, header declares {n} voxels "
            f"({4 * n} bytes), payload has {raw_path.stat().st_size} bytes"
        )
    data = payload.astype(np.float32).reshape(dims[2], dims[1], dims[0])
    try:
        return CalibratedVolume(data, spacing, origin)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def write_volume(vol: CalibratedVolume, path) -> None:
    """Write header ``path`` and a sibling ``<stem>.raw`` payload."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    np.ascontiguousarray(vol.data, dtype="<f4").tofile(path.parent / raw_name)
    lines = [
        "dims = {} {} {}".format(*vol.dims),
        "spacing = {!r} {!r} {!r}".format(*vol.spacing),
        "origin = {!r} {!r} {!r}".format(*vol.origin),
        f"data = {raw_name}",
    ]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
