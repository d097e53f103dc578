"""Synthetic ESP-style phantoms with analytically known cortex-center surfaces.

A phantom body is a closed cylinder along z, centered at the origin: a
cortical shell (lateral wall plus two endplate slabs) around a trabecular
core, in a homogeneous background.  Its density is

    bg + (cort - bg) [r <= R][|z| <= H/2] + (trab - cort) [r <= R - wall][|z| <= H/2 - e]

Each bracket product separates into an in-plane and an axial factor, so box
averages over voxels (and hence supersampled rasterization) factor exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bone_model import default_priors, RegionLabel
from .measurement_model import ScannerConfig, in_plane_psf, out_of_plane_psf
from .volume import CalibratedVolume

__all__ = [
    "PhantomSpec",
    "PRESETS",
    "preset",
    "rasterize",
    "simulate_scan",
    "HighResolutionPhantom",
    "write_ground_truth",
    "read_ground_truth",
]

_DEFAULT = default_priors()[RegionLabel.VerticalCortex]


@dataclass(frozen=True)
class PhantomSpec:
    diameter: float = 36.0
    height: float = 25.0
    wall: float = 1.0
    endplate: float = 1.0
    cortical: float = _DEFAULT.cortical.mean
    trabecular: float = _DEFAULT.trabecular.mean
    background: float = _DEFAULT.soft_tissue.mean
    supersampling: int = 4
    noise_sd: float = 0.0

    def __post_init__(self):
        if not (self.wall > 0 and self.endplate > 0):
            raise ValueError("wall and endplate thickness must be positive")
        if not self.wall < self.radius:
            raise ValueError("wall must be thinner than the radius")
        if not 2 * self.endplate < self.height:
            raise ValueError("endplates must leave a trabecular core")
        if self.supersampling < 2:
            raise ValueError("supersampling must be at least 2")

    @property
    def radius(self) -> float:
        return self.diameter / 2

    @property
    def center_radius(self) -> float:
        """Radius of the lateral cortex-center cylinder."""
        return self.radius - self.wall / 2

    @property
    def plane_offset(self) -> float:
        """``|z|`` of the two endplate cortex-center planes."""
        return self.height / 2 - self.endplate / 2

    @property
    def center_height(self) -> float:
        return 2 * self.plane_offset

    def density(self, points) -> np.ndarray:
        """Point-wise (not box-averaged) density at world points (..., 3)."""
        p = np.asarray(points, dtype=float)
        r2 = p[..., 0] ** 2 + p[..., 1] ** 2
        z = np.abs(p[..., 2])
        outer = (r2 <= self.radius**2) & (z <= self.height / 2)
        inner = (r2 <= (self.radius - self.wall) ** 2) & (z <= self.height / 2 - self.endplate)
        return (
            self.background
            + (self.cortical - self.background) * outer
            + (self.trabecular - self.cortical) * inner
        )


PRESETS = {
    "low": PhantomSpec(wall=0.5, endplate=1.0),
    "medium": PhantomSpec(wall=1.0, endplate=1.0),
    "high": PhantomSpec(wall=1.5, endplate=2.0),
}


def preset(name: str, **overrides) -> PhantomSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown phantom preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides)


def _sub_offsets(spacing, ss):
    return ((np.arange(ss) + 0.5) / ss - 0.5) * spacing


def _inplane_fractions(spec, x, y, spacing, ss):
    """Box-averaged indicators of the outer disc and the trabecular disc."""
    off = _sub_offsets(spacing, ss)
    outer = np.zeros(np.broadcast(x, y).shape)
    inner = np.zeros_like(outer)
    r_in = (spec.radius - spec.wall) ** 2
    for dx in off:
        for dy in off:
            r2 = (x + dx) ** 2 + (y + dy) ** 2
            outer += r2 <= spec.radius**2
            inner += r2 <= r_in
    return outer / ss**2, inner / ss**2


def _axial_fractions(spec, z, spacing, ss):
    off = _sub_offsets(spacing, ss)
    outer = np.zeros(np.shape(z))
    inner = np.zeros_like(outer)
    for dz in off:
        a = np.abs(z + dz)
        outer += a <= spec.height / 2
        inner += a <= spec.height / 2 - spec.endplate
    return outer / ss, inner / ss


def _combine(spec, a_out, a_in, b_out, b_in):
    return (
        spec.background
        + (spec.cortical - spec.background) * a_out * b_out
        + (spec.trabecular - spec.cortical) * a_in * b_in
    )


def rasterize(spec: PhantomSpec, spacing: float, margin: float = 4.0) -> CalibratedVolume:
    """Isotropic supersampled rasterization; world origin is a voxel center.

    The grid covers the body plus ``margin`` mm on every side.
    """
    if spacing > spec.wall / 4 + 1e-12:
        raise ValueError(f"fine spacing {spacing} mm is too coarse for a {spec.wall} mm wall (need <= wall/4)")
    kx = int(math.ceil((spec.radius + margin) / spacing))
    kz = int(math.ceil((spec.height / 2 + margin) / spacing))
    xs = np.arange(-kx, kx + 1) * spacing
    zs = np.arange(-kz, kz + 1) * spacing
    ss = spec.supersampling
    a_out, a_in = _inplane_fractions(spec, xs[None, :], xs[:, None], spacing, ss)
    b_out, b_in = _axial_fractions(spec, zs, spacing, ss)
    data = np.empty((len(zs), len(xs), len(xs)), dtype=np.float32)
    for k in range(len(zs)):
        data[k] = _combine(spec, a_out, a_in, b_out[k], b_in[k])
    return CalibratedVolume(data, (spacing,) * 3, (xs[0], xs[0], zs[0]))


def _kernel(fn, spacing, half_width):
    n = int(math.ceil(half_width / spacing))
    k = fn(np.arange(-n, n + 1) * spacing)
    return k / k.sum()


def _coarse_axis(lo, hi, step, origin=None, count=None):
    if origin is None:
        origin = math.ceil(lo / step - 1e-9) * step
    if count is None:
        count = int(math.floor((hi - origin) / step + 1e-9)) + 1
    return origin + np.arange(count) * step


def _resample_axis(arr, axis, fine_origin, fine_step, positions):
    """Linear interpolation of ``arr`` along ``axis`` at world ``positions``."""
    f = (positions - fine_origin) / fine_step
    n = arr.shape[axis]
    if f.min() < -1e-6 or f.max() > n - 1 + 1e-6:
        raise ValueError("coarse grid extends beyond the fine volume")
    f = np.clip(f, 0, n - 1)
    i0 = np.minimum(np.floor(f + 1e-9).astype(int), n - 2)
    w = np.clip(f - i0, 0.0, 1.0)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return a0 * (1 - w) + a1 * w


def simulate_scan(
    fine: CalibratedVolume,
    scanner: ScannerConfig,
    out_spacing,
    noise_sd: float = 0.0,
    seed: int = 0,
    out_origin=None,
    out_dims=None,
) -> CalibratedVolume:
    """Blur with the scanner PSFs on the fine grid, point-sample, add noise.

    In-plane: unit-sum Gaussian (``scanner.sigma``) along x and y.  Axial:
    unit-sum slice sensitivity profile (``scanner.slice_width``) along z.
    By default the coarse grid is the lattice of multiples of ``out_spacing``
    that stays a full kernel radius inside the fine volume.  Noise is drawn
    in C order from ``numpy.random.default_rng(seed)``.
    """
    out_spacing = tuple(float(s) for s in out_spacing)
    if any(o < f - 1e-12 for o, f in zip(out_spacing, fine.spacing)):
        raise ValueError("output spacing must not be finer than the input spacing")
    sx, sy, sz = fine.spacing
    half = (4 * scanner.sigma, 4 * scanner.sigma, scanner.slice_width)
    kernels = [
        _kernel(lambda r: in_plane_psf(r, scanner.sigma), sx, half[0]),
        _kernel(lambda r: in_plane_psf(r, scanner.sigma), sy, half[1]),
        _kernel(lambda z: out_of_plane_psf(z, scanner.slice_width), sz, half[2]),
    ]
    lo, hi = fine.bounds
    axes = []
    for k in range(3):
        origin = None if out_origin is None else out_origin[k]
        count = None if out_dims is None else out_dims[k]
        axes.append(_coarse_axis(lo[k] + half[k], hi[k] - half[k], out_spacing[k], origin, count))

    # blur along z and resample z first, in y-slabs to bound memory; the
    # remaining x/y blur and resampling commute with the z resampling
    data = fine.data
    ny = data.shape[1]
    slab = max(1, int(2e7 // (data.shape[0] * data.shape[2])))
    zpass = np.empty((len(axes[2]), ny, data.shape[2]), dtype=np.float64)
    for y0 in range(0, ny, slab):
        block = ndimage.convolve1d(data[:, y0 : y0 + slab, :].astype(np.float64), kernels[2], axis=0, mode="nearest")
        zpass[:, y0 : y0 + slab, :] = _resample_axis(block, 0, lo[2], sz, axes[2])
    tmp = ndimage.convolve1d(zpass, kernels[1], axis=1, mode="nearest")
    tmp = _resample_axis(tmp, 1, lo[1], sy, axes[1])
    tmp = ndimage.convolve1d(tmp, kernels[0], axis=2, mode="nearest")
    out = _resample_axis(tmp, 2, lo[0], sx, axes[0])
    if noise_sd > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sd, size=out.shape)
    return CalibratedVolume(out.astype(np.float32), out_spacing, (axes[0][0], axes[1][0], axes[2][0]))


class HighResolutionPhantom:
    """Lazily evaluated fine rasterization for high-resolution reference sampling.

    Behaves like ``rasterize(spec, spacing)`` followed by trilinear sampling,
    but only the voxels around requested points are ever evaluated, so
    micrometer-scale spacings stay tractable.
    """

    def __init__(self, spec: PhantomSpec, spacing: float = 0.03, supersampling: int | None = None):
        self.spec = spec if supersampling is None else replace(spec, supersampling=supersampling)
        self.spacing = float(spacing)

    def sample(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        shape = p.shape[:-1]
        p = p.reshape(-1, 3)
        h = self.spacing
        ss = self.spec.supersampling
        f = p / h
        i0 = np.floor(f)
        w = f - i0
        out = np.zeros(len(p))
        xy = []
        for dx in (0, 1):
            for dy in (0, 1):
                a = _inplane_fractions(self.spec, (i0[:, 0] + dx) * h, (i0[:, 1] + dy) * h, h, ss)
                wxy = (w[:, 0] if dx else 1 - w[:, 0]) * (w[:, 1] if dy else 1 - w[:, 1])
                xy.append((wxy, a))
        for dz in (0, 1):
            b_out, b_in = _axial_fractions(self.spec, (i0[:, 2] + dz) * h, h, ss)
            wz = w[:, 2] if dz else 1 - w[:, 2]
            for wxy, (a_out, a_in) in xy:
                out += wz * wxy * _combine(self.spec, a_out, a_in, b_out, b_in)
        return out.reshape(shape)


def write_ground_truth(spec: PhantomSpec, path, **extra) -> None:
    """``key = value`` text with the analytic cortex-center geometry."""
    fields = dict(asdict(spec))
    fields.update(
        center_radius=spec.center_radius,
        plane_offset_upper=spec.plane_offset,
        plane_offset_lower=-spec.plane_offset,
        center_height=spec.center_height,
        axis_point="0.0 0.0 0.0",
        axis_direction="0.0 0.0 1.0",
    )
    fields.update(extra)
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ground_truth(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        parts = v.split()
        try:
            vals = [float(x) for x in parts]
            out[k] = vals[0] if len(vals) == 1 else vals
        except ValueError:
            out[k] = v
    return out
