"""Per-vertex profile sampling and MAP displacement along the profile line.

Profiles run along the inward normal ``d = -n``, so negative offsets lie in
soft tissue and positive offsets in trabecular bone.  Moving a vertex by
``s`` along ``d`` re-centers the model, so sample ``j`` is scored at model
coordinate ``t_j - s``.  The posterior over ``s`` adds a zero-mean Gaussian
prior and is searched exhaustively on a fixed grid.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .bone_model import RegionLabel
from .measurement_model import MeasurementModelTable
from .mesh import LabeledSurfaceMesh, vertex_normals
from .volume import CalibratedVolume, sample_trilinear

__all__ = [
    "ProfileGrid",
    "ShiftGrid",
    "Profile",
    "ProfileSet",
    "DisplacementField",
    "sample_profiles",
    "profile_log_likelihood",
    "optimal_displacement",
    "posterior_scores",
    "displacements_from_scores",
    "compute_displacements",
]

DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class ProfileGrid:
    """``2K + 1`` offsets uniformly covering ``[-t0, t0]``."""

    t0: float = 2.0
    K: int = 20

    def __post_init__(self):
        if not self.t0 > 0 or self.K < 1:
            raise ValueError(f"profile grid needs t0 > 0 and K >= 1, got t0={self.t0}, K={self.K}")

    @property
    def step(self) -> float:
        return self.t0 / self.K

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.K, self.K + 1) * self.step


@dataclass(frozen=True)
class ShiftGrid:
    """Candidate displacements ``k * step`` for ``|k * step| <= s_max``."""

    s_max: float = 2.0
    step: float = 0.05

    def __post_init__(self):
        if not (self.s_max > 0 and self.step > 0):
            raise ValueError("shift grid needs s_max > 0 and step > 0")

    @property
    def nodes(self) -> np.ndarray:
        m = int(math.floor(self.s_max / self.step + 1e-9))
        return np.arange(-m, m + 1) * self.step


@dataclass(frozen=True)
class Profile:
    densities: np.ndarray
    offsets: np.ndarray
    theta: float
    region: RegionLabel
    valid: bool


@dataclass(frozen=True)
class ProfileSet:
    """Profiles for every vertex; ``densities`` is (N, 2K+1) with nan for absent samples."""

    densities: np.ndarray
    offsets: np.ndarray
    theta: np.ndarray
    directions: np.ndarray
    labels: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.densities)

    def __getitem__(self, i) -> Profile:
        return Profile(
            self.densities[i], self.offsets, float(self.theta[i]), RegionLabel(int(self.labels[i])), bool(self.valid[i])
        )


@dataclass(frozen=True)
class DisplacementField:
    """MAP shift (mm, along ``directions``) and posterior density weight per vertex."""

    shift: np.ndarray
    gamma: np.ndarray
    valid: np.ndarray
    directions: np.ndarray

    def weighted_rms(self) -> float:
        total = self.gamma.sum()
        if total <= 0:
            return 0.0
        return float(np.sqrt(np.sum(self.gamma * self.shift**2) / total))


def sample_profiles(
    mesh: LabeledSurfaceMesh,
    volume: CalibratedVolume,
    grid: ProfileGrid = ProfileGrid(),
    normals=None,
) -> ProfileSet:
    if normals is None:
        normals = vertex_normals(mesh)
    d = -np.asarray(normals, dtype=float)
    t = grid.offsets
    pts = mesh.vertices[:, None, :] + t[None, :, None] * d[:, None, :]
    rho = sample_trilinear(volume, pts)
    theta = np.degrees(np.arccos(np.clip(np.abs(d[:, 2]), 0.0, 1.0)))
    fitted = mesh.labels != RegionLabel.CutPedicles.value
    valid = np.all(np.isfinite(rho), axis=1) & fitted
    return ProfileSet(rho, t, theta, d, mesh.labels.copy(), valid)


def _log_prior(shifts, sigma_s):
    return -0.5 * (shifts / sigma_s) ** 2 - math.log(math.sqrt(2 * math.pi) * sigma_s)


def _likelihood_block(table, region, densities, theta, offsets, shifts):
    """Sum over samples of log f_Z at t_j - s, shape (n, S)."""
    cols = table.columns(region, theta[:, None], densities)  # (n, J, nt)
    t_model = offsets[:, None] - shifts[None, :]  # (J, S)
    it, ft = table.t_axis.locate(t_model)
    j = np.arange(len(offsets))[:, None]
    f = cols[:, j, it] * (1.0 - ft) + cols[:, j, it + 1] * ft  # (n, J, S)
    return np.log(np.maximum(f, DENSITY_FLOOR)).sum(axis=1)


def profile_log_likelihood(profile: Profile, table: MeasurementModelTable, region, s) -> np.ndarray | float:
    """``sum_j log f_Z(rho_j, t_j - s)`` for scalar or array ``s``."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    out = _likelihood_block(
        table,
        region,
        np.asarray(profile.densities, float)[None, :],
        np.array([profile.theta]),
        np.asarray(profile.offsets, float),
        s_arr,
    )[0]
    return float(out[0]) if np.ndim(s) == 0 else out


def posterior_scores(
    profiles: ProfileSet,
    table: MeasurementModelTable,
    shifts,
    sigma_s: float = 2.0,
    n_jobs: int = 1,
    chunk: int = 128,
) -> np.ndarray:
    """Log posterior (up to the evidence) for every vertex and shift, (N, S).

    Rows of invalid profiles are ``-inf``.
    """
    shifts = np.asarray(shifts, dtype=float)
    n = len(profiles)
    scores = np.full((n, len(shifts)), -np.inf)
    prior = _log_prior(shifts, sigma_s)
    tasks = []
    for region in table.regions:
        idx = np.nonzero(profiles.valid & (profiles.labels == region.value))[0]
        tasks += [(region, idx[k : k + chunk]) for k in range(0, len(idx), chunk)]
    missing = profiles.valid & ~np.isin(profiles.labels, [r.value for r in table.regions])
    if np.any(missing):
        bad = RegionLabel(int(profiles.labels[missing][0]))
        raise KeyError(f"table has no model for region {bad.name}")

    def work(task):
        region, rows = task
        return _likelihood_block(
            table, region, profiles.densities[rows], profiles.theta[rows], profiles.offsets, shifts
        )

    if n_jobs == 1 or len(tasks) < 2:
        results = map(work, tasks)
        for (_, rows), ll in zip(tasks, results):
            scores[rows] = ll + prior
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            for (_, rows), ll in zip(tasks, pool.map(work, tasks)):
                scores[rows] = ll + prior
    return scores


def displacements_from_scores(scores, shifts) -> tuple[np.ndarray, np.ndarray]:
    """MAP shift and posterior density at the MAP for each row of ``scores``.

    Ties resolve to the smallest ``|s|``, then to the negative shift.  Rows
    without any finite score give ``(0, 0)``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    shifts = np.asarray(shifts, dtype=float)
    step = float(shifts[1] - shifts[0]) if len(shifts) > 1 else 1.0
    order = np.lexsort((shifts > 0, np.abs(shifts)))
    ok = np.isfinite(scores).any(axis=1)
    s_hat = np.zeros(len(scores))
    gamma = np.zeros(len(scores))
    if np.any(ok):
        sc = scores[ok]
        best = order[np.argmax(sc[:, order], axis=1)]
        peak = sc[np.arange(len(sc)), best]
        s_hat[ok] = shifts[best]
        gamma[ok] = np.exp(peak - logsumexp(sc, axis=1)) / step
    return s_hat, gamma


def optimal_displacement(
    profile: Profile, table: MeasurementModelTable, region, sigma_s: float = 2.0, shifts=None
) -> tuple[float, float]:
    if shifts is None:
        shifts = ShiftGrid().nodes
    if not profile.valid:
        return 0.0, 0.0
    scores = profile_log_likelihood(profile, table, region, shifts) + _log_prior(np.asarray(shifts), sigma_s)
    s_hat, gamma = displacements_from_scores(scores[None, :], shifts)
    return float(s_hat[0]), float(gamma[0])


def compute_displacements(
    mesh: LabeledSurfaceMesh,
    volume: CalibratedVolume,
    table: MeasurementModelTable,
    grid: ProfileGrid = ProfileGrid(),
    shift_grid: ShiftGrid = ShiftGrid(),
    sigma_s: float = 2.0,
    n_jobs: int = 1,
    normals=None,
) -> DisplacementField:
    profiles = sample_profiles(mesh, volume, grid, normals)
    shifts = shift_grid.nodes
    n_jobs = n_jobs if n_jobs and n_jobs > 0 else (os.cpu_count() or 1)
    scores = posterior_scores(profiles, table, shifts, sigma_s, n_jobs)
    s_hat, gamma = displacements_from_scores(scores, shifts)
    return DisplacementField(s_hat, gamma, profiles.valid.copy(), profiles.directions)
