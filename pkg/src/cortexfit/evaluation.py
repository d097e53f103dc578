"""Accuracy evaluation: surface sampling, primitive fits, distances, reference centers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .bone_model import RegionLabel
from .mesh import LabeledSurfaceMesh

__all__ = [
    "SurfaceSampleSet",
    "sample_surface",
    "CylinderFit",
    "fit_cylinder",
    "PlanePairFit",
    "fit_parallel_planes",
    "closest_point_on_triangles",
    "point_to_mesh_distance",
    "winding_number",
    "cortex_center_from_highres",
    "AccuracyReport",
    "accuracy_report",
    "shell_accuracy",
]


@dataclass(frozen=True)
class SurfaceSampleSet:
    points: np.ndarray
    triangles: np.ndarray
    barycentric: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.points)

    def region(self, region: RegionLabel) -> np.ndarray:
        return self.points[self.labels == region.value]


def sample_surface(mesh: LabeledSurfaceMesh, n: int, seed: int = 0) -> SurfaceSampleSet:
    """Area-weighted uniform random points on the mesh surface.

    Labels come from the nearest vertex of the source triangle.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.column_stack([1 - r1, r1 * (1 - r2), r1 * r2])
    corners = mesh.vertices[mesh.triangles[tri]]  # (n, 3, 3)
    pts = np.einsum("nk,nka->na", bary, corners)
    nearest = mesh.triangles[tri, np.argmax(bary, axis=1)]
    return SurfaceSampleSet(pts, tri, bary, mesh.labels[nearest].copy())


@dataclass(frozen=True)
class CylinderFit:
    point: np.ndarray
    direction: np.ndarray
    radius: float
    radii: np.ndarray
    iterations: int


def _frame(a):
    """Two unit vectors orthogonal to ``a`` and each other."""
    helper = np.eye(3)[np.argmin(np.abs(a))]
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def _radial(points, c, a):
    q = points - c
    perp = q - np.outer(q @ a, a)
    return q, perp, np.linalg.norm(perp, axis=1)


def _circle_init(points, c0, a):
    """Algebraic circle fit in the plane orthogonal to ``a``."""
    e1, e2 = _frame(a)
    q = points - c0
    u, v = q @ e1, q @ e2
    M = np.column_stack([u, v, np.ones_like(u)])
    sol, *_ = np.linalg.lstsq(M, u * u + v * v, rcond=None)
    cu, cv = sol[0] / 2, sol[1] / 2
    r = math.sqrt(max(sol[2] + cu * cu + cv * cv, 0.0))
    return c0 + cu * e1 + cv * e2, r


def _gauss_newton(points, c, a, r, max_iter, tol=1e-12):
    for it in range(1, max_iter + 1):
        e1, e2 = _frame(a)
        q, perp, dist = _radial(points, c, a)
        if np.any(dist < 1e-12):
            raise ValueError("a point lies on the cylinder axis")
        dhat = perp / dist[:, None]
        s = q @ a
        # residual dist - r; parameters: center shift along e1, e2; axis tilt along e1, e2; radius
        J = np.column_stack([-dhat @ e1, -dhat @ e2, -s * (dhat @ e1), -s * (dhat @ e2), -np.ones(len(points))])
        res = dist - r
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c = c + step[0] * e1 + step[1] * e2
        a = a + step[2] * e1 + step[3] * e2
        a /= np.linalg.norm(a)
        r = r + step[4]
        if np.max(np.abs(step)) < tol * max(1.0, abs(r)):
            return c, a, r, it
    raise RuntimeError(f"cylinder fit did not converge in {max_iter} iterations")


def fit_cylinder(points, max_iter: int = 100) -> CylinderFit:
    """Least-squares cylinder by Gauss-Newton on point-to-axis distances.

    Each eigenvector of the point covariance is tried as the initial axis
    (with an algebraic circle fit for center and radius); the start with the
    smallest residual is refined.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 6:
        raise ValueError("need at least 6 points of shape (n, 3)")
    centroid = p.mean(axis=0)
    _, sv, vt = np.linalg.svd(p - centroid, full_matrices=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("points are collinear")
    best = None
    for a in vt:
        c, r = _circle_init(p, centroid, a)
        res = np.sum((_radial(p, c, a)[2] - r) ** 2)
        if best is None or res < best[0]:
            best = (res, c, a, r)
    _, c, a, r = best
    c, a, r, it = _gauss_newton(p, c, a, r, max_iter)
    # canonical representation: axis point closest to the centroid, direction with non-negative major component
    c = c + ((centroid - c) @ a) * a
    if a[np.argmax(np.abs(a))] < 0:
        a = -a
    radii = _radial(p, c, a)[2]
    return CylinderFit(c, a, float(r), radii, it)


@dataclass(frozen=True)
class PlanePairFit:
    normal: np.ndarray
    offsets: tuple
    upper_distances: np.ndarray
    lower_distances: np.ndarray

    @property
    def separation(self) -> float:
        return self.offsets[0] - self.offsets[1]

    @property
    def distances(self) -> np.ndarray:
        return np.concatenate([self.upper_distances, self.lower_distances])


def fit_parallel_planes(upper, lower) -> PlanePairFit:
    """Two least-squares planes sharing one normal.

    The normal is the smallest right singular vector of both sets centered
    on their own means; it is oriented from the lower to the upper set.
    Each point's distance is measured to the opposite plane.
    """
    up = np.asarray(upper, dtype=float)
    lo = np.asarray(lower, dtype=float)
    if len(up) < 3 or len(lo) < 3:
        raise ValueError("need at least 3 points per plane")
    cu, cl = up.mean(axis=0), lo.mean(axis=0)
    stacked = np.vstack([up - cu, lo - cl])
    _, sv, vt = np.linalg.svd(stacked, full_matrices=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("point sets are degenerate (rank < 2)")
    n = vt[2]
    if (cu - cl) @ n < 0:
        n = -n
    du, dl = float(cu @ n), float(cl @ n)
    return PlanePairFit(n, (du, dl), up @ n - dl, du - lo @ n)


def closest_point_on_triangles(p, a, b, c):
    """Closest points to ``p`` on triangles ``(a, b, c)``; all arrays (..., 3).

    Region-based barycentric classification (Voronoi regions of vertices,
    edges and face).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out = a + v_face[..., None] * ab + w_face[..., None] * ac
    # later assignments take precedence, in reverse order of the classic test sequence
    cases = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), lambda: b + t_bc[..., None] * (c - b)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), lambda: a + t_ac[..., None] * ac),
        ((d6 >= 0) & (d5 <= d6), lambda: c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), lambda: a + t_ab[..., None] * ab),
        ((d3 >= 0) & (d4 <= d3), lambda: b),
        ((d1 <= 0) & (d2 <= 0), lambda: a),
    ]
    for mask, value in cases:
        if np.any(mask):
            out = np.where(mask[..., None], np.broadcast_to(value(), out.shape), out)
    return out


def winding_number(points, mesh: LabeledSurfaceMesh) -> np.ndarray:
    """Generalized winding number (solid angle sum / 4 pi) of a closed mesh."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.vertices[mesh.triangles]
    out = np.empty(len(p))
    for k0 in range(0, len(p), 256):
        q = p[k0 : k0 + 256, None, None, :]
        r = tri[None] - q  # (m, T, 3, 3)
        ln = np.linalg.norm(r, axis=-1)
        a, b, c = r[..., 0, :], r[..., 1, :], r[..., 2, :]
        la, lb, lc = ln[..., 0], ln[..., 1], ln[..., 2]
        num = np.einsum("...i,...i", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("...i,...i", a, b) * lc
            + np.einsum("...i,...i", b, c) * la
            + np.einsum("...i,...i", c, a) * lb
        )
        out[k0 : k0 + 256] = 2 * np.arctan2(num, den).sum(axis=1) / (4 * math.pi)
    return out


def point_to_mesh_distance(points, mesh: LabeledSurfaceMesh, candidates: int | None = None) -> np.ndarray | float:
    """Signed distance from points to a closed mesh, negative inside.

    ``candidates=None`` scans all triangles.  With an integer, only triangles
    incident to the that many nearest vertices are scanned, which is exact
    for reasonably regular meshes and much faster on large inputs.
    """
    p = np.asarray(points, dtype=float)
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    V, T = mesh.vertices, mesh.triangles
    best = np.full(len(p), np.inf)
    if candidates is None:
        a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
        for k0 in range(0, len(p), 64):
            q = p[k0 : k0 + 64, None, :]
            cp = closest_point_on_triangles(q, a[None], b[None], c[None])
            best[k0 : k0 + 64] = np.linalg.norm(cp - q, axis=-1).min(axis=1)
    else:
        tree = cKDTree(V)
        k = min(candidates, len(V))
        _, nn = tree.query(p, k=k)
        nn = np.atleast_2d(nn.reshape(len(p), -1))
        incident = [[] for _ in range(len(V))]
        for t, (i, j, m) in enumerate(T):
            incident[i].append(t)
            incident[j].append(t)
            incident[m].append(t)
        for r in range(len(p)):
            cand = np.unique(np.concatenate([incident[v] for v in nn[r]]).astype(int))
            tri = V[T[cand]]
            cp = closest_point_on_triangles(p[r][None], tri[:, 0], tri[:, 1], tri[:, 2])
            best[r] = np.linalg.norm(cp - p[r], axis=-1).min()
    inside = winding_number(p, mesh) > 0.5
    d = np.where(inside, -best, best)
    return float(d[0]) if scalar else d


def cortex_center_from_highres(
    densities, spacing: float, threshold: float = 500.0, closing_radius: int = 3
) -> float | None:
    """Cortex center offset (mm, relative to the profile's middle sample).

    The profile is ordered from outside to inside.  It is binarized at
    ``threshold``, closed with a 1D structuring element of ``closing_radius``
    samples, and the center is the midpoint between the first rising edge
    and the first falling edge after it.  ``None`` if no such pair exists.
    """
    rho = np.asarray(densities, dtype=float)
    mask = rho >= threshold
    if closing_radius > 0:
        # pad with the edge values so closing does not erode at the ends
        pad = closing_radius
        padded = np.pad(mask, pad, mode="edge")
        padded = ndimage.binary_closing(padded, structure=np.ones(2 * closing_radius + 1, bool))
        mask = padded[pad:-pad]
    diff = np.diff(mask.astype(np.int8))
    rises = np.nonzero(diff == 1)[0]
    if len(rises) == 0:
        return None
    start = rises[0] + 0.5
    falls = np.nonzero(diff[rises[0] + 1 :] == -1)[0]
    if len(falls) == 0:
        return None
    end = rises[0] + 1 + falls[0] + 0.5
    mid = 0.5 * (start + end)
    return float((mid - (len(rho) - 1) / 2) * spacing)


@dataclass(frozen=True)
class AccuracyReport:
    n: int
    mean: float
    sd: float
    diff: float | None
    q25: float
    q50: float
    q75: float

    def as_row(self, delimiter: str = "\t") -> str:
        vals = [self.n, self.mean, self.sd, self.diff, self.q25, self.q50, self.q75]
        return delimiter.join("nan" if v is None else (str(v) if isinstance(v, int) else repr(float(v))) for v in vals)

    @staticmethod
    def header(delimiter: str = "\t") -> str:
        return delimiter.join(["n", "mean", "sd", "diff", "abs_q25", "abs_q50", "abs_q75"])


def accuracy_report(values, truth: float | None = None) -> AccuracyReport:
    """Mean, sample SD, mean minus ``truth`` and quantiles of the absolute error.

    Without ``truth`` the values are treated as signed errors themselves.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("accuracy report needs at least one value")
    err = v - (truth if truth is not None else 0.0)
    q = np.quantile(np.abs(err), [0.25, 0.5, 0.75])
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    mean = float(v.mean())
    return AccuracyReport(
        int(v.size), mean, sd, None if truth is None else mean - truth, float(q[0]), float(q[1]), float(q[2])
    )


def shell_accuracy(
    mesh: LabeledSurfaceMesh,
    center_radius: float | None = None,
    center_height: float | None = None,
    n_samples: int = 10000,
    seed: int = 0,
) -> dict:
    """Radius and height statistics of a fitted cylindrical shell.

    Samples the surface, fits a cylinder to the ``VerticalCortex`` samples
    and two parallel planes to the ``Endplates`` samples (split at the
    largest gap of their positions along the cylinder axis).  Returns ``{"radius": AccuracyReport,
    "height": AccuracyReport}`` plus the raw fits under ``"cylinder"`` and
    ``"planes"``.
    """
    samples = sample_surface(mesh, n_samples, seed)
    lateral = samples.region(RegionLabel.VerticalCortex)
    caps = samples.region(RegionLabel.Endplates)
    cyl = fit_cylinder(lateral)
    s = (caps - cyl.point) @ cyl.direction
    # the two caps are separated by the largest gap along the axis
    ss = np.sort(s)
    k = int(np.argmax(np.diff(ss)))
    cut = 0.5 * (ss[k] + ss[k + 1])
    planes = fit_parallel_planes(caps[s > cut], caps[s <= cut])
    return {
        "radius": accuracy_report(cyl.radii, center_radius),
        "height": accuracy_report(planes.distances, center_height),
        "cylinder": cyl,
        "planes": planes,
    }
