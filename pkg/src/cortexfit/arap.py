"""As-rigid-as-possible surface fitting to displaced target positions.

The shape energy is the weighted point-to-plane distance to the targets plus
``sigma_E**-2`` times the ARAP energy against the rest embedding.  It is
minimized by alternating a global linear solve (rotations fixed) with a
local per-vertex rotation fit (positions fixed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import LabeledSurfaceMesh, cotangent_weights, laplacian

__all__ = [
    "FitTargets",
    "PCGError",
    "arap_energy",
    "fit_rotations",
    "assemble_system",
    "pcg_solve",
    "point_to_plane_energy",
    "shape_energy",
    "fit_surface",
    "SurfaceFit",
]

log = logging.getLogger(__name__)


class PCGError(RuntimeError):
    """PCG failed; ``x`` holds the last iterate and ``residual`` its relative residual."""

    def __init__(self, message, x=None, residual=None):
        super().__init__(message)
        self.x = x
        self.residual = residual


@dataclass(frozen=True)
class FitTargets:
    """Target points ``y_i``, unit plane normals ``n_i`` and weights ``gamma_i``."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normals, float)
        if not np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9):
            raise ValueError("target normals must be unit length")
        if np.any(np.asarray(self.weights) < 0):
            raise ValueError("target weights must be non-negative")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("target points must be finite")


def _directed_edges(weights: sparse.spmatrix):
    w = sparse.coo_matrix(weights)
    return w.row, w.col, w.data


def arap_energy(rest, deformed, weights, rotations, sigma_e: float = 2.0, vertex_weights=None) -> float:
    """``sigma_E^-2 sum_i g_i sum_j w_ij |(x'_i - x'_j) - R_i (x_i - x_j)|^2``.

    ``weights`` is the sparse symmetric edge-weight matrix; ``vertex_weights``
    (``g_i``) defaults to ones.
    """
    i, j, w = _directed_edges(weights)
    rest = np.asarray(rest, float)
    deformed = np.asarray(deformed, float)
    e = rest[i] - rest[j]
    ed = deformed[i] - deformed[j]
    r = ed - np.einsum("kab,kb->ka", np.asarray(rotations)[i], e)
    cell = w * np.einsum("ka,ka->k", r, r)
    if vertex_weights is not None:
        cell = cell * np.asarray(vertex_weights, float)[i]
    return float(cell.sum()) / sigma_e**2


def fit_rotations(rest, deformed, weights, return_flags: bool = False):
    """Per-vertex rotation best mapping rest 1-ring edges onto deformed ones.

    Covariance ``S_i = sum_j w_ij e_ij e'_ij^T`` is decomposed as ``U S V^T``
    and ``R_i = V U^T`` (reflection removed).  Vertices whose covariance has
    rank below 2 fall back to the identity and are flagged.
    """
    i, j, w = _directed_edges(weights)
    rest = np.asarray(rest, float)
    deformed = np.asarray(deformed, float)
    n = len(rest)
    e = rest[i] - rest[j]
    ed = deformed[i] - deformed[j]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, i, w[:, None, None] * e[:, :, None] * ed[:, None, :])
    u, sv, vt = np.linalg.svd(cov)
    v = np.transpose(vt, (0, 2, 1))
    ut = np.transpose(u, (0, 2, 1))
    rot = v @ ut
    neg = np.linalg.det(rot) < 0
    if np.any(neg):
        v = v.copy()
        v[neg, :, 2] *= -1
        rot[neg] = v[neg] @ ut[neg]
    degenerate = sv[:, 1] <= 1e-12 * np.maximum(sv[:, 0], 1e-300)
    rot[degenerate] = np.eye(3)
    if return_flags:
        return rot, degenerate
    return rot


def _arap_rhs(rest, weights, rotations):
    """``c_i = sum_j w_ij (R_i + R_j)/2 (x_i - x_j)``, shape (N, 3)."""
    i, j, w = _directed_edges(weights)
    e = rest[i] - rest[j]
    rs = 0.5 * (rotations[i] + rotations[j])
    contrib = w[:, None] * np.einsum("kab,kb->ka", rs, e)
    c = np.zeros_like(rest)
    np.add.at(c, i, contrib)
    return c


def assemble_system(
    mesh: LabeledSurfaceMesh,
    weights,
    rotations,
    targets: FitTargets,
    sigma_e: float = 2.0,
    anchor=None,
    eps_rel: float = 1e-9,
):
    """Normal equations of the shape energy with rotations fixed.

    Returns ``(A, b)`` with ``A = 2 sigma_E^-2 (L kron I3) + B + eps I`` and
    ``b = 2 sigma_E^-2 c + d + eps * anchor``, unknowns interleaved as
    ``(x1, y1, z1, x2, ...)``.  The ``eps`` term (relative to the largest
    diagonal entry) pins the translation null space of pure ARAP; anchoring
    it at ``anchor`` (default: the mesh embedding) keeps fixed points exact.
    """
    rest = mesh.vertices
    n = len(rest)
    L = laplacian(mesh, weights)
    k = 2.0 / sigma_e**2
    nrm = np.asarray(targets.normals, float)
    g = np.asarray(targets.weights, float)
    blocks = g[:, None, None] * nrm[:, :, None] * nrm[:, None, :]
    B = _block_diag3(blocks)
    A = (k * sparse.kron(L, sparse.identity(3), format="csr") + B).tocsr()
    eps = eps_rel * A.diagonal().max()
    A = (A + eps * sparse.identity(3 * n, format="csr")).tocsr()
    c = _arap_rhs(rest, weights, np.asarray(rotations, float))
    d = g[:, None] * nrm * np.einsum("ka,ka->k", nrm, np.asarray(targets.points, float))[:, None]
    if anchor is None:
        anchor = rest
    b = (k * c + d + eps * np.asarray(anchor, float)).ravel()
    return A, b


def _block_diag3(blocks):
    n = len(blocks)
    base = 3 * np.arange(n)
    rows = (base[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
    cols = (base[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
    return sparse.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 3 * n))


def pcg_solve(A, b, x0=None, tol: float = 1e-10, max_iter: int | None = None):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Stops when ``|b - A x| / |b| <= tol``.  Raises :class:`PCGError` on a
    non-positive diagonal, a breakdown, or when ``max_iter`` (default
    ``30 * len(b)``) is exhausted.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    if max_iter is None:
        max_iter = 30 * n
    diag = A.diagonal() if sparse.issparse(A) else np.diag(A).copy()
    if np.any(diag <= 0):
        raise PCGError(f"non-positive diagonal entry at row {int(np.argmin(diag))}")
    inv_diag = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n)
    r = b - A @ x
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 1e-300 * max(1.0, p @ p):
            raise PCGError(f"breakdown at iteration {it}: p^T A p = {pAp:.3g}", x, np.linalg.norm(r) / bnorm)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise PCGError(f"no convergence in {max_iter} iterations (relative residual {res:.3g})", x, res)


def point_to_plane_energy(positions, targets: FitTargets) -> float:
    r = np.einsum("ka,ka->k", np.asarray(positions) - targets.points, targets.normals)
    return float(np.sum(targets.weights * r * r))


def shape_energy(rest, positions, weights, rotations, targets: FitTargets, sigma_e: float) -> float:
    """Point-to-plane term plus unit-vertex-weight ARAP term."""
    return point_to_plane_energy(positions, targets) + arap_energy(rest, positions, weights, rotations, sigma_e)


@dataclass
class SurfaceFit:
    positions: np.ndarray
    rotations: np.ndarray
    energies: list
    iterations: int


def fit_surface(
    mesh: LabeledSurfaceMesh,
    targets: FitTargets,
    sigma_e: float = 2.0,
    positions=None,
    rotations=None,
    weights=None,
    rel_tol: float = 1e-6,
    max_iter: int = 100,
    pcg_tol: float = 1e-10,
    pcg_max_iter: int | None = None,
) -> SurfaceFit:
    """Alternate global position solves and local rotation fits.

    ``mesh`` supplies the rest embedding; ``positions`` (default: the rest
    embedding) is the starting deformed state and ``rotations`` the warm
    start.  Stops when the relative decrease of the shape energy over one
    cycle drops below ``rel_tol``.
    """
    rest = mesh.vertices
    n = len(rest)
    if weights is None:
        weights = cotangent_weights(mesh)
    x = np.array(rest if positions is None else positions, dtype=float)
    rot = np.tile(np.eye(3), (n, 1, 1)) if rotations is None else np.array(rotations, dtype=float)
    energies = [shape_energy(rest, x, weights, rot, targets, sigma_e)]
    it = 0
    for it in range(1, max_iter + 1):
        A, b = assemble_system(mesh, weights, rot, targets, sigma_e, anchor=x)
        x = pcg_solve(A, b, x0=x.ravel(), tol=pcg_tol, max_iter=pcg_max_iter).reshape(n, 3)
        rot = fit_rotations(rest, x, weights)
        e = shape_energy(rest, x, weights, rot, targets, sigma_e)
        prev = energies[-1]
        energies.append(e)
        if e > prev * (1 + 1e-9) + 1e-12:
            log.debug("shape energy increased %.6g -> %.6g", prev, e)
        if prev <= 0 or (prev - e) <= rel_tol * prev:
            break
    return SurfaceFit(x, rot, energies, it)
