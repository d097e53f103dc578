"""Closed, labeled triangle meshes: normals, cotangent Laplacian, I/O, template."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .bone_model import RegionLabel

__all__ = [
    "LabeledSurfaceMesh",
    "MeshError",
    "vertex_normals",
    "cotangent_weights",
    "laplacian",
    "one_ring",
    "read_mesh",
    "write_mesh",
    "make_template",
]


class MeshError(ValueError):
    """Mesh violates the closed, oriented genus-0 manifold contract."""


@dataclass(frozen=True, eq=False)
class LabeledSurfaceMesh:
    """Triangle mesh with one :class:`RegionLabel` per vertex.

    ``labels`` holds integer codes (``RegionLabel.value``).  Triangles are
    counter-clockwise seen from outside.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        t = np.array(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (N, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (F, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if self.labels is None:
            lab = np.full(len(v), RegionLabel.VerticalCortex.value, dtype=np.int8)
        else:
            lab = np.array(
                [x.value if isinstance(x, RegionLabel) else int(x) for x in self.labels], dtype=np.int8
            )
        if len(lab) != len(v):
            raise MeshError(f"label count {len(lab)} does not match vertex count {len(v)}")
        for a in (v, t, lab):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def label(self, i: int) -> RegionLabel:
        return RegionLabel(int(self.labels[i]))

    def region_mask(self, region: RegionLabel) -> np.ndarray:
        return self.labels == region.value

    def with_vertices(self, vertices) -> "LabeledSurfaceMesh":
        """Same connectivity and labels, new embedding."""
        return LabeledSurfaceMesh(vertices, self.triangles, self.labels)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(i, j)`` with ``i < j``, shape (E, 2)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        n = self.n_vertices
        a = sparse.coo_matrix(
            (np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)
        )
        return a.tocsr()

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def check(self) -> None:
        """Raise :class:`MeshError` unless the mesh is a closed oriented genus-0 manifold."""
        t = self.triangles
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        und = np.sort(directed, axis=1)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        bad = counts != 2
        if np.any(bad):
            (i, j), c = uniq[bad][0], counts[bad][0]
            kind = "boundary" if c == 1 else "non-manifold"
            raise MeshError(f"{kind} edge ({i}, {j}) is shared by {c} triangle(s)")
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts != 1):
            raise MeshError("inconsistent triangle orientation")
        used = np.unique(t)
        if len(used) != self.n_vertices:
            raise MeshError(f"{self.n_vertices - len(used)} vertices are not referenced by any triangle")
        chi = self.n_vertices - len(uniq) + len(t)
        if chi != 2:
            raise MeshError(f"Euler characteristic is {chi}, expected 2 (genus 0)")
        areas = self.triangle_areas()
        if np.any(areas <= 1e-12):
            raise MeshError(f"degenerate triangle {int(np.argmin(areas))} (area {areas.min():.3g})")


def vertex_normals(mesh: LabeledSurfaceMesh) -> np.ndarray:
    """Area-weighted unit vertex normals, oriented by the triangle winding."""
    p = mesh.vertices[mesh.triangles]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    if np.any(norm <= 1e-300):
        raise MeshError(f"zero accumulated normal at vertex {int(np.argmin(norm))}")
    return acc / norm[:, None]


def cotangent_weights(mesh: LabeledSurfaceMesh) -> sparse.csr_matrix:
    """Symmetric edge weights ``0.5 (cot a + cot b)``, negatives clamped to 0.

    Clamped edges keep an explicit zero entry so the sparsity pattern is the
    edge set.
    """
    t = mesh.triangles
    p = mesh.vertices[t]
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j = t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        rows += [i, j]
        cols += [j, i]
        vals += [0.5 * cot, 0.5 * cot]
    n = mesh.n_vertices
    w = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    w = w.tocsr()
    w.sum_duplicates()
    np.maximum(w.data, 0.0, out=w.data)
    return w


def laplacian(mesh: LabeledSurfaceMesh, weights=None) -> sparse.csr_matrix:
    """``L = diag(sum_j w_ij) - W``: symmetric PSD, zero row sums."""
    if weights is None:
        weights = cotangent_weights(mesh)
    w = sparse.csr_matrix(weights)
    deg = np.asarray(w.sum(axis=1)).ravel()
    return (sparse.diags(deg) - w).tocsr()


def one_ring(mesh: LabeledSurfaceMesh, i: int) -> list[int]:
    """Neighbors of vertex ``i`` in counter-clockwise order around it."""
    t = mesh.triangles
    rows = np.nonzero(np.any(t == i, axis=1))[0]
    nxt = {}
    for tri in t[rows]:
        k = int(np.nonzero(tri == i)[0][0])
        nxt[int(tri[(k + 1) % 3])] = int(tri[(k + 2) % 3])
    if not nxt:
        return []
    start = min(nxt)
    ring = [start]
    while True:
        j = nxt.get(ring[-1])
        if j is None or j == start:
            break
        if j in ring:
            raise MeshError(f"vertex {i} has a non-manifold umbrella")
        ring.append(j)
    if len(ring) != len(nxt):
        # open or pinched umbrella: fall back to set semantics
        return sorted(set(nxt) | set(nxt.values()))
    return ring


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".labels")


def write_mesh(mesh: LabeledSurfaceMesh, path) -> None:
    """Write ``v``/``f`` records (1-based) plus a ``.labels`` sidecar."""
    path = Path(path)
    lines = ["v {!r} {!r} {!r}".format(*map(float, v)) for v in mesh.vertices]
    lines += ["f {} {} {}".format(*(int(i) + 1 for i in f)) for f in mesh.triangles]
    for target, text in (
        (path, "\n".join(lines) + "\n"),
        (_sidecar(path), "\n".join(RegionLabel(int(c)).name for c in mesh.labels) + "\n"),
    ):
        tmp = target.with_suffix(target.suffix + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, target)


def read_mesh(path, labels_path=None, check: bool = True) -> LabeledSurfaceMesh:
    path = Path(path)
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{lineno}: only triangles are supported")
                faces.append([i - 1 for i in idx])
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: {exc}") from exc
    labels_path = Path(labels_path) if labels_path is not None else _sidecar(path)
    labels = None
    if labels_path.exists():
        tokens = [ln.strip() for ln in labels_path.read_text().splitlines() if ln.strip()]
        if len(tokens) != len(verts):
            raise MeshError(f"{labels_path}: {len(tokens)} labels for {len(verts)} vertices")
        labels = [RegionLabel.parse(tok) for tok in tokens]
    mesh = LabeledSurfaceMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3), labels)
    if check:
        try:
            mesh.check()
        except MeshError as exc:
            raise MeshError(f"{path}: {exc}") from None
    return mesh


def _zip_rings(outer, inner):
    """Triangulate the band between two closed rings of (index, angle) arrays."""
    ia, aa = outer
    ib, ab = inner
    na, nb = len(ia), len(ib)
    aa = np.r_[aa, aa[0] + 2 * math.pi]
    ab = np.r_[ab, ab[0] + 2 * math.pi]
    tris = []
    i = j = 0
    while i < na or j < nb:
        if j == nb or (i < na and aa[i + 1] <= ab[j + 1]):
            tris.append((ia[i], ia[(i + 1) % na], ib[j % nb]))
            i += 1
        else:
            tris.append((ia[i % na], ib[(j + 1) % nb], ib[j]))
            j += 1
    return tris


def make_template(
    radius: float,
    height: float,
    subdivisions: int = 96,
    rim_margin: float = 3.0,
    center=(0.0, 0.0, 0.0),
) -> LabeledSurfaceMesh:
    """Closed capped cylinder along z as a stand-in vertebral body sketch.

    ``subdivisions`` is the number of edges around the circumference; ring
    spacing follows so triangles stay close to equilateral.  Lateral vertices
    are ``VerticalCortex`` and cap vertices ``Endplates``, except within
    ``rim_margin`` of the cap rims, which are ``CutPedicles`` (not fitted).
    """
    if not (radius > 0 and height > 0):
        raise ValueError("radius and height must be positive")
    if subdivisions < 6:
        raise ValueError("subdivisions must be at least 6")
    n = int(subdivisions)
    e = 2 * math.pi * radius / n
    nz = max(1, round(height / (e * math.sqrt(3) / 2)))
    verts, labels, rings = [], [], []

    def add_ring(r, z, count, offset):
        ang = (np.arange(count) + offset) * 2 * math.pi / count
        ang = np.mod(ang, 2 * math.pi)
        order = np.argsort(ang)
        ang = ang[order]
        start = len(verts)
        for a in ang:
            verts.append((r * math.cos(a), r * math.sin(a), z))
        return np.arange(start, start + count), ang

    half = height / 2
    for k in range(nz + 1):
        z = -half + k * height / nz
        rings.append(add_ring(radius, z, n, 0.5 * (k % 2)))
        cut = abs(z) >= half - rim_margin - 1e-9
        labels += [RegionLabel.CutPedicles if cut else RegionLabel.VerticalCortex] * n
    tris = []
    for k in range(nz):
        tris += _zip_rings(rings[k], rings[k + 1])

    # caps: concentric rings stepping inward by about one edge length
    n_cap = max(1, int(radius / e))
    step = radius / (n_cap + 0.5)
    for side, rim in ((-1, rings[0]), (1, rings[-1])):
        z = side * half
        prev = rim
        for j in range(1, n_cap + 1):
            r = radius - j * step
            count = max(6, round(2 * math.pi * r / e))
            ring = add_ring(r, z, count, 0.5 * (j % 2))
            cut = r >= radius - rim_margin - 1e-9
            labels += [RegionLabel.CutPedicles if cut else RegionLabel.Endplates] * count
            tris += _zip_rings(prev, ring)
            prev = ring
        c = len(verts)
        verts.append((0.0, 0.0, z))
        labels.append(RegionLabel.CutPedicles if radius <= rim_margin else RegionLabel.Endplates)
        idx = prev[0]
        tris += [(idx[m], idx[(m + 1) % len(idx)], c) for m in range(len(idx))]

    v = np.asarray(verts)
    t = np.asarray(tris, dtype=np.int64)
    # orient outward: the body is convex and contains the origin
    p = v[t]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", fn, p.mean(axis=1)) < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    mesh = LabeledSurfaceMesh(v + np.asarray(center, dtype=float), t, labels)
    mesh.check()
    return mesh
