"""Small meshes and independent reference computations used across tests."""

import math

import numpy as np
from scipy import integrate

from cortexfit.bone_model import RegionLabel
from cortexfit.mesh import LabeledSurfaceMesh


def tetrahedron(labels=None):
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return LabeledSurfaceMesh(v, f, labels)


def icosahedron(radius=1.0):
    p = (1 + math.sqrt(5)) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    v *= radius / np.linalg.norm(v[0])
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    return LabeledSurfaceMesh(v, f)


def subdivided_sphere(levels=2, radius=1.0):
    """Loop-style midpoint subdivision of the icosahedron projected to a sphere."""
    m = icosahedron(radius)
    v, f = list(map(tuple, m.vertices)), [tuple(t) for t in m.triangles]
    for _ in range(levels):
        cache = {}
        new_f = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = (np.array(v[a]) + np.array(v[b])) / 2
                v.append(tuple(p / np.linalg.norm(p) * radius))
                cache[key] = len(v) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_f += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = new_f
    return LabeledSurfaceMesh(np.array(v), np.array(f))


def unit_cube(center=(0.0, 0.0, 0.0)):
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    v += np.asarray(center) - 0.5
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return LabeledSurfaceMesh(v, np.array(f))


def point_triangle_distance_oracle(p, a, b, c):
    """Unsigned distance by plane projection when inside, else the nearest edge."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    inside = all(
        np.cross(e1 - e0, q - e0) @ n >= -1e-15 for e0, e1 in ((a, b), (b, c), (c, a))
    )
    if inside:
        return abs((p - a) @ n)

    def seg(x0, x1):
        d = x1 - x0
        t = np.clip((p - x0) @ d / (d @ d), 0.0, 1.0)
        return np.linalg.norm(p - (x0 + t * d))

    return min(seg(a, b), seg(b, c), seg(c, a))


def ssp_unit(u):
    """Slice profile for h = 1 written out piece by piece."""
    u = abs(u)
    if u <= 0.5:
        return 1 - 2 * u * u
    if u <= 1.0:
        return 2 * (1 - u) ** 2
    return 0.0


def oblique_step_response(t, theta_deg, sigma, h):
    """Blurred unit step seen along a profile at angle ``theta``.

    The step occupies the half-space ``r sin(theta) + z cos(theta) >= 0``
    (r in-plane, z along the scanner axis); the image is blurred by the
    Gaussian along r and the slice profile along z and read at the profile
    point ``(t sin(theta), t cos(theta))``.  Evaluated as a 2D integral.
    """
    th = math.radians(theta_deg)
    s, c = math.sin(th), math.cos(th)
    r0, z0 = t * s, t * c

    # integrate over slice offset z', then the in-plane Gaussian in closed form
    def inner(zp):
        # point (r0 - r', z0 - z') lies in the step iff r' <= (r0 s + (z0 - zp) c) / s
        bound = (r0 * s + (z0 - zp) * c) / s
        from scipy.special import ndtr

        return ssp_unit(zp / h) / h * ndtr(bound / sigma)

    pts = [-h, -h / 2, 0.0, h / 2, h]
    val, _ = integrate.quad(inner, -h, h, points=pts, epsabs=1e-13, epsrel=1e-13, limit=400)
    return val


def labeled(mesh, region):
    return LabeledSurfaceMesh(mesh.vertices, mesh.triangles, np.full(mesh.n_vertices, region.value))


__all__ = [
    "tetrahedron",
    "icosahedron",
    "subdivided_sphere",
    "unit_cube",
    "point_triangle_distance_oracle",
    "oblique_step_response",
    "ssp_unit",
    "labeled",
    "RegionLabel",
]
