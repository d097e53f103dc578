"""Angle-dependent imaging model and the tabulated profile density ``f_Z``.

The scanner blur of a planar cortex seen along a profile that makes angle
``theta`` with the scanner z-axis reduces to a 1D convolution with

    g_theta = (1/sin) g_I(. / sin) * (1/cos) g_O,h(. / cos)

where ``g_I`` is the in-plane Gaussian and ``g_O,h`` the slice sensitivity
profile (rect convolved with a half-width triangle, scaled by the slice width
``h``).  Both kernels are normalized to unit integral.  The primitive
``G_theta`` is evaluated in closed form: the SSP's CDF is piecewise cubic, and
a piecewise polynomial convolved with a Gaussian only needs truncated
Gaussian moments.

The marginal profile density ``f_Z(z, t)`` integrates the conditional
Gaussian over the log-normal half-width with Gauss-Legendre quadrature in
``log w`` and is tabulated over ``(t, theta, z)`` per template region.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive
from .bone_model import (
    BoneModelParams,
    DensityPrior,
    RegionLabel,
    WidthPrior,
    default_priors,
)

__all__ = [
    "ScannerConfig",
    "TableAxis",
    "CombinedPsfCdf",
    "MeasurementModelTable",
    "MeasurementModel",
    "TableFormatError",
    "out_of_plane_psf",
    "in_plane_psf",
    "combined_psf_cdf",
    "conditional_moments",
    "conditional_density",
    "marginal_density",
    "build_table",
    "read_table",
    "write_table",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
# beyond these angles the rescaled factor kernel is replaced by a Dirac delta
THETA_LOW_CUTOFF = 0.5
THETA_HIGH_CUTOFF = 89.5
TABLE_FORMAT = "cortexfit-table 1"

# unit SSP: rect(z) * 2 tri(2z), support [-1, 1], pieces between these breaks
_SSP_BREAKS = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
# pdf pieces, ascending coefficients in z
_SSP_PDF = [
    P.polymul([1.0, 1.0], [1.0, 1.0]) * 2.0,  # 2 (z + 1)^2
    np.array([1.0, 0.0, -2.0]),  # 1 - 2 z^2
    np.array([1.0, 0.0, -2.0]),
    P.polymul([1.0, -1.0], [1.0, -1.0]) * 2.0,  # 2 (1 - z)^2
]


def _ssp_cdf_pieces():
    pieces, acc = [], 0.0
    for k, pdf in enumerate(_SSP_PDF):
        a = _SSP_BREAKS[k]
        prim = P.polyint(pdf)
        prim = P.polyadd(prim, [acc - P.polyval(a, prim)])
        pieces.append(np.pad(prim, (0, 4 - len(prim))))
        acc = P.polyval(_SSP_BREAKS[k + 1], prim)
    return np.array(pieces)


_SSP_CDF = _ssp_cdf_pieces()


@dataclass(frozen=True)
class ScannerConfig:
    """Slice width ``h`` (mm) and in-plane Gaussian sd ``sigma`` (mm)."""

    slice_width: float
    sigma: float

    def __post_init__(self):
        if not self.slice_width > 0:
            raise ValueError(f"slice_width must be positive, got {self.slice_width}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def matches(self, other: "ScannerConfig", rtol: float = 1e-9) -> bool:
        return math.isclose(self.slice_width, other.slice_width, rel_tol=rtol) and math.isclose(
            self.sigma, other.sigma, rel_tol=rtol
        )


def out_of_plane_psf(z, h: float):
    """Slice sensitivity profile with unit integral and support ``|z| <= h``."""
    if not h > 0:
        raise ValueError(f"slice width must be positive, got {h}")
    u = np.abs(np.asarray(z, dtype=float)) / h
    inner = 1.0 - 2.0 * u * u
    outer = 2.0 * (1.0 - u) ** 2
    g = np.where(u <= 0.5, inner, np.where(u <= 1.0, outer, 0.0)) / h
    return float(g) if g.ndim == 0 else g


def _ssp_cdf(z, h: float):
    u = np.asarray(z, dtype=float) / h
    k = np.clip(np.searchsorted(_SSP_BREAKS, u, side="right") - 1, 0, 3)
    c = _SSP_CDF[k]
    val = c[..., 0] + u * (c[..., 1] + u * (c[..., 2] + u * c[..., 3]))
    return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, 1.0, val))


def in_plane_psf(r, sigma: float):
    """1D unit-integral Gaussian of standard deviation ``sigma``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.asarray(r, dtype=float) / sigma
    g = np.exp(-0.5 * r * r) / (_SQRT2PI * sigma)
    return float(g) if g.ndim == 0 else g


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


def _gauss_moments(a, b):
    """``int_a^b x^m phi(x) dx`` for m = 0..3, bounds clipped to +-40."""
    a = np.clip(a, -40.0, 40.0)
    b = np.clip(b, -40.0, 40.0)
    pa, pb = _phi(a), _phi(b)
    # difference taken on the tail nearest to the interval to keep precision
    m0 = np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    m1 = pa - pb
    m2 = a * pa - b * pb + m0
    m3 = a * a * pa - b * b * pb + 2.0 * m1
    return m0, m1, m2, m3


def _smoothed_ssp_cdf(t, s: float, c: float):
    """CDF of (Gaussian sd ``s``) * (SSP of width ``c``), exact."""
    t = np.asarray(t, dtype=float)
    alpha = t / c
    beta = s / c
    out = ndtr((t - c) / s)
    for k in range(4):
        p = _SSP_CDF[k]
        # coefficients of p(alpha + beta x) in powers of x
        q0 = p[0] + alpha * (p[1] + alpha * (p[2] + alpha * p[3]))
        q1 = beta * (p[1] + alpha * (2 * p[2] + 3 * alpha * p[3]))
        q2 = beta**2 * (p[2] + 3 * alpha * p[3])
        q3 = beta**3 * p[3]
        lo = (c * _SSP_BREAKS[k] - t) / s
        hi = (c * _SSP_BREAKS[k + 1] - t) / s
        m0, m1, m2, m3 = _gauss_moments(lo, hi)
        out = out + q0 * m0 + q1 * m1 + q2 * m2 + q3 * m3
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class CombinedPsfCdf:
    """Primitive ``G_theta`` of the angle-dependent PSF.

    Calling the object evaluates ``G_theta`` exactly; ``grid``/``values`` hold
    a uniform tabulation over the kernel support plus margin.
    """

    theta: float
    scanner: ScannerConfig
    n_grid: int = 4097
    grid: np.ndarray = field(init=False, repr=False, compare=False)
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sin = math.sin(math.radians(self.theta))
        cos = math.cos(math.radians(self.theta))
        half = 4.0 * self.scanner.sigma * sin + self.scanner.slice_width * cos
        half = 1.25 * half
        grid = np.linspace(-half, half, self.n_grid)
        object.__setattr__(self, "grid", grid)
        # the closed form can dip by an ulp near the tails; keep the tabulation monotone
        object.__setattr__(self, "values", np.maximum.accumulate(self(grid)))

    @property
    def in_plane_sd(self) -> float:
        return self.scanner.sigma * math.sin(math.radians(self.theta))

    @property
    def out_of_plane_width(self) -> float:
        return self.scanner.slice_width * math.cos(math.radians(self.theta))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.theta < THETA_LOW_CUTOFF:
            g = _ssp_cdf(t, self.scanner.slice_width)
        elif self.theta > THETA_HIGH_CUTOFF:
            g = ndtr(t / self.scanner.sigma)
        else:
            g = _smoothed_ssp_cdf(t, self.in_plane_sd, self.out_of_plane_width)
        return float(g) if g.ndim == 0 else g

    def pdf(self, t, dt: float = 1e-5):
        """Central-difference density ``g_theta``; for plotting and checks."""
        t = np.asarray(t, dtype=float)
        return (self(t + dt) - self(t - dt)) / (2 * dt)


def combined_psf_cdf(scanner: ScannerConfig, theta: float) -> CombinedPsfCdf:
    if not 0.0 <= theta <= 90.0:
        raise ValueError(f"theta must lie in [0, 90] degrees, got {theta}")
    return CombinedPsfCdf(float(theta), scanner)


def conditional_moments(params: BoneModelParams, G, t, w):
    """Mean and variance of the blurred profile given half-width ``w``."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("half-width must be positive")
    t = np.asarray(t, dtype=float)
    g_lo = G(t + w)
    g_hi = G(t - w)
    m0, m1, m2 = params.means
    v0, v1, v2 = params.variances
    mean = m0 + (m1 - m0) * g_lo + (m2 - m1) * g_hi
    var = v0 * (1.0 - g_lo) ** 2 + v1 * (g_lo - g_hi) ** 2 + v2 * g_hi**2
    return mean, var


def _normal_pdf(z, mean, var):
    d = z - mean
    return np.exp(-0.5 * d * d / var) / np.sqrt(2.0 * math.pi * var)


def conditional_density(z, t, w, params: BoneModelParams, G):
    mean, var = conditional_moments(params, G, t, w)
    return _normal_pdf(np.asarray(z, dtype=float), mean, var)


def _width_quadrature(prior: WidthPrior, order: int):
    """Nodes ``w_k`` and weights so that sum_k a_k h(w_k) ~ E[h(W)]."""
    x, wt = np.polynomial.legendre.leggauss(order)
    half = 4.0 * prior.log_sd
    u = prior.log_mean + half * x
    # log-normal density in u = log w is the plain Gaussian, the 1/w Jacobian cancels
    gauss = np.exp(-0.5 * ((u - prior.log_mean) / prior.log_sd) ** 2) / (_SQRT2PI * prior.log_sd)
    return np.exp(u), wt * half * gauss


def marginal_density(z, t, params: BoneModelParams, G, order: int = 64):
    """``f_Z(z, t)`` with the half-width marginalized out."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    nodes, weights = _width_quadrature(params.half_width, order)
    out = np.zeros(np.broadcast(z, t).shape)
    for w, a in zip(nodes, weights):
        out += a * conditional_density(z, t, w, params, G)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TableAxis:
    min: float
    max: float
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"axis needs at least 2 samples, got {self.count}")
        if not (math.isfinite(self.min) and math.isfinite(self.max)) or not self.max > self.min:
            raise ValueError(f"axis bounds must satisfy min < max, got [{self.min}, {self.max}]")

    @property
    def step(self) -> float:
        return (self.max - self.min) / (self.count - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.min, self.max, self.count)

    def locate(self, x):
        """Clamped cell index and fractional offset for linear interpolation."""
        f = (np.clip(np.asarray(x, dtype=float), self.min, self.max) - self.min) / self.step
        i0 = np.minimum(f.astype(np.intp), self.count - 2)
        return i0, f - i0

    def __str__(self):
        return f"{self.min!r} {self.max!r} {self.count}"


DEFAULT_T_AXIS = TableAxis(-2.0, 2.0, 41)
DEFAULT_THETA_AXIS = TableAxis(0.0, 90.0, 91)
DEFAULT_Z_AXIS = TableAxis(-1000.0, 2000.0, 3001)


@dataclass(frozen=True)
class MeasurementModelTable:
    """Tabulated ``f_Z`` per region.

    ``values[region]`` is a float32 array of shape ``(n_z, n_theta, n_t)``,
    which is the on-disk order (t fastest, then theta, then z).
    """

    scanner: ScannerConfig
    priors: dict
    t_axis: TableAxis
    theta_axis: TableAxis
    z_axis: TableAxis
    quadrature_order: int
    values: dict

    @property
    def regions(self) -> tuple[RegionLabel, ...]:
        return tuple(r for r in RegionLabel if r in self.values)

    def _array(self, region: RegionLabel) -> np.ndarray:
        try:
            return self.values[region]
        except KeyError:
            raise KeyError(f"table has no model for region {region.name}") from None

    def lookup(self, region: RegionLabel, t, theta, z):
        """Trilinear interpolation over (t, theta, z); arguments are clamped."""
        arr = self._array(region)
        t, theta, z = np.broadcast_arrays(
            np.asarray(t, float), np.asarray(theta, float), np.asarray(z, float)
        )
        it, ft = self.t_axis.locate(t)
        ia, fa = self.theta_axis.locate(theta)
        iz, fz = self.z_axis.locate(z)
        out = 0.0
        for dz, wz in ((0, 1 - fz), (1, fz)):
            for da, wa in ((0, 1 - fa), (1, fa)):
                for dt, wt in ((0, 1 - ft), (1, ft)):
                    out = out + wz * wa * wt * arr[iz + dz, ia + da, it + dt]
        out = np.asarray(out, dtype=float)
        return float(out) if out.ndim == 0 else out

    def columns(self, region: RegionLabel, theta, z) -> np.ndarray:
        """Bilinear (theta, z) interpolation of the full t-column, shape (..., n_t)."""
        arr = self._array(region)
        theta, z = np.broadcast_arrays(np.asarray(theta, float), np.asarray(z, float))
        ia, fa = self.theta_axis.locate(theta)
        iz, fz = self.z_axis.locate(z)
        fa = fa[..., None]
        fz = fz[..., None]
        c0 = arr[iz, ia] * (1 - fa) + arr[iz, ia + 1] * fa
        c1 = arr[iz + 1, ia] * (1 - fa) + arr[iz + 1, ia + 1] * fa
        return c0 * (1 - fz) + c1 * fz


def _table_slice(scanner, params, theta, t_nodes, z_nodes, order):
    """f_Z over (t, z) at one angle, float64 of shape (n_z, n_t)."""
    G = combined_psf_cdf(scanner, theta)
    nodes, weights = _width_quadrature(params.half_width, order)
    mean, var = conditional_moments(params, G, t_nodes[:, None], nodes[None, :])
    inv = 1.0 / var
    norm = weights / np.sqrt(2.0 * math.pi * var)
    acc = np.zeros((len(z_nodes), len(t_nodes)))
    zc = z_nodes[:, None]
    for k in range(len(nodes)):
        d = zc - mean[None, :, k]
        acc += norm[None, :, k] * np.exp(-0.5 * d * d * inv[None, :, k])
    return acc


def build_table(
    scanner: ScannerConfig,
    priors: dict | None = None,
    t_axis: TableAxis = DEFAULT_T_AXIS,
    theta_axis: TableAxis = DEFAULT_THETA_AXIS,
    z_axis: TableAxis = DEFAULT_Z_AXIS,
    quadrature_order: int = 64,
    n_jobs: int = 1,
) -> MeasurementModelTable:
    """Tabulate ``f_Z`` for every fitted region.

    Every angle slice is an independent pure computation, so the result is
    bit-identical for any ``n_jobs``.
    """
    if priors is None:
        priors = default_priors()
    priors = {r: p for r, p in priors.items() if r.fitted}
    if not priors:
        raise ValueError("at least one fitted region prior is required")
    if theta_axis.min < 0 or theta_axis.max > 90:
        raise ValueError(f"theta axis must lie within [0, 90], got [{theta_axis.min}, {theta_axis.max}]")
    if quadrature_order < 1:
        raise ValueError("quadrature order must be positive")
    t_nodes, z_nodes = t_axis.nodes, z_axis.nodes
    regions = [r for r in RegionLabel if r in priors]
    jobs = [(r, ia, th) for r in regions for ia, th in enumerate(theta_axis.nodes)]

    def work(job):
        r, _, th = job
        return _table_slice(scanner, priors[r], th, t_nodes, z_nodes, quadrature_order)

    values = {r: np.empty((z_axis.count, theta_axis.count, t_axis.count), np.float32) for r in regions}
    n_jobs = max(1, n_jobs if n_jobs and n_jobs > 0 else (os.cpu_count() or 1))
    if n_jobs == 1:
        results = map(work, jobs)
    else:
        pool = ThreadPoolExecutor(max_workers=n_jobs)
        results = pool.map(work, jobs)
    for (r, ia, _), sl in zip(jobs, results):
        values[r][:, ia, :] = sl
    if n_jobs > 1:
        pool.shutdown()
    return MeasurementModelTable(
        scanner, dict(priors), t_axis, theta_axis, z_axis, quadrature_order, values
    )


class TableFormatError(ValueError):
    """Raised for malformed measurement model table files."""


def _prior_lines(region, p):
    key = f"prior.{region.name}"
    return [
        f"{key}.soft_tissue = {p.soft_tissue.mean!r} {p.soft_tissue.sd!r}",
        f"{key}.cortical = {p.cortical.mean!r} {p.cortical.sd!r}",
        f"{key}.trabecular = {p.trabecular.mean!r} {p.trabecular.sd!r}",
        f"{key}.half_width = {p.half_width.log_mean!r} {p.half_width.log_sd!r}",
    ]


def write_table(table: MeasurementModelTable, path) -> None:
    lines = [
        f"format = {TABLE_FORMAT}",
        f"scanner.slice_width = {table.scanner.slice_width!r}",
        f"scanner.sigma = {table.scanner.sigma!r}",
        "regions = " + " ".join(r.name for r in table.regions),
        f"axis.t = {table.t_axis}",
        f"axis.theta = {table.theta_axis}",
        f"axis.z = {table.z_axis}",
        f"quadrature_order = {table.quadrature_order}",
    ]
    for r in table.regions:
        lines += _prior_lines(r, table.priors[r])
    lines.append("end_header")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for r in table.regions:
            fh.write(np.ascontiguousarray(table.values[r], dtype="<f4").tobytes())
    os.replace(tmp, path)


def _axis(text, key):
    parts = text.split()
    if len(parts) != 3:
        raise TableFormatError(f"{key} needs 'min max count', got {text!r}")
    try:
        return TableAxis(float(parts[0]), float(parts[1]), int(parts[2]))
    except ValueError as exc:
        raise TableFormatError(f"{key}: {exc}") from exc


def read_table(path) -> MeasurementModelTable:
    path = Path(path)
    blob = path.read_bytes()
    marker = b"end_header\n"
    end = blob.find(marker)
    if end < 0:
        raise TableFormatError(f"{path}: missing end_header line")
    fields = {}
    for line in blob[:end].decode("ascii").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise TableFormatError(f"{path}: bad header line {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        fields[k] = v
    if fields.get("format") != TABLE_FORMAT:
        raise TableFormatError(f"{path}: unsupported format {fields.get('format')!r}")
    try:
        scanner = ScannerConfig(float(fields["scanner.slice_width"]), float(fields["scanner.sigma"]))
        regions = [RegionLabel.parse(tok) for tok in fields["regions"].split()]
        t_axis = _axis(fields["axis.t"], "axis.t")
        theta_axis = _axis(fields["axis.theta"], "axis.theta")
        z_axis = _axis(fields["axis.z"], "axis.z")
        order = int(fields["quadrature_order"])
        priors = {}
        for r in regions:
            k = f"prior.{r.name}"
            st, co, tr, hw = (
                [float(x) for x in fields[f"{k}.{name}"].split()]
                for name in ("soft_tissue", "cortical", "trabecular", "half_width")
            )
            priors[r] = BoneModelParams(
                DensityPrior(*st), DensityPrior(*co), DensityPrior(*tr), WidthPrior(*hw)
            )
    except KeyError as exc:
        raise TableFormatError(f"{path}: missing header key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TableFormatError(f"{path}: {exc}") from exc
    shape = (z_axis.count, theta_axis.count, t_axis.count)
    n = shape[0] * shape[1] * shape[2]
    payload = np.frombuffer(blob, dtype="<f4", offset=end + len(marker))
    if payload.size != n * len(regions) or (len(blob) - end - len(marker)) != 4 * n * len(regions):
        raise TableFormatError(
            f"{path}: payload holds {len(blob) - end - len(marker)} bytes, "
            f"expected {4 * n * len(regions)}"
        )
    values = {r: payload[i * n : (i + 1) * n].reshape(shape).astype(np.float32) for i, r in enumerate(regions)}
    return MeasurementModelTable(scanner, priors, t_axis, theta_axis, z_axis, order, values)


class MeasurementModel(BaseEstimator):
    """Estimator wrapper: ``fit`` tabulates ``f_Z``, ``score_samples`` looks it up.

    Parameters
    ----------
    slice_width, sigma : float
        Scanner slice width and in-plane PSF sd, mm.
    priors : dict or None
        ``RegionLabel -> BoneModelParams``; ``None`` uses the vertebra defaults.
    t_axis, theta_axis, z_axis : TableAxis
    quadrature_order : int
    n_jobs : int
    """

    def __init__(
        self,
        slice_width=1.0,
        sigma=0.5,
        priors=None,
        t_axis=DEFAULT_T_AXIS,
        theta_axis=DEFAULT_THETA_AXIS,
        z_axis=DEFAULT_Z_AXIS,
        quadrature_order=64,
        n_jobs=1,
    ):
        self.slice_width = slice_width
        self.sigma = sigma
        self.priors = priors
        self.t_axis = t_axis
        self.theta_axis = theta_axis
        self.z_axis = z_axis
        self.quadrature_order = quadrature_order
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self.table_ = build_table(
            ScannerConfig(check_positive(self.slice_width, "slice_width"), check_positive(self.sigma, "sigma")),
            self.priors,
            self.t_axis,
            self.theta_axis,
            self.z_axis,
            self.quadrature_order,
            self.n_jobs,
        )
        return self

    def score_samples(self, X, region=RegionLabel.VerticalCortex):
        """Density at rows ``(t, theta, z)`` of ``X``."""
        check_is_fitted(self, "table_")
        X = check_points(X)
        return self.table_.lookup(region, X[:, 0], X[:, 1], X[:, 2])
