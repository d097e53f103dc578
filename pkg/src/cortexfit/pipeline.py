"""Outer alternating loop: profiles, MAP displacements, ARAP surface fit.

Also owns the run configuration (``key = value`` text with dotted keys) and
the per-iteration fit report.
"""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_mesh, check_volume
from .arap import FitTargets, fit_surface
from .bone_model import BoneModelParams, DensityPrior, RegionLabel, WidthPrior, default_priors, esp_priors
from .displacement import DisplacementField, ProfileGrid, ShiftGrid, compute_displacements
from .measurement_model import MeasurementModelTable, ScannerConfig, read_table
from .mesh import LabeledSurfaceMesh, cotangent_weights, vertex_normals
from .volume import CalibratedVolume

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "read_config",
    "parse_config",
    "format_config",
    "IterationRecord",
    "FitReport",
    "run",
    "CortexSurfaceFitter",
]

log = logging.getLogger(__name__)

PRIOR_PRESETS = {"default": default_priors, "esp": esp_priors}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or value."""


@dataclass(frozen=True)
class PipelineConfig:
    scanner: ScannerConfig
    table: str | None = None
    priors: dict | None = None
    profile: ProfileGrid = ProfileGrid()
    shift: ShiftGrid = ShiftGrid()
    sigma_s: float = 2.0
    sigma_e: float = 2.0
    max_iterations: int = 50
    tol: float = 0.01
    pcg_tol: float = 1e-10
    pcg_max_iter: int | None = None
    inner_rel_tol: float = 1e-6
    inner_max_iter: int = 100
    threads: int = 1

    def __post_init__(self):
        for name in ("sigma_s", "sigma_e", "tol", "pcg_tol", "inner_rel_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iterations < 0:
            raise ConfigError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.inner_max_iter < 1:
            raise ConfigError(f"inner.max_iter must be >= 1, got {self.inner_max_iter}")
        if self.pcg_max_iter is not None and self.pcg_max_iter < 1:
            raise ConfigError(f"pcg.max_iter must be >= 1, got {self.pcg_max_iter}")


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


_SIMPLE = {
    "table": ("table", str),
    "sigma_s": ("sigma_s", _float),
    "sigma_e": ("sigma_e", _float),
    "max_iterations": ("max_iterations", _int),
    "tol": ("tol", _float),
    "pcg.tol": ("pcg_tol", _float),
    "pcg.max_iter": ("pcg_max_iter", _int),
    "inner.rel_tol": ("inner_rel_tol", _float),
    "inner.max_iter": ("inner_max_iter", _int),
    "threads": ("threads", _int),
}
_GRIDS = {
    "profile.t0": ("profile", "t0", _float),
    "profile.K": ("profile", "K", _int),
    "shift.s_max": ("shift", "s_max", _float),
    "shift.step": ("shift", "step", _float),
}
_PRIOR_FIELDS = ("soft_tissue", "cortical", "trabecular", "half_width")


def parse_config(text: str, source: str = "<config>", base_dir=None) -> PipelineConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``scanner.slice_width`` and ``scanner.sigma`` are mandatory.  ``table``
    is resolved relative to ``base_dir`` when given.  Prior keys are
    ``priors = default|esp`` plus per-region overrides
    ``prior.<Region>.<field> = a b`` (mean and sd, or log-mean and log-sd
    for ``half_width``).
    """
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen[key] = (lineno, value)

    kwargs = {}
    grids = {"profile": {}, "shift": {}}
    scanner = {}
    prior_preset = None
    overrides = {}
    for key, (lineno, value) in seen.items():
        where = f"{source}:{lineno}: {key}"
        try:
            if key in ("scanner.slice_width", "scanner.sigma"):
                scanner[key.split(".")[1]] = float(value)
            elif key in _SIMPLE:
                name, cast = _SIMPLE[key]
                kwargs[name] = cast(value)
            elif key in _GRIDS:
                grid, name, cast = _GRIDS[key]
                grids[grid][name] = cast(value)
            elif key == "priors":
                if value not in PRIOR_PRESETS:
                    raise ValueError(f"unknown prior preset {value!r}; choose from {sorted(PRIOR_PRESETS)}")
                prior_preset = value
            elif key.startswith("prior."):
                parts = key.split(".")
                if len(parts) != 3 or parts[2] not in _PRIOR_FIELDS:
                    raise KeyError(key)
                region = RegionLabel.parse(parts[1])
                if not region.fitted:
                    raise ValueError(f"region {region.name} is not fitted")
                nums = [float(x) for x in value.split()]
                if len(nums) != 2:
                    raise ValueError(f"expected two numbers, got {value!r}")
                overrides.setdefault(region, {})[parts[2]] = nums
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    missing = [k for k in ("scanner.slice_width", "scanner.sigma") if k.split(".")[1] not in scanner]
    if missing:
        raise ConfigError(f"{source}: missing mandatory key {missing[0]!r}")
    try:
        kwargs["scanner"] = ScannerConfig(scanner["slice_width"], scanner["sigma"])
        kwargs["profile"] = ProfileGrid(**grids["profile"])
        kwargs["shift"] = ShiftGrid(**grids["shift"])
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if prior_preset is not None or overrides:
        priors = PRIOR_PRESETS[prior_preset or "default"]()
        for region, vals in overrides.items():
            p = priors[region]
            try:
                priors[region] = BoneModelParams(
                    *(
                        (WidthPrior if f == "half_width" else DensityPrior)(*vals[f]) if f in vals else getattr(p, f)
                        for f in _PRIOR_FIELDS
                    )
                )
            except ValueError as exc:
                raise ConfigError(f"{source}: prior.{region.name}: {exc}") from None
        kwargs["priors"] = priors
    if "table" in kwargs and base_dir is not None and not Path(kwargs["table"]).is_absolute():
        kwargs["table"] = str(Path(base_dir) / kwargs["table"])
    return PipelineConfig(**kwargs)


def read_config(path, require_table: bool = True) -> PipelineConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), str(path), base_dir=path.parent)
    if require_table and cfg.table is None:
        raise ConfigError(f"{path}: missing mandatory key 'table'")
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    """Inverse of :func:`parse_config` (priors written out in full)."""
    lines = [
        f"scanner.slice_width = {cfg.scanner.slice_width!r}",
        f"scanner.sigma = {cfg.scanner.sigma!r}",
    ]
    if cfg.table is not None:
        lines.append(f"table = {cfg.table}")
    lines += [
        f"profile.t0 = {cfg.profile.t0!r}",
        f"profile.K = {cfg.profile.K}",
        f"shift.s_max = {cfg.shift.s_max!r}",
        f"shift.step = {cfg.shift.step!r}",
        f"sigma_s = {cfg.sigma_s!r}",
        f"sigma_e = {cfg.sigma_e!r}",
        f"max_iterations = {cfg.max_iterations}",
        f"tol = {cfg.tol!r}",
        f"pcg.tol = {cfg.pcg_tol!r}",
    ]
    if cfg.pcg_max_iter is not None:
        lines.append(f"pcg.max_iter = {cfg.pcg_max_iter}")
    lines += [
        f"inner.rel_tol = {cfg.inner_rel_tol!r}",
        f"inner.max_iter = {cfg.inner_max_iter}",
        f"threads = {cfg.threads}",
    ]
    if cfg.priors is not None:
        for region, p in cfg.priors.items():
            k = f"prior.{region.name}"
            lines += [
                f"{k}.soft_tissue = {p.soft_tissue.mean!r} {p.soft_tissue.sd!r}",
                f"{k}.cortical = {p.cortical.mean!r} {p.cortical.sd!r}",
                f"{k}.trabecular = {p.trabecular.mean!r} {p.trabecular.sd!r}",
                f"{k}.half_width = {p.half_width.log_mean!r} {p.half_width.log_sd!r}",
            ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    rms_displacement: float
    mean_gamma: float
    shape_energy: float
    inner_iterations: int


@dataclass
class FitReport:
    iterations: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    def to_table(self, delimiter: str = "\t", include_time: bool = False) -> str:
        """Delimiter-separated per-iteration table.

        Wall time is excluded by default so reports of identical runs are
        byte-identical.
        """
        cols = [f.name for f in dc_fields(IterationRecord)]
        buf = io.StringIO()
        buf.write(delimiter.join(cols) + "\n")
        for rec in self.iterations:
            buf.write(delimiter.join(_fmt(getattr(rec, c)) for c in cols) + "\n")
        buf.write(f"# iterations{delimiter}{self.n_iterations}\n")
        buf.write(f"# converged{delimiter}{int(self.converged)}\n")
        if include_time:
            buf.write(f"# wall_time_s{delimiter}{self.wall_time:.3f}\n")
        return buf.getvalue()


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def check_compatible(table: MeasurementModelTable, config: PipelineConfig) -> None:
    """Raise :class:`ConfigError` if the table was built for other settings."""
    if not table.scanner.matches(config.scanner):
        raise ConfigError(
            "table scanner settings do not match the configuration: "
            f"table slice_width={table.scanner.slice_width!r} sigma={table.scanner.sigma!r}, "
            f"config slice_width={config.scanner.slice_width!r} sigma={config.scanner.sigma!r}"
        )
    if config.profile.t0 > table.t_axis.max + 1e-12:
        raise ConfigError(f"profile.t0={config.profile.t0!r} exceeds the table t-axis maximum {table.t_axis.max!r}")
    if config.priors is not None:
        for region, p in config.priors.items():
            if region in table.priors and table.priors[region] != p:
                raise ConfigError(f"prior for {region.name} differs between table and configuration")


def run(
    volume: CalibratedVolume,
    template: LabeledSurfaceMesh,
    table: MeasurementModelTable,
    config: PipelineConfig,
) -> tuple[LabeledSurfaceMesh, FitReport, DisplacementField | None]:
    """Fit ``template`` to ``volume``.

    Returns the fitted mesh (template connectivity and labels), the report,
    and the displacement field of the last iteration (``None`` if no
    iteration ran).
    """
    check_compatible(table, config)
    template.check()
    start = time.perf_counter()
    report = FitReport()
    weights = cotangent_weights(template)
    rest = template.vertices
    x = np.array(rest, dtype=float)
    rot = None
    field_ = None
    for it in range(1, config.max_iterations + 1):
        current = template.with_vertices(x)
        d = -vertex_normals(current)
        field_ = compute_displacements(
            current, volume, table, config.profile, config.shift, config.sigma_s, config.threads, normals=-d
        )
        targets = FitTargets(x + field_.shift[:, None] * d, d, field_.gamma)
        fit = fit_surface(
            template,
            targets,
            config.sigma_e,
            positions=x,
            rotations=rot,
            weights=weights,
            rel_tol=config.inner_rel_tol,
            max_iter=config.inner_max_iter,
            pcg_tol=config.pcg_tol,
            pcg_max_iter=config.pcg_max_iter,
        )
        x, rot = fit.positions, fit.rotations
        rms = field_.weighted_rms()
        valid = field_.valid
        mean_gamma = float(field_.gamma[valid].mean()) if np.any(valid) else 0.0
        report.iterations.append(IterationRecord(it, rms, mean_gamma, fit.energies[-1], fit.iterations))
        log.info("iteration %d: rms %.4f mm, mean gamma %.3g, E %.6g", it, rms, mean_gamma, fit.energies[-1])
        if rms < config.tol:
            report.converged = True
            break
    report.wall_time = time.perf_counter() - start
    return template.with_vertices(x), report, field_


class CortexSurfaceFitter(BaseEstimator):
    """Estimator wrapper around :func:`run`.

    ``fit(volume)`` deforms ``template`` into ``mesh_``; ``transform(volume)``
    returns the residual displacement field of ``mesh_`` against a volume.
    """

    def __init__(self, template=None, table=None, config=None):
        self.template = template
        self.table = table
        self.config = config

    def _resolved(self):
        if self.template is None or self.config is None:
            raise ValueError("template and config are required")
        table = self.table
        if table is None:
            if self.config.table is None:
                raise ValueError("no table given and config.table is unset")
            table = read_table(self.config.table)
        elif isinstance(table, (str, Path)):
            table = read_table(table)
        return table

    def fit(self, X: CalibratedVolume, y=None):
        X = check_volume(X)
        check_mesh(self.template, "template")
        self.table_ = self._resolved()
        self.mesh_, self.report_, self.displacements_ = run(X, self.template, self.table_, self.config)
        self.n_iter_ = self.report_.n_iterations
        return self

    def transform(self, X: CalibratedVolume) -> DisplacementField:
        check_is_fitted(self, "mesh_")
        X = check_volume(X)
        cfg = self.config
        return compute_displacements(self.mesh_, X, self.table_, cfg.profile, cfg.shift, cfg.sigma_s, cfg.threads)

    def predict(self, X=None) -> LabeledSurfaceMesh:
        check_is_fitted(self, "mesh_")
        return self.mesh_
