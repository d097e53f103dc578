"""Statistical model of a BMD profile through the cortex.

Along a line orthogonal to the cortex center surface, with ``t`` the signed
distance (negative outside in soft tissue, positive inside in trabecular
bone), the profile is piecewise constant::

    Y(t) = Y0 + (Y1 - Y0) H(t + W) + (Y2 - Y1) H(t - W)

with Gaussian plateau densities ``Y0, Y1, Y2`` and a log-normal cortical
half-width ``W`` (cortical thickness ``2 W``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RegionLabel",
    "DensityPrior",
    "WidthPrior",
    "BoneModelParams",
    "realize_profile",
    "default_priors",
    "esp_priors",
]


class RegionLabel(enum.Enum):
    """Anatomical template regions; each fitted region has its own bone model."""

    VerticalCortex = 0
    Endplates = 1
    Foramen = 2
    CutPedicles = 3

    @property
    def fitted(self) -> bool:
        return self is not RegionLabel.CutPedicles

    @classmethod
    def parse(cls, token: str) -> "RegionLabel":
        try:
            return cls[token.strip()]
        except KeyError:
            raise ValueError(f"unknown region label {token!r}") from None


FITTED_REGIONS = tuple(r for r in RegionLabel if r.fitted)


@dataclass(frozen=True)
class DensityPrior:
    mean: float
    sd: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise ValueError("density prior mean must be finite")
        if not self.sd > 0:
            raise ValueError(f"density prior sd must be positive, got {self.sd}")


@dataclass(frozen=True)
class WidthPrior:
    """Log-normal prior of the cortical half-width: ``log W ~ N(log_mean, log_sd**2)``."""

    log_mean: float
    log_sd: float

    def __post_init__(self):
        if not math.isfinite(self.log_mean):
            raise ValueError("width prior log_mean must be finite")
        if not self.log_sd > 0:
            raise ValueError(f"width prior log_sd must be positive, got {self.log_sd}")

    @property
    def median(self) -> float:
        return math.exp(self.log_mean)

    def pdf(self, w):
        w = np.asarray(w, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = (np.log(w) - self.log_mean) / self.log_sd
            p = np.exp(-0.5 * u * u) / (w * self.log_sd * math.sqrt(2 * math.pi))
        return np.where(w > 0, p, 0.0)


@dataclass(frozen=True)
class BoneModelParams:
    soft_tissue: DensityPrior
    cortical: DensityPrior
    trabecular: DensityPrior
    half_width: WidthPrior

    def __post_init__(self):
        if not (self.cortical.mean > self.trabecular.mean > self.soft_tissue.mean):
            raise ValueError(
                "bone model requires cortical.mean > trabecular.mean > soft_tissue.mean, got "
                f"{self.cortical.mean}, {self.trabecular.mean}, {self.soft_tissue.mean}"
            )

    @property
    def means(self) -> np.ndarray:
        return np.array([self.soft_tissue.mean, self.cortical.mean, self.trabecular.mean])

    @property
    def variances(self) -> np.ndarray:
        return np.array([self.soft_tissue.sd, self.cortical.sd, self.trabecular.sd]) ** 2


def realize_profile(y0: float, y1: float, y2: float, w: float, t):
    """Deterministic realization ``y(t)`` with ``H(0) = 1`` at the two jumps."""
    if not w > 0:
        raise ValueError(f"half-width must be positive, got {w}")
    t = np.asarray(t, dtype=float)
    # select plateaus directly rather than summing jumps, so values are exact
    y = np.where(t - w >= 0, y2, np.where(t + w >= 0, y1, y0)).astype(float)
    return float(y) if y.ndim == 0 else y


def _params(width_median: float, width_log_sd: float = 0.3) -> BoneModelParams:
    return BoneModelParams(
        soft_tissue=DensityPrior(0.0, 30.0),
        cortical=DensityPrior(1000.0, 150.0),
        trabecular=DensityPrior(100.0, 50.0),
        half_width=WidthPrior(math.log(width_median), width_log_sd),
    )


def default_priors() -> dict[RegionLabel, BoneModelParams]:
    """Vertebra-like defaults: cortical thickness around 0.35 mm."""
    return {region: _params(0.175) for region in FITTED_REGIONS}


def esp_priors() -> dict[RegionLabel, BoneModelParams]:
    """Defaults widened to the phantom's shell thicknesses (0.5 to 2 mm)."""
    return {
        RegionLabel.VerticalCortex: _params(0.6, 0.8),
        RegionLabel.Endplates: _params(0.7, 0.8),
        RegionLabel.Foramen: _params(0.6, 0.8),
    }
