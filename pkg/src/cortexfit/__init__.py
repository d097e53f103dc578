"""Cortex center surface identification in calibrated CT by model-based fitting.

A labeled template mesh is deformed as-rigidly-as-possible towards per-vertex
MAP displacements computed from a tabulated statistical measurement model of
blurred cortical profiles.
"""

__version__ = "0.1.0"

from .bone_model import BoneModelParams, DensityPrior, RegionLabel, WidthPrior, default_priors, esp_priors
from .displacement import DisplacementField, ProfileGrid, ShiftGrid, compute_displacements
from .measurement_model import MeasurementModel, MeasurementModelTable, ScannerConfig, build_table, read_table, write_table
from .mesh import LabeledSurfaceMesh, make_template, read_mesh, write_mesh
from .pipeline import CortexSurfaceFitter, FitReport, PipelineConfig, read_config, run
from .volume import CalibratedVolume, read_volume, write_volume

__all__ = [
    "BoneModelParams",
    "CalibratedVolume",
    "CortexSurfaceFitter",
    "DensityPrior",
    "DisplacementField",
    "FitReport",
    "LabeledSurfaceMesh",
    "MeasurementModel",
    "MeasurementModelTable",
    "PipelineConfig",
    "ProfileGrid",
    "RegionLabel",
    "ScannerConfig",
    "ShiftGrid",
    "WidthPrior",
    "build_table",
    "compute_displacements",
    "default_priors",
    "esp_priors",
    "make_template",
    "read_config",
    "read_mesh",
    "read_table",
    "read_volume",
    "run",
    "write_mesh",
    "write_table",
    "write_volume",
]
