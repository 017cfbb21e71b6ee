"""Mask Volume Synth - mask- and informed-slice-conditioned volume diffusion on 3D phantoms."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .exceptions import (
    ConfigError,
    ContainerFormatError,
    MissingArtifactError,
    NumericFailureError,
    VolumeSynthError,
)
from .models import (
    DatasetEntry,
    DatasetManifest,
    Direction,
    InformedPolicy,
    MetricReport,
    PatientStyle,
    PhantomSpec,
    RunManifest,
    Split,
    Stage,
    WindowJob,
    WindowPlan,
)

__all__ = [
    "RunConfig",
    "load_config",
    "ConfigError",
    "ContainerFormatError",
    "MissingArtifactError",
    "NumericFailureError",
    "VolumeSynthError",
    "DatasetEntry",
    "DatasetManifest",
    "Direction",
    "InformedPolicy",
    "MetricReport",
    "PatientStyle",
    "PhantomSpec",
    "RunManifest",
    "Split",
    "Stage",
    "WindowJob",
    "WindowPlan",
]
