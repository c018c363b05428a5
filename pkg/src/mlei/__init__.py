"""Diffusion-model likelihood ranking for near-field MIMO detection."""

from .detectors import (
    Constellation,
    DetectorKind,
    DiffusionSamplingDetector,
    EuclideanMLEDetector,
    GenieSaSDetector,
    MLEIDetector,
    MMSEDetector,
    ZFDetector,
)
from .diffusion import DiffusionNoiseModel, NoiseNetwork, make_linear_schedule
from .harness import ExperimentConfig, run_sweep
from .stable import NoiseParams

__all__ = [
    "Constellation",
    "DetectorKind",
    "DiffusionNoiseModel",
    "DiffusionSamplingDetector",
    "EuclideanMLEDetector",
    "ExperimentConfig",
    "GenieSaSDetector",
    "MLEIDetector",
    "MMSEDetector",
    "NoiseNetwork",
    "NoiseParams",
    "ZFDetector",
    "make_linear_schedule",
    "run_sweep",
]
