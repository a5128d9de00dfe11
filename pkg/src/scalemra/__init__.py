"""Power-spectrum recovery for multi-reference alignment with random dilations."""
from .grid import FrequencyGrid, SampledSignal, SpatialGrid, SpectrumGrid
from .mra import ModelParams, accumulate, generate, mean_power_spectrum
from .signals import SIGNAL_IDS, SignalSpec, calibrated, get_signal, true_power_spectrum
from .unbias import (
    DilationConstants,
    EstimateReport,
    EtaEstimationError,
    OptimizerConfig,
    estimate_dilation,
    estimate_noisy,
    invert_known_eta,
    joint_optimize,
)

__version__ = "0.1.0"

__all__ = [
    "FrequencyGrid", "SampledSignal", "SpatialGrid", "SpectrumGrid",
    "ModelParams", "accumulate", "generate", "mean_power_spectrum",
    "SIGNAL_IDS", "SignalSpec", "calibrated", "get_signal", "true_power_spectrum",
    "DilationConstants", "EstimateReport", "EtaEstimationError", "OptimizerConfig",
    "estimate_dilation", "estimate_noisy", "invert_known_eta", "joint_optimize",
]
