"""3D neural cellular automaton segmentation with built-in quality control.

A small segmentation model grows its prediction by repeatedly applying one
local update rule over the volume, coarse-to-fine across resolution levels.
Because the update is stochastic, rerunning it yields an ensemble whose
disagreement scores segmentation quality without labels.
"""

from .core import Model, ModelConfig, param_count, step_count
from .errors import NcaError
from .inference import EnsembleResult, SegmentResult, ensemble, memory_plan, segment
from .pipeline import TrainConfig, TrainResult, train
from .quality import Calibration, calibrate, nqm_score
from .synth import (
    SyntheticSpec,
    corrupt_ghost,
    corrupt_noise,
    corrupt_spike,
    dice_score,
    generate,
    make_dataset,
    make_volume,
)

__version__ = "0.1.0"

__all__ = [
    "Calibration",
    "EnsembleResult",
    "Model",
    "ModelConfig",
    "NcaError",
    "SegmentResult",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "calibrate",
    "corrupt_ghost",
    "corrupt_noise",
    "corrupt_spike",
    "dice_score",
    "ensemble",
    "generate",
    "make_dataset",
    "make_volume",
    "memory_plan",
    "nqm_score",
    "param_count",
    "segment",
    "step_count",
    "train",
]
