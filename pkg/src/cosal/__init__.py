"""Within-image co-saliency detection on plain numpy, with numba-accelerated kernels."""

__version__ = "0.1.0"

from ._accel import BACKEND
from .config import OptimConfig, RunConfig, load_config
from .data import Sample, synth_generate
from .losses import LossConfig
from .metrics import EvalReport, evaluate_dataset
from .network import CoSaliencyNet, NetworkConfig
from .roialign import RoiSpec
from .sampling import SamplingConfig

__all__ = [
    "BACKEND", "CoSaliencyNet", "EvalReport", "LossConfig", "NetworkConfig", "OptimConfig", "RoiSpec",
    "RunConfig", "Sample", "SamplingConfig", "evaluate_dataset", "load_config", "synth_generate",
]
