"""moeforge: virtual mixture-of-experts decoding fusion for a single generative model."""

from moeforge.fusion import fuse_step
from moeforge.harness import ExperimentSpec, run_generation
from moeforge.models import BackendConfig, FusionConfig, GenerationTrace, StepRecord

__version__ = "0.1.0"
__all__ = [
    "fuse_step",
    "run_generation",
    "GenerationTrace",
    "StepRecord",
    "FusionConfig",
    "BackendConfig",
    "ExperimentSpec",
]

# Register backends on import
import moeforge.backends  # noqa: F401, E402
