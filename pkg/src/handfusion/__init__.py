"""Gesture-conditioned text-to-image fine-tuning with fused text embeddings."""

from .config import RunConfig, load_config, toy_config
from .fusion import FusionConfig, GestureBundle, HashTextEncoder, concat_project, linear_fuse
from .diffusion import ToyBackend, ToyBackendConfig, ddim_sample, make_schedule
from .evaluation import fid, kid
from .pipeline import run_pipeline

__version__ = "0.1.0"

__all__ = [
    "FusionConfig",
    "GestureBundle",
    "HashTextEncoder",
    "RunConfig",
    "ToyBackend",
    "ToyBackendConfig",
    "concat_project",
    "ddim_sample",
    "fid",
    "kid",
    "linear_fuse",
    "load_config",
    "make_schedule",
    "run_pipeline",
    "toy_config",
]
