"""Latent visual reasoning on a toy multimodal transformer.

Implicit reasoning steps replay the most attended image tokens into the
context and supervise them with a re-encoded crop; a per-layer router sends
the most important tokens through their layer a second time.
"""
from .backbone import Backbone, ForwardOutput
from .config import ModelConfig, RunConfig, TrainConfig, load_run_config

__all__ = ["Backbone", "ForwardOutput", "ModelConfig", "RunConfig", "TrainConfig",
           "load_run_config"]
__version__ = "0.1.0"
