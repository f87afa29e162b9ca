"""Scribble-supervised segmentation with a dual CNN/transformer network and a class memory."""

from .dataset import (DatasetManifest, GeneratorConfig, generate_sample, load_manifest,
                      make_arrays, save_manifest, scribble_from_mask, synthesize_split)
from .estimator import ScribbleVCSegmenter
from .evaluation import EvalReport, evaluate, predict, predict_proba
from .losses import CrfConfig, LossWeights, PseudoLabelConfig
from .mie import ClassMemoryBank
from .model import ModelConfig, ScribbleVCNet
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ClassMemoryBank", "CrfConfig", "DatasetManifest", "EvalReport", "GeneratorConfig",
    "LossWeights", "ModelConfig", "PseudoLabelConfig", "ScribbleVCNet", "ScribbleVCSegmenter",
    "TrainConfig", "evaluate", "fit", "generate_sample", "load_checkpoint", "load_manifest",
    "make_arrays", "predict", "predict_proba", "save_checkpoint", "save_manifest",
    "scribble_from_mask", "synthesize_split",
]
