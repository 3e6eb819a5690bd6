"""Context-conditioned Bayesian low-rank adapters for multimodal classification.

A frozen toy transformer gets LoRA updates ``B E A`` whose r x r core
``E`` is drawn from a Gaussian posterior conditioned per token on the
text (``z = A x``) and on audio context (pooled or cross-attended).
"""

from .adapters import VARIANTS, AdapterConfig
from .backbone import BackboneConfig, build_frozen_backbone
from .data import Dataset, MultimodalSample, SynthConfig, generate, load, save
from .errors import CaliberError
from .evaluation import auc, auc_multiclass, ece, entropy_split, predict_mc
from .model import CaliberModel, KeyedNoise, ModelConfig, ZeroNoise
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .variational import PriorConfig

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "AdapterConfig", "BackboneConfig", "build_frozen_backbone", "Dataset",
    "MultimodalSample", "SynthConfig", "generate", "load", "save", "CaliberError", "auc",
    "auc_multiclass", "ece", "entropy_split", "predict_mc", "CaliberModel", "KeyedNoise",
    "ModelConfig", "ZeroNoise", "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "PriorConfig",
]
