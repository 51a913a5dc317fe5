"""Masked-feature pretraining toolkit for 3D point clouds."""

from .cloud_io import PointCloud, TargetCache, TriangleMesh
from .decoder import Decoder, DecoderConfig, Prediction
from .encoder import BlockFeaturePair, Encoder, EncoderConfig
from .geometry import TargetFeatures, compute_targets
from .masking import MaskSplit, PatchSet, build_patches, select_mask
from .model import MaskedFeatureModel
from .rng import Rng
from .tensor import Tensor, backward, grad_check
from .training import LossWeights, TrainConfig, augment, loss, pretrain

__version__ = "0.1.0"

__all__ = [
    "PointCloud", "TargetCache", "TriangleMesh",
    "Decoder", "DecoderConfig", "Prediction",
    "BlockFeaturePair", "Encoder", "EncoderConfig",
    "TargetFeatures", "compute_targets",
    "MaskSplit", "PatchSet", "build_patches", "select_mask",
    "MaskedFeatureModel", "Rng", "Tensor", "backward", "grad_check",
    "LossWeights", "TrainConfig", "augment", "loss", "pretrain",
]
