"""Multimodal surgical skill regression with divergence-regulated attention fusion."""

from .config import ModelConfig
from .data import MODALITIES, VideoRecord
from .dra import DraParams, dra_forward
from .evaluation import (
    fisher_z_aggregate,
    heads_ablation,
    mae_metric,
    make_folds,
    run_cross_validation,
    spearman_scc,
)
from .fusion import SurgFusionNet, multimodal_forward
from .synthdata import SynthConfig, generate_dataset, linear_probe_scc
from .tensor import Tensor
from .training import LabelScaler, PhaseConfig, TrainConfig, predict, train_two_phase

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "DraParams",
    "LabelScaler",
    "ModelConfig",
    "PhaseConfig",
    "SurgFusionNet",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "VideoRecord",
    "dra_forward",
    "fisher_z_aggregate",
    "generate_dataset",
    "heads_ablation",
    "linear_probe_scc",
    "mae_metric",
    "make_folds",
    "multimodal_forward",
    "predict",
    "run_cross_validation",
    "spearman_scc",
    "train_two_phase",
]
