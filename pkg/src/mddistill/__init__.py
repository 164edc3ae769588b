"""Multimodal dataset distillation on paired embeddings.

Distills a small set of synthetic image-text representation pairs (plus soft
labels and inner learning rates) by matching the projection-head trajectories
of experts trained on real pairs, with in-batch representation blending.
"""

from .blend import BlendConfig, noise_perturb, rep_blend
from .buffer import ExpertTrajectory, generate_trajectory, load_trajectory, sample_segment, save_trajectory
from .data import PairedEmbeddingSet, gen_toy_dataset, load_embeddings, save_embeddings, split, toy_benchmark
from .distill import (
    DistillConfig,
    SyntheticDataset,
    distill_step,
    init_synthetic,
    inner_unroll,
    load_synthetic,
    run_distillation,
    save_synthetic,
)
from .errors import (
    ContractError,
    DegenerateBufferError,
    DegenerateSegmentError,
    DimensionError,
    FormatError,
    MDDError,
    NumericError,
    StateError,
)
from .losses import (
    LossConfig,
    SoftLabelMatrix,
    infonce_loss,
    matching_loss_asymmetric,
    matching_loss_symmetric,
    wbce_loss,
    wbce_weights,
)
from .metrics import (
    MetricsReport,
    concentration_ratio,
    evaluate_distilled,
    intra_modal_sim,
    modality_gap,
    proposition_check,
    recall_at_k,
    stripe_statistic,
    update_norms,
)
from .model import ProjectionHead, TrainableEncoder
from .tape import GradMatrix, Tape

__version__ = "0.1.0"

__all__ = [
    "BlendConfig",
    "noise_perturb",
    "rep_blend",
    "ExpertTrajectory",
    "generate_trajectory",
    "load_trajectory",
    "sample_segment",
    "save_trajectory",
    "PairedEmbeddingSet",
    "gen_toy_dataset",
    "load_embeddings",
    "save_embeddings",
    "split",
    "toy_benchmark",
    "DistillConfig",
    "SyntheticDataset",
    "distill_step",
    "init_synthetic",
    "inner_unroll",
    "load_synthetic",
    "run_distillation",
    "save_synthetic",
    "ContractError",
    "DegenerateBufferError",
    "DegenerateSegmentError",
    "DimensionError",
    "FormatError",
    "MDDError",
    "NumericError",
    "StateError",
    "LossConfig",
    "SoftLabelMatrix",
    "infonce_loss",
    "matching_loss_asymmetric",
    "matching_loss_symmetric",
    "wbce_loss",
    "wbce_weights",
    "MetricsReport",
    "concentration_ratio",
    "evaluate_distilled",
    "intra_modal_sim",
    "modality_gap",
    "proposition_check",
    "recall_at_k",
    "stripe_statistic",
    "update_norms",
    "ProjectionHead",
    "TrainableEncoder",
    "GradMatrix",
    "Tape",
]
