"""Desk-scale text-conditioned diffusion with knowledge-weighted training."""

from . import errors
from .autodiff import Graph, Tensor, backward, finite_difference_check, forward_eval
from .conditioning import (
    AttentionScale,
    ConditioningInput,
    KnowledgePolicy,
    LossWeightMap,
    Vocabulary,
    build_attention_scale,
    build_loss_weight,
    encode_text,
    tokenize,
    tokenize_with_tags,
)
from .denoiser import AttentionCapture, ModelDims, init_denoiser, predict_noise
from .experts import ExpertBank, expert_index, init_bank, partition_timesteps, route
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evalsynth import (
    binding_accuracy,
    evaluate,
    frechet_gaussian_distance,
    pareto_sweep,
    toy_fid,
)
from .sampling import (
    SampleResult,
    attention_map,
    capture_attention,
    cfg_combine,
    ddim_trajectory,
    ddpm_trajectory,
    entropy_series,
    sample,
    sample_ddim,
    sample_ddpm,
    spatial_entropy,
)
from .schedule import (
    NoiseSchedule,
    build_linear,
    ddim_step,
    ddpm_step,
    diffuse_step,
    predict_x0,
    q_sample,
)
from .seeding import derive_rng
from .synthdata import SceneSpec, generate_dataset, load_dataset, save_dataset
from .training import TrainConfig, TrainResult, train, training_loss, training_loss_graph

__version__ = "0.1.0"

__all__ = [
    "AttentionCapture", "AttentionScale", "Checkpoint", "ConditioningInput",
    "ExpertBank", "Graph", "KnowledgePolicy", "LossWeightMap", "ModelDims",
    "NoiseSchedule", "SampleResult", "SceneSpec", "Tensor", "TrainConfig",
    "TrainResult", "Vocabulary", "attention_map", "backward",
    "binding_accuracy", "build_attention_scale", "build_linear",
    "build_loss_weight", "capture_attention", "cfg_combine", "ddim_step",
    "ddim_trajectory", "ddpm_step", "ddpm_trajectory", "derive_rng",
    "diffuse_step", "encode_text", "entropy_series", "errors", "evaluate",
    "expert_index", "finite_difference_check", "forward_eval",
    "frechet_gaussian_distance", "generate_dataset", "init_bank",
    "init_denoiser", "load_checkpoint", "load_dataset", "pareto_sweep",
    "partition_timesteps", "predict_noise", "predict_x0", "q_sample", "route",
    "sample", "sample_ddim", "sample_ddpm", "save_checkpoint", "save_dataset",
    "spatial_entropy", "tokenize", "tokenize_with_tags", "toy_fid", "train",
    "training_loss", "training_loss_graph",
]
