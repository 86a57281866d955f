"""Convex and neighborhood-attention optical-flow upsampling on a small numpy autograd core."""

from .attention import NATBlock, NeighborhoodAttention, na_aggregate, na_maps
from .convex import ConvexUpsampler, LocalAttentionMaps, convex_aggregate
from .errors import CheckpointError, ConfigError, DimensionError, FloError, GraphError, TrainingDivergedError
from .evaluation import DetailBucketReport, bucket_report, detail_map, epe
from .hull import hull_representable, representability_study
from .pipeline import FlowModel, RefinementEmulator, emulate_refinement
from .synthesis import AugmentConfig, augment, gen_sample
from .tcu import TCU, ContextEncoder, UpsamplerConfig
from .tensor import Tensor, default_dtype, no_grad
from .training import TrainConfig, continue_without_interpolation, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CheckpointError", "ConfigError", "ContextEncoder", "ConvexUpsampler", "DetailBucketReport",
    "DimensionError", "FloError", "FlowModel", "GraphError", "LocalAttentionMaps", "NATBlock",
    "NeighborhoodAttention", "RefinementEmulator", "TCU", "Tensor", "TrainConfig", "TrainingDivergedError",
    "UpsamplerConfig", "augment", "bucket_report", "continue_without_interpolation", "convex_aggregate",
    "default_dtype", "detail_map", "emulate_refinement", "epe", "gen_sample", "hull_representable",
    "na_aggregate", "na_maps", "no_grad", "representability_study", "train",
]
