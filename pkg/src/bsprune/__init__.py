"""Basis scaling decomposition, basis pruning and double pruning of CNNs,
on a small numpy engine."""
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import conv_layer_count, cost_report, count_flops, count_params, trainable_param_count
from .data import Dataset, load_mnist_idx, synth_dataset, train_val_split
from .decomposition import decompose_all, decompose_conv, fuse_all
from .errors import (BsPruneError, CheckpointError, ConfigError, ConvergenceError, DataError,
                     DecompositionError, NumericError, PruningError, ShapeError)
from .estimator import BasisPruningClassifier
from .execution import forward, loss_and_grads, predict_logits
from .factorization import WeightFactorization, compact_svd
from .graph import LayerNode, NetGraph, init_params
from .head import replace_head
from .importance import ImportanceTable, global_threshold, score
from .pipeline import RunConfig, accounting, emit_report, run_procedure
from .pruner import PruneMask, basis_prune, double_prune, prune_report
from .templates import TEMPLATES, build_architecture
from .training import TrainConfig, evaluate, recompute_bn_stats, train_stage

__version__ = "0.1.0"

__all__ = [
    "BasisPruningClassifier", "BsPruneError", "CheckpointError", "ConfigError", "ConvergenceError",
    "DataError", "Dataset", "DecompositionError", "ImportanceTable", "LayerNode", "NetGraph",
    "NumericError", "PruneMask", "PruningError", "RunConfig", "ShapeError", "TEMPLATES",
    "TrainConfig", "WeightFactorization", "accounting", "basis_prune", "build_architecture",
    "compact_svd", "conv_layer_count", "cost_report", "count_flops", "count_params",
    "decompose_all", "decompose_conv", "double_prune", "emit_report", "evaluate", "forward",
    "fuse_all", "global_threshold", "init_params", "load_checkpoint", "load_mnist_idx",
    "loss_and_grads", "predict_logits", "prune_report", "recompute_bn_stats", "replace_head",
    "run_procedure", "save_checkpoint", "score", "synth_dataset", "train_stage",
    "train_val_split", "trainable_param_count",
]
