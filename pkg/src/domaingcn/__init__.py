"""Domain-knowledge-weighted graph classification of whole-slide patch graphs.

Pure numpy: a small reverse-mode autodiff core, k-NN patch graphs with
sinusoidal positional codes, ulcer-weighted residual softmax-aggregation
message passing with attention pooling, and a stratified cross-validation
harness with a synthetic planted-signal generator.
"""

__version__ = "0.1.0"

from .config import HyperParams, TrainConfig, WeightRule
from .errors import DomainGCNError
from .graph import PatchRecord, WsiGraph, assemble_graph, knn_edges, positional_encoding
from .model import ModelParams, forward, init_params
from .training import FoldReport, run_cv, stratified_kfold
from .weights import apply_weights, high_weight_fraction, ulcer_weight

__all__ = [
    "DomainGCNError",
    "FoldReport",
    "HyperParams",
    "ModelParams",
    "PatchRecord",
    "TrainConfig",
    "WeightRule",
    "WsiGraph",
    "apply_weights",
    "assemble_graph",
    "forward",
    "high_weight_fraction",
    "init_params",
    "knn_edges",
    "positional_encoding",
    "run_cv",
    "stratified_kfold",
    "ulcer_weight",
]
