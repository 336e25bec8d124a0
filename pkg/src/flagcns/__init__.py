"""Federated graph-convolutional architecture search over horizontally split graphs."""

from .estimators import FederatedArchitectureSearch, FederatedGCNClassifier
from .graph import GraphBundle, GraphShard, load_bundle, partition_edgecut, partition_random
from .run import RunConfig, RunReport, cmd_ablation, cmd_baseline_random, cmd_flacc, cmd_search, cmd_train_arch
from .space import ArchCode, SpaceConfig

__version__ = "0.1.0"

__all__ = [
    "ArchCode",
    "FederatedArchitectureSearch",
    "FederatedGCNClassifier",
    "GraphBundle",
    "GraphShard",
    "RunConfig",
    "RunReport",
    "SpaceConfig",
    "cmd_ablation",
    "cmd_baseline_random",
    "cmd_flacc",
    "cmd_search",
    "cmd_train_arch",
    "load_bundle",
    "partition_edgecut",
    "partition_random",
]
