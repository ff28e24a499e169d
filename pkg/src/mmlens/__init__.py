"""Exact MinMax factorization of small ReLU ECG classifiers, with concept partitions and overlay figures."""

from .concepts import PartitionTree, check_partition_laws, partition_dataset, prune_empty
from .minmax import (AffineFunction, ExpansionConfig, MinMaxExpr, build_minmax, eval_minmax,
                     verify_equivalence)
from .network import ReluNetwork, default_architecture, embed, forward, forward_with_trace
from .training import TrainConfig, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "AffineFunction", "ExpansionConfig", "MinMaxExpr", "PartitionTree", "ReluNetwork", "TrainConfig",
    "build_minmax", "check_partition_laws", "default_architecture", "embed", "eval_minmax", "forward",
    "forward_with_trace", "gradient_check", "partition_dataset", "prune_empty", "train",
    "verify_equivalence",
]
