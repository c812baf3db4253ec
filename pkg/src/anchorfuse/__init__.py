"""Gene-partitioned dual-stream batch integration for single-cell expression data."""

from .data import EmbeddingMatrix, ExpressionDataset, GenePartition, MetricsReport
from .estimator import AnchorFuseIntegrator
from .metrics import EvalConfig, evaluate
from .partition import QuadrantGeneSelector
from .preprocess import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "AnchorFuseIntegrator",
    "EmbeddingMatrix",
    "EvalConfig",
    "ExpressionDataset",
    "GenePartition",
    "MetricsReport",
    "QuadrantGeneSelector",
    "SyntheticSpec",
    "evaluate",
    "generate_synthetic",
]
