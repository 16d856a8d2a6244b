"""Desk-scale lab for fraud detection on dynamic heterogeneous graphs.

The package turns an event log (targets linked to shared entities, stamped
with week/day) into an unrolled graph whose snapshots are tied together by
per-entity hub nodes, and trains graph neural models on it with a small taped
autodiff engine.  A feature-engineering pipeline plus logistic baseline and a
command-line interface round out the lab.
"""

__version__ = "0.1.0"

from .data import (
    GeneratorConfig,
    PRESETS,
    Split,
    chronological_split,
    generate,
    preset_config,
    read_dataset,
    write_dataset,
)
from .diachronic import (
    DiachronicConfig,
    DiachronicParams,
    build_x_de,
    deemb,
    write_embedding_csv,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergenceError,
    MetricError,
    ValidationError,
)
from .features import (
    FEATURE_NAMES,
    FeatureImportance,
    FeatureRow,
    LinearModel,
    extract_features,
    feature_matrix,
    fit_linear,
    permutation_importance,
    read_feature_rows_csv,
    write_feature_rows_csv,
    write_importance_csv,
)
from .graph import (
    EntityRef,
    EventRecord,
    LabelSet,
    UnrolledGraph,
    build_unrolled_graph,
    directed_edges,
    graph_statistics,
    normalized_adjacency,
)
from .metrics import average_precision, roc_auc
from .models import (
    DATASET_KINDS,
    GraphNodeClassifier,
    ModelConfig,
    TrainReport,
    VARIANTS,
    assemble,
    default_config,
    eval_scores,
    infer_dataset_kind,
    load_checkpoint,
    save_checkpoint,
    summarize_reports,
    task_loss,
    train,
    train_seeds,
)

__all__ = [
    "__version__",
    "GeneratorConfig",
    "PRESETS",
    "Split",
    "chronological_split",
    "generate",
    "preset_config",
    "read_dataset",
    "write_dataset",
    "DiachronicConfig",
    "DiachronicParams",
    "build_x_de",
    "deemb",
    "write_embedding_csv",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "MetricError",
    "ValidationError",
    "FEATURE_NAMES",
    "FeatureImportance",
    "FeatureRow",
    "LinearModel",
    "extract_features",
    "feature_matrix",
    "fit_linear",
    "permutation_importance",
    "read_feature_rows_csv",
    "write_feature_rows_csv",
    "write_importance_csv",
    "EntityRef",
    "EventRecord",
    "LabelSet",
    "UnrolledGraph",
    "build_unrolled_graph",
    "directed_edges",
    "graph_statistics",
    "normalized_adjacency",
    "average_precision",
    "roc_auc",
    "DATASET_KINDS",
    "GraphNodeClassifier",
    "ModelConfig",
    "TrainReport",
    "VARIANTS",
    "assemble",
    "default_config",
    "eval_scores",
    "infer_dataset_kind",
    "load_checkpoint",
    "save_checkpoint",
    "summarize_reports",
    "task_loss",
    "train",
    "train_seeds",
]
