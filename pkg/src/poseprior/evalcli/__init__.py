"""CLI, checkpoint/dataset I/O, metrics, and CSV reporting."""

from .checkpoint import (
    CheckpointError,
    load_any,
    load_checkpoint,
    load_flow,
    load_lra,
    load_mlp,
    save_checkpoint,
    save_flow,
    save_lra,
    save_mlp,
)
from .cli import main
from .metrics import (
    MetricsReport,
    aggregate_traces,
    cosine_distances,
    evaluate,
    ood_eval,
    oracle_distance,
    sinkhorn_distance,
    write_report_csv,
)

__all__ = [
    "CheckpointError", "MetricsReport", "aggregate_traces", "cosine_distances",
    "evaluate", "load_any", "load_checkpoint", "load_flow", "load_lra", "load_mlp",
    "main", "ood_eval", "oracle_distance", "save_checkpoint", "save_flow",
    "save_lra", "save_mlp", "sinkhorn_distance", "write_report_csv",
]
