"""Multi-task anti-causal toolkit: fit a shared neural structural model over
latent causes, mediating mechanisms, and outcomes, then invert it to recover
causes from observed outcomes.

The public surface re-exported here covers the whole pipeline: build a
graph spec and model, load or synthesize data, train, invert outcomes into
cause estimates, score the results, and persist everything reproducibly.
"""

from .data_io import (
    IngestionError,
    MultiTaskDataset,
    Normalizer,
    TaskTable,
    dataset_from_synthetic,
    discover_task_files,
    export_graph,
    fit_apply_normalizer,
    load_checkpoint,
    load_dataset,
    read_manifest,
    save_checkpoint,
    split_dataset,
    write_synthetic_dataset,
)
from .diffcore import (
    GradientTape,
    OptimizerState,
    Tensor,
    adam_step,
    as_tensor,
    finite_difference_check,
)
from .errors import (
    AnticausalError,
    CheckpointError,
    ContractError,
    DivergedError,
    InvalidSpecError,
    TaskIndexError,
)
from .evalsuite import (
    ExperimentPlan,
    MetricReport,
    copy_shared,
    edge_scores,
    learned_edge_set,
    plan_from_dict,
    reconstruction_error,
    run_experiment,
    subset_tasks,
    true_edge_set,
)
from .graph import (
    AdjacencyModel,
    GraphSpec,
    acyclicity_penalty,
    build_structure,
    harden,
    make_spec,
    soft_adjacency,
)
from .map_infer import MapConfig, MapResult, map_estimate, map_estimate_batch
from .oracle import (
    GroundTruthSem,
    SyntheticDataset,
    closed_form_map,
    load_linear_model,
    make_ground_truth,
    sample_dataset,
    true_adjacency,
)
from .sem import (
    SemModel,
    batch_forward_modes,
    build_model,
    forward_modes,
    instantiate_model,
    joint_log_density,
    mechanism_embedding,
    node_log_density,
    parameter_groups,
)
from .training import TrainConfig, TrainReport, train, validation_nll

__version__ = "0.1.0"

__all__ = [
    "AdjacencyModel",
    "AnticausalError",
    "CheckpointError",
    "ContractError",
    "DivergedError",
    "ExperimentPlan",
    "GradientTape",
    "GraphSpec",
    "GroundTruthSem",
    "IngestionError",
    "InvalidSpecError",
    "MapConfig",
    "MapResult",
    "MetricReport",
    "MultiTaskDataset",
    "Normalizer",
    "OptimizerState",
    "SemModel",
    "SyntheticDataset",
    "TaskIndexError",
    "TaskTable",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "acyclicity_penalty",
    "adam_step",
    "as_tensor",
    "batch_forward_modes",
    "build_model",
    "build_structure",
    "closed_form_map",
    "copy_shared",
    "dataset_from_synthetic",
    "discover_task_files",
    "edge_scores",
    "export_graph",
    "finite_difference_check",
    "fit_apply_normalizer",
    "forward_modes",
    "harden",
    "instantiate_model",
    "joint_log_density",
    "learned_edge_set",
    "load_checkpoint",
    "load_dataset",
    "load_linear_model",
    "make_ground_truth",
    "make_spec",
    "map_estimate",
    "map_estimate_batch",
    "mechanism_embedding",
    "node_log_density",
    "parameter_groups",
    "plan_from_dict",
    "read_manifest",
    "reconstruction_error",
    "run_experiment",
    "sample_dataset",
    "save_checkpoint",
    "soft_adjacency",
    "split_dataset",
    "subset_tasks",
    "train",
    "true_adjacency",
    "true_edge_set",
    "validation_nll",
    "write_synthetic_dataset",
]
