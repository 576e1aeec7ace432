"""Deterministic desk-scale federated learning simulator built around
optimal-transport neuron alignment for heterogeneous client submodels."""

from .alignment import (
    AlignmentResult,
    FusionConfig,
    aggregate,
    baseline_extract,
    lift_to_global,
    personalize_submodel,
)
from .data import (
    LabeledDataset,
    PartitionSpec,
    TaskConfig,
    gen_feature_shift,
    gen_synthetic,
    load_idx,
    partition,
)
from .federation import (
    ClientState,
    Federation,
    FederationConfig,
    MethodSpec,
    PartitionParams,
    RoundRecord,
    positional_aggregate,
    resample_rates,
    run_fedavg_reference,
    run_federation,
)
from .localtrain import LocalTrainConfig, LocalTrainReport, drift_penalty, local_train
from .nn import (
    LayerStack,
    WidthSchedule,
    evaluate,
    forward,
    init_model,
    load_model,
    make_submodel_shape,
    save_model,
)
from .ot import OtConfig, TransportPlan, column_normalize, solve_exact, solve_sinkhorn

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult",
    "ClientState",
    "Federation",
    "FederationConfig",
    "FusionConfig",
    "LabeledDataset",
    "LayerStack",
    "LocalTrainConfig",
    "LocalTrainReport",
    "MethodSpec",
    "OtConfig",
    "PartitionParams",
    "PartitionSpec",
    "RoundRecord",
    "TaskConfig",
    "TransportPlan",
    "WidthSchedule",
    "aggregate",
    "baseline_extract",
    "column_normalize",
    "drift_penalty",
    "evaluate",
    "forward",
    "gen_feature_shift",
    "gen_synthetic",
    "init_model",
    "lift_to_global",
    "load_idx",
    "load_model",
    "local_train",
    "make_submodel_shape",
    "partition",
    "personalize_submodel",
    "positional_aggregate",
    "resample_rates",
    "run_fedavg_reference",
    "run_federation",
    "save_model",
    "solve_exact",
    "solve_sinkhorn",
]
