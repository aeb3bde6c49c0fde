"""Federated-learning simulator with activation-geometry divergence monitoring."""

from .anomaly import RoundScores, flag_outliers, robust_scores
from .data_fabric import (
    ClientShard,
    DataError,
    Dataset,
    PartitionConfig,
    PerturbationSpec,
    apply_perturbations,
    dirichlet_partition,
    load_idx_dataset,
    select_probe_set,
    synth_dataset,
)
from .fed_sim import (
    FedConfig,
    RoundRecord,
    build_state,
    fedavg,
    local_train,
    run_experiment,
    run_round,
)
from .geometry import (
    ActivationPatternSet,
    AffinityMatrix,
    DivergenceConfig,
    LayerDistances,
    affinity_matrix,
    client_divergence,
    extract_patterns,
    hierarchical_divergence,
    layer_distance,
)
from .nn_core import (
    ForwardTrace,
    Gradients,
    MlpModel,
    NumericError,
    SgdState,
    forward,
    init_model,
    load_model,
    loss_and_gradients,
    save_model,
    sgd_step,
)

__version__ = "0.1.0"
