"""Layer-wise personalized federated learning on a small numpy engine.

The package simulates a federation in one process: a Dirichlet partitioner
carves a dataset into skewed client shards, a minimal dense/conv engine
trains local models, and pluggable strategies decide how clients initialize
from, train against and upload to the shared global model. Ships the
adaptive layer-wise pipeline (accuracy-guided head blending, depth- and
gradient-aware learning rates, change-magnitude upload masking) alongside
plain weighted averaging and frozen-head baselines, plus linear-CKA tooling
for comparing layer representations across clients.
"""

from .config import ExperimentConfig, parse_config
from .data import (
    ClientDataset,
    Dataset,
    PartitionSpec,
    generate_synthetic,
    load_csv,
    load_idx,
    partition_dirichlet,
)
from .errors import (
    AggregationError,
    ConfigurationError,
    IngestionError,
    LayerFLError,
    NumericError,
    PartitionError,
)
from .mechanisms import (
    ClientState,
    LrSchedule,
    MaskSet,
    adaptive_lr,
    apply_mask,
    build_mask,
    full_mask,
    init_local_model,
    local_train,
    update_prev_accuracy,
    upload_fraction,
)
from .metrics import (
    RoundReport,
    SimilarityMatrix,
    cross_client_layer_similarity,
    evaluate,
    linear_cka,
)
from .nn import (
    Batch,
    Conv2d,
    Dense,
    Flatten,
    Network,
    ParamSet,
    ReLU,
    UnitTensors,
    build_cnn,
    build_mlp,
    finite_difference_check,
    sgd_step,
)
from .server import (
    ExperimentResult,
    GlobalState,
    UploadPayload,
    aggregate,
    run_experiment,
    run_round,
    sample_clients,
)
from .strategies import Strategy, fedavg_strategy, fedper_strategy, flayer_strategy

__version__ = "0.1.0"
