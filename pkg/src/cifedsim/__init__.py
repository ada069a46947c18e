"""Desk-scale simulator for class-imbalanced federated source-free adaptation.

Feature-space datasets with controllable domain gaps and class imbalance, a
from-scratch trainable head on frozen embeddings, federated adaptation rounds
with several client objectives and aggregation rules, and macro-recall plus
cost reporting.
"""

from .feature_store import (
    FeatureDataset,
    SynthSpec,
    generate_synthetic,
    identity_transform,
    read_fedf,
    rotation_transform,
    write_fedf,
)
from .federation import (
    FedConfig,
    RoundLog,
    fedavg_aggregate,
    local_adapt,
    run_adaptation,
    select_best,
)
from .head_model import (
    BatchNormState,
    HeadParams,
    OptimizerState,
    backward,
    deserialize_head,
    forward,
    init_etf,
    serialize_head,
    sgd_step,
)
from .losses import (
    FeatureBank,
    build_feature_bank,
    balanced_softmax_ce,
    ce_smooth,
    im_loss,
    isfda_correct_labels,
    knn_consistency_loss,
    prox_penalty,
    shot_pseudo_labels,
)
from .metrics_costs import (
    CostLedger,
    confusion_matrix,
    cost_report,
    evaluate_mar,
    gap_report,
    macro_recall,
)
from .partitioner import (
    ClientShard,
    ImbalanceProfile,
    PartitionPlan,
    build_partition_plan,
    dirichlet_proportions,
    make_source_split,
    make_target_split,
)
from .source_trainer import SourceConfig, balanced_batches, train_source

__version__ = "0.1.0"
