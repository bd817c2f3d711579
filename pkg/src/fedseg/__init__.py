"""Desk-scale federated segmentation simulator with adaptive aggregation weights."""

from .aggregation import (
    AggregationWeights,
    LossGapVector,
    aggregate,
    compute_loss_gaps,
    init_weights,
    step_size,
    update_weights,
)
from .federation import (
    ClientHandle,
    FederationConfig,
    RoundReport,
    TrainingResult,
    evaluate_loss,
    run_federated_training,
    run_local_only,
    run_round,
)
from .harness import ExperimentConfig, MetricsRow, emit_table, plot_weight_trajectories, run_experiment
from .losses import MaskPair, bce_loss, dice_bce_grad, dice_bce_loss, dice_loss
from .metrics import (
    ConfusionCounts,
    EmptyMaskError,
    VoxelMask,
    assd,
    confusion_counts,
    dice,
    hd95,
    jaccard,
    precision,
    recall,
    surface_voxels,
)
from .params import ParamVector, load_checkpoint, save_checkpoint
from .synthdata import (
    CenterSpec,
    ClientDataset,
    default_seven_centers,
    export_dataset,
    generate_center,
    load_dataset,
    split_dataset,
)
from .trainer import (
    OptimizerState,
    TrainerArchitecture,
    adamw_step,
    forward,
    init_params,
    loss_and_grad,
    train_local,
)

__version__ = "0.1.0"
