"""Multi-stage long-tail training: joint pretraining, logit re-scaling, self-distillation."""

from .data import (
    ImbalanceProfile,
    LongTailedDataset,
    assign_split,
    exponential_profile,
    make_synthetic_longtail,
    pareto_profile,
    subsample_to_profile,
)
from .distill import (
    SoftLabelSet,
    aggregate_distilled_distribution,
    apply_distill_mode,
    generate_soft_labels,
    hybrid_loss,
    kd_loss,
    softmax_with_temperature,
)
from .evaluation import EvalReport, distribution_report, evaluate
from .models import (
    LWSScales,
    ModelBundle,
    ModelConfig,
    freeze_backbone_train_scales,
    load_bundle,
    lws_forward,
    reinitialize,
    save_bundle,
)
from .pipeline import (
    MasterConfig,
    RunManifest,
    StageConfig,
    TrainingDiverged,
    load_master_config,
    run_full,
    run_stage1,
    run_stage2,
    run_stage3,
    run_stage4,
)
from .sampling import SamplerSpec, class_balanced_indices, epoch_indices, instance_balanced_indices
from .selfsup import (
    ContrastiveState,
    info_nce_loss,
    momentum_update,
    queue_push,
    rotate_image,
    rotation_loss,
    stage1_joint_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ContrastiveState",
    "EvalReport",
    "ImbalanceProfile",
    "LWSScales",
    "LongTailedDataset",
    "MasterConfig",
    "ModelBundle",
    "ModelConfig",
    "RunManifest",
    "SamplerSpec",
    "SoftLabelSet",
    "StageConfig",
    "TrainingDiverged",
    "aggregate_distilled_distribution",
    "apply_distill_mode",
    "assign_split",
    "class_balanced_indices",
    "distribution_report",
    "epoch_indices",
    "evaluate",
    "exponential_profile",
    "freeze_backbone_train_scales",
    "generate_soft_labels",
    "hybrid_loss",
    "info_nce_loss",
    "instance_balanced_indices",
    "kd_loss",
    "load_bundle",
    "load_master_config",
    "lws_forward",
    "make_synthetic_longtail",
    "momentum_update",
    "pareto_profile",
    "queue_push",
    "reinitialize",
    "rotate_image",
    "rotation_loss",
    "run_full",
    "run_stage1",
    "run_stage2",
    "run_stage3",
    "run_stage4",
    "save_bundle",
    "softmax_with_temperature",
    "stage1_joint_loss",
    "subsample_to_profile",
]
