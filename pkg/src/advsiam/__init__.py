"""Desk-scale lab for siamese adversarial fine-tuning of a toy vision
encoder, with an l-inf attack engine and robustness evaluation protocols."""

from .attacks import (
    AttackConfig,
    AttackResult,
    ObjectiveContext,
    apgd,
    ce_objective,
    dlr_targeted_objective,
    embedding_objectives,
    linf_project,
    pgd,
)
from .cider import CiderCorpus, cider_score
from .data import Dataset, DatasetSpec, ingest
from .encoder import (
    ArchSpec,
    TextHead,
    VisionEncoder,
    encode,
    load_checkpoint,
    save_checkpoint,
    zero_shot_logits,
)
from .errors import (
    AdvSiamError,
    CheckpointDigestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    CollapseError,
    ConfigError,
    DegenerateEmbeddingError,
    InputSpecError,
    UnsupportedObjectiveError,
)
from .evaluation import (
    EvalReport,
    TargetedAttackReport,
    accuracy,
    eval_zero_shot,
    retrieve_caption,
    targeted_attack_eval,
)
from .finetune import (
    TrainConfig,
    TrainState,
    finetune,
    hyperparameter_sweep,
    lr_at,
    run_steps,
    train_step,
)
from .losses import (
    CollapseDetector,
    LossValue,
    collapse_metric,
    fare_loss,
    neg_cosine,
    simclip_loss,
    tecoa_loss,
)
from .records import RunRecord

__version__ = "0.1.0"
