"""Tuned desk-scale benchmark: dataset, text head, baseline pretraining,
and robust fine-tuning presets sized for single-core CPU runs.

The undefended baseline mimics a web-scale contrastive encoder at toy
scale: it is pretrained to match each training image against its own
caption (a caption bank with one entry per image, cross-entropy over
the bank). Class information reaches the encoder only through the
shared class phrase inside each caption, so zero-shot classification
against the frozen class head emerges rather than being trained
directly. Nothing in pretraining rewards margin, which leaves the
baseline accurate on clean images and fragile under small l-inf
perturbations - the regime the robust fine-tuning presets start from.
"""

from __future__ import annotations

import torch

from .attacks import AttackConfig
from .captions import build_caption_bank
from .data import Dataset, DatasetSpec, ingest
from .encoder import TextHead, VisionEncoder
from .finetune import TrainConfig, finetune

EMBED_DIM = 64


def make_benchmark(
    n_train: int = 512, n_eval: int = 256, seed: int = 0
) -> tuple[Dataset, Dataset, TextHead]:
    """10-class small-image benchmark plus a frozen head with caption bank."""
    train = ingest(
        DatasetSpec(source="builtin_small_images", n_samples=n_train, seed=seed)
    )
    eval_set = ingest(
        DatasetSpec(
            source="builtin_small_images", n_samples=n_eval, seed=seed + 1000
        )
    )
    captions, _, _ = build_caption_bank(train.class_names)
    head = TextHead.build(train.class_names, captions=captions, dim=EMBED_DIM)
    return train, eval_set, head


def contrastive_captions(train_set: Dataset) -> tuple[Dataset, TextHead]:
    """Per-image caption bank for baseline pretraining.

    Each image gets its own caption built from its class name plus a
    unique sample index, and the returned dataset relabels image i with
    caption i. Cross-entropy over this bank is an image-to-text matching
    objective; the class name appears only as a shared phrase inside the
    captions.
    """
    names = train_set.class_names
    captions = [
        f"a photo of {names[int(k)]} sample {i}"
        for i, k in enumerate(train_set.labels)
    ]
    caption_head = TextHead.build(captions, dim=EMBED_DIM, prompt="{}")
    caption_set = Dataset(
        images=train_set.images,
        labels=torch.arange(len(train_set.images)),
        class_names=captions,
        spec=train_set.spec,
    )
    return caption_set, caption_head


def pretrain_config(seed: int = 0, steps: int = 400) -> TrainConfig:
    # Clean caption-matching pretraining: the inner attack takes zero steps.
    return TrainConfig(
        loss_kind="tecoa",
        epsilon_train=2 / 255,
        inner_attack=AttackConfig(epsilon=2 / 255, steps=0),
        lr_peak=2e-3,
        weight_decay=1e-4,
        warmup_steps=20,
        total_steps=steps,
        batch_size=64,
        seed=seed,
    )


def finetune_config(
    epsilon_train: float, seed: int = 0, steps: int = 800, stop_grad: bool = True
) -> TrainConfig:
    """Unsupervised adversarial fine-tuning preset.

    The inner attack maximizes embedding distance from the clean
    representation; the outer loss is the symmetric stop-gradient
    cosine loss between clean and adversarial views. No labels or
    captions are consumed.
    """
    return TrainConfig(
        loss_kind="simclip",
        stop_grad=stop_grad,
        epsilon_train=epsilon_train,
        inner_attack=AttackConfig(
            epsilon=epsilon_train,
            steps=10,
            objective="embedding_max",
            random_start=True,
        ),
        lr_peak=2e-5,
        weight_decay=1e-4,
        warmup_steps=20,
        total_steps=steps,
        batch_size=32,
        seed=seed,
    )


def ablation_config(
    stop_grad: bool, seed: int = 0, steps: int = 500
) -> TrainConfig:
    """Stop-gradient ablation sized so the collapse dynamics are visible.

    Starts from a pretrained encoder and uses plain SGD: the symmetric
    cosine loss without stop-grad has exactly twice the gradient of the
    stop-grad variant, so under a scale-sensitive optimizer the
    no-stop-grad run crosses into the collapse regime at a learning
    rate where the stop-grad run is stable. (An adaptive optimizer
    normalizes away the factor of two and the two settings follow
    identical trajectories.) A large training budget makes the inner
    attack strong enough that the loss moves quickly.
    """
    return TrainConfig(
        loss_kind="simclip",
        stop_grad=stop_grad,
        epsilon_train=16 / 255,
        inner_attack=AttackConfig(
            epsilon=16 / 255,
            steps=10,
            objective="embedding_max",
            random_start=True,
        ),
        optimizer_kind="plain_sgd",
        lr_peak=0.01,
        weight_decay=1e-4,
        warmup_steps=20,
        total_steps=steps,
        batch_size=32,
        seed=seed,
    )


def pretrain_baseline(
    train_set: Dataset, head: TextHead | None = None, seed: int = 0,
    steps: int = 400,
) -> VisionEncoder:
    """Train the undefended caption-matching baseline encoder.

    The head argument is ignored (kept for call-site compatibility);
    pretraining always builds its own per-image caption head via
    contrastive_captions.
    """
    caption_set, caption_head = contrastive_captions(train_set)
    torch.manual_seed(seed)
    encoder, _ = finetune(
        caption_set, pretrain_config(seed, steps), head=caption_head
    )
    return encoder


def finetune_robust(
    train_set: Dataset,
    head: TextHead,
    base_encoder: VisionEncoder,
    epsilon_train: float,
    seed: int = 0,
    steps: int = 800,
) -> VisionEncoder:
    torch.manual_seed(seed)
    encoder, _ = finetune(
        train_set,
        finetune_config(epsilon_train, seed, steps),
        head=head,
        init_encoder=base_encoder,
    )
    return encoder
