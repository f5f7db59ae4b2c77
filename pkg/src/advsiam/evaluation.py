"""Clean and robust evaluation: zero-shot accuracy under attack,
caption retrieval as the measurable stand-in for caption generation,
targeted-attack success accounting, and the captioning metric glue.

All evaluation is read-only with respect to the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackConfig, ObjectiveContext, apgd
from .cider import CiderCorpus, cider_score
from .encoder import TextHead, VisionEncoder, encode, zero_shot_logits
from .errors import ConfigError, UnsupportedObjectiveError

ATTACK_KINDS = ("apgd_dlr_targeted", "apgd_ce")


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: dict  # epsilon -> fraction
    attack_config_digest: str
    sample_count: int
    attacked_count: int

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": {str(k): v for k, v in self.robust_accuracy.items()},
            "attack_config_digest": self.attack_config_digest,
            "sample_count": self.sample_count,
            "attacked_count": self.attacked_count,
        }


@dataclass
class TargetedAttackReport:
    per_target: dict  # target string -> (successes, attacked)
    mean_success_rate: float
    average_cider: float
    epsilon: float
    steps: int

    def to_dict(self) -> dict:
        return {
            "per_target": {k: list(v) for k, v in self.per_target.items()},
            "mean_success_rate": self.mean_success_rate,
            "average_cider": self.average_cider,
            "epsilon": self.epsilon,
            "steps": self.steps,
        }


def accuracy(predictions, labels) -> float:
    """Exact fraction of matching entries."""
    predictions = torch.as_tensor(predictions)
    labels = torch.as_tensor(labels)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"length mismatch: {tuple(predictions.shape)} vs {tuple(labels.shape)}"
        )
    return float((predictions == labels).sum()) / labels.numel()


def _predict(
    encoder: VisionEncoder, images: torch.Tensor, head: TextHead, temperature: float
) -> torch.Tensor:
    with torch.no_grad():
        emb = encode(encoder, images, normalize=True)
        return zero_shot_logits(emb, head, temperature).argmax(dim=1)


def eval_zero_shot(
    encoder: VisionEncoder,
    head: TextHead,
    dataset,
    eps_list=(2 / 255, 4 / 255, 8 / 255),
    attack_kind: str = "apgd_dlr_targeted",
    attack_steps: int = 100,
    attack_subset: int | None = 500,
    temperature: float = 0.07,
    seed: int = 0,
) -> EvalReport:
    """Clean accuracy on the full set, robust accuracy per epsilon on a
    deterministic random subset (the attacked slice)."""
    if attack_kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack_kind {attack_kind!r}")
    if attack_kind == "apgd_dlr_targeted" and head.num_classes < 4:
        raise UnsupportedObjectiveError(
            "targeted DLR evaluation needs at least 4 classes"
        )
    clean_preds = _predict(encoder, dataset.images, head, temperature)
    clean_acc = accuracy(clean_preds, dataset.labels)

    n = len(dataset)
    if attack_subset is not None and attack_subset < n:
        idx = np.random.default_rng(seed).choice(n, size=attack_subset, replace=False)
        subset = dataset.subset(np.sort(idx))
    else:
        subset = dataset
    sub_clean_preds = _predict(encoder, subset.images, head, temperature)

    robust = {}
    digest = ""
    for eps in eps_list:
        if eps == 0:
            robust[eps] = accuracy(sub_clean_preds, subset.labels)
            continue
        config = AttackConfig(
            epsilon=eps,
            steps=attack_steps,
            objective="dlr_targeted" if attack_kind == "apgd_dlr_targeted" else "ce_untargeted",
            temperature=temperature,
            seed=seed,
        )
        digest = _attack_digest(config)
        ctx = ObjectiveContext(head=head, labels=subset.labels)
        if config.objective == "dlr_targeted":
            ctx.target_labels = _runner_up_targets(
                encoder, subset.images, head, temperature
            )
        result = apgd(encoder, subset.images, config, ctx)
        adv_preds = _predict(encoder, result.adversarial, head, temperature)
        robust[eps] = accuracy(adv_preds, subset.labels)
    return EvalReport(
        clean_accuracy=clean_acc,
        robust_accuracy=robust,
        attack_config_digest=digest,
        sample_count=n,
        attacked_count=len(subset),
    )


def _runner_up_targets(encoder, images, head, temperature) -> torch.Tensor:
    """Standard single-target choice: the second most likely clean class."""
    with torch.no_grad():
        emb = encode(encoder, images, normalize=True)
        logits = zero_shot_logits(emb, head, temperature)
    return logits.argsort(dim=1, descending=True)[:, 1]


def _attack_digest(config: AttackConfig) -> str:
    from .records import config_digest

    return config_digest(config.to_dict())


def retrieve_caption(
    encoder: VisionEncoder, images: torch.Tensor, head: TextHead
) -> torch.Tensor:
    """Caption-bank retrieval: argmax cosine similarity per image.

    Ties break toward the lowest caption id. Deterministic.
    """
    if head.caption_embeddings is None or not head.caption_bank:
        raise ConfigError("text head has no caption bank")
    with torch.no_grad():
        emb = encode(encoder, images, normalize=True)
        sims = emb @ head.caption_embeddings.to(emb.dtype).T
    return torch.from_numpy(sims.numpy().argmax(axis=1))


def targeted_attack_eval(
    encoder: VisionEncoder,
    images: torch.Tensor,
    targets: torch.Tensor,
    head: TextHead,
    config: AttackConfig,
    references: dict | None = None,
    image_ids=None,
) -> TargetedAttackReport:
    """Attack each image toward its target caption embedding; success iff
    retrieval on the adversarial image returns the target id.

    When per-image references are given, the retrieved captions are also
    scored with the consensus captioning metric.
    """
    if config.objective != "embedding_targeted":
        raise ConfigError("targeted_attack_eval requires objective=embedding_targeted")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if int(targets.max()) >= len(head.caption_bank) or int(targets.min()) < 0:
        raise ConfigError("target caption id out of bank range")
    ctx = ObjectiveContext(head=head, target_ids=targets)
    result = apgd(encoder, images, config, ctx)
    retrieved = retrieve_caption(encoder, result.adversarial, head)
    successes = retrieved == targets

    per_target: dict = {}
    for t in sorted(set(targets.tolist())):
        mask = targets == t
        per_target[head.caption_bank[t]] = (
            int(successes[mask].sum()),
            int(mask.sum()),
        )
    total_attacked = sum(a for _, a in per_target.values())
    total_success = sum(s for s, _ in per_target.values())
    mean_rate = total_success / total_attacked

    avg_cider = float("nan")
    if references is not None:
        ids = list(image_ids) if image_ids is not None else list(range(len(images)))
        corpus = CiderCorpus.build(references)
        candidates = {
            ids[i]: head.caption_bank[int(retrieved[i])] for i in range(len(ids))
        }
        avg_cider = cider_score(candidates, corpus)
    return TargetedAttackReport(
        per_target=per_target,
        mean_success_rate=mean_rate,
        average_cider=avg_cider,
        epsilon=config.epsilon,
        steps=config.steps,
    )
