"""Fine-tuning losses: negative cosine, symmetric stop-gradient loss,
embedding-distance loss, a supervised cross-entropy baseline, and a
batch-collapse metric.

All losses return a LossValue whose scalar is the mean of the
per-example values. Gradient flow is part of the contract: the
symmetric loss detaches one branch per term, and the embedding-distance
loss treats the clean branch as a frozen reference by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DegenerateEmbeddingError

# A batch whose normalized embeddings have per-dimension std below this
# for COLLAPSE_PATIENCE consecutive steps counts as collapsed.
COLLAPSE_STD_THRESHOLD = 0.01
COLLAPSE_PATIENCE = 50


@dataclass
class LossValue:
    """Scalar loss plus per-example values and gradient-flow bookkeeping.

    grad_flags maps input names to whether the value's autograd graph is
    connected to that input (False for detached branches).
    """

    value: torch.Tensor
    per_example: torch.Tensor
    grad_flags: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value)


def _check_rows(emb: torch.Tensor, name: str) -> None:
    norms = emb.norm(dim=1)
    if bool((norms == 0).any()):
        raise DegenerateEmbeddingError(f"{name} contains a zero-norm row")


def _neg_cosine_per_example(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return -torch.sum(
        F.normalize(a, dim=1, eps=1e-12) * F.normalize(b, dim=1, eps=1e-12),
        dim=1,
    )


def neg_cosine(perturbed: torch.Tensor, clean: torch.Tensor) -> LossValue:
    """Negative cosine similarity between row pairs, averaged over the batch."""
    if perturbed.shape != clean.shape:
        raise ValueError(f"shape mismatch: {perturbed.shape} vs {clean.shape}")
    _check_rows(perturbed, "perturbed")
    _check_rows(clean, "clean")
    per_example = _neg_cosine_per_example(perturbed, clean)
    return LossValue(
        value=per_example.mean(),
        per_example=per_example,
        grad_flags={"perturbed": perturbed.requires_grad, "clean": clean.requires_grad},
    )


def simclip_loss(
    perturbed: torch.Tensor, clean: torch.Tensor, stop_grad: bool = True
) -> LossValue:
    """Symmetric negative cosine loss over the two siamese branches.

    With stop_grad, each half detaches the opposite branch:
    0.5 * CosSim(R_p, detach(R_c)) + 0.5 * CosSim(R_c, detach(R_p)).
    The value is identical with and without stop_grad; only gradient
    flow differs.
    """
    if perturbed.shape != clean.shape:
        raise ValueError(f"shape mismatch: {perturbed.shape} vs {clean.shape}")
    _check_rows(perturbed, "perturbed")
    _check_rows(clean, "clean")
    if stop_grad:
        term_p = _neg_cosine_per_example(perturbed, clean.detach())
        term_c = _neg_cosine_per_example(clean, perturbed.detach())
    else:
        term_p = _neg_cosine_per_example(perturbed, clean)
        term_c = _neg_cosine_per_example(clean, perturbed)
    per_example = 0.5 * term_p + 0.5 * term_c
    return LossValue(
        value=per_example.mean(),
        per_example=per_example,
        grad_flags={
            "perturbed": perturbed.requires_grad,
            "clean": clean.requires_grad,
            # Per-term flow: with stop_grad the first term never reaches
            # the clean branch and the second never reaches the perturbed one.
            "term_p_to_clean": not stop_grad and clean.requires_grad,
            "term_c_to_perturbed": not stop_grad and perturbed.requires_grad,
        },
    )


def fare_loss(
    clean: torch.Tensor, adversarial: torch.Tensor, detach_clean: bool = True
) -> LossValue:
    """Squared l2 distance between adversarial and clean embeddings.

    The clean branch is detached by default (frozen-reference semantics);
    detach_clean=False gives the symmetric variant for ablations.
    Operates on unnormalized embeddings.
    """
    if clean.shape != adversarial.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {adversarial.shape}")
    reference = clean.detach() if detach_clean else clean
    per_example = torch.sum((adversarial - reference) ** 2, dim=1)
    return LossValue(
        value=per_example.mean(),
        per_example=per_example,
        grad_flags={
            "adversarial": adversarial.requires_grad,
            "clean": (not detach_clean) and clean.requires_grad,
        },
    )


def tecoa_loss(logits: torch.Tensor, labels: torch.Tensor) -> LossValue:
    """Supervised baseline: cross-entropy of cosine logits vs true labels."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    per_example = F.cross_entropy(logits, labels, reduction="none")
    return LossValue(
        value=per_example.mean(),
        per_example=per_example,
        grad_flags={"logits": logits.requires_grad},
    )


def collapse_metric(emb: torch.Tensor) -> float:
    """Mean over dimensions of the per-dimension batch std of normalized rows.

    Near zero means the batch has collapsed to a single direction.
    Population std (ddof=0); invariant under row permutation.
    """
    if emb.shape[0] < 2:
        raise ValueError("collapse metric needs at least 2 rows")
    normed = F.normalize(emb.detach(), dim=1, eps=1e-12)
    return float(normed.std(dim=0, unbiased=False).mean())


class CollapseDetector:
    """Flags collapse when the metric stays below threshold long enough."""

    def __init__(
        self,
        threshold: float = COLLAPSE_STD_THRESHOLD,
        patience: int = COLLAPSE_PATIENCE,
    ):
        self.threshold = threshold
        self.patience = patience
        self.consecutive = 0

    def update(self, metric_value: float) -> bool:
        if metric_value < self.threshold:
            self.consecutive += 1
        else:
            self.consecutive = 0
        return self.consecutive >= self.patience
