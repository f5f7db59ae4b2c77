"""White-box l-inf attack engine: projection, PGD, APGD, and objectives.

All objectives are phrased as maximization problems. PGD follows the
classic signed-gradient iteration with projection into the epsilon ball
intersected with [0, 1]; APGD adds momentum, best-so-far tracking, and
adaptive step halving with restarts from the best point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import torch

from .encoder import TextHead, VisionEncoder, encode, zero_shot_logits
from .errors import ConfigError, UnsupportedObjectiveError

OBJECTIVES = (
    "ce_untargeted",
    "ce_targeted",
    "dlr_targeted",
    "embedding_max",
    "embedding_targeted",
)
TARGETED_OBJECTIVES = ("ce_targeted", "dlr_targeted", "embedding_targeted")

# APGD internals (the momentum and checkpoint constants of the usual
# auto-PGD schedule; the initial step is 2 * epsilon).
APGD_MOMENTUM = 0.75
APGD_RHO = 0.75


@dataclass
class AttackConfig:
    """Configuration for one attack invocation."""

    epsilon: float
    steps: int
    alpha: float | None = None  # PGD step size; defaults to epsilon / 4
    norm: str = "linf"
    objective: str = "ce_untargeted"
    seed: int = 0
    target: int | None = None  # shared class / caption-bank index
    random_start: bool = False
    temperature: float = 0.07

    def __post_init__(self):
        violations = []
        if self.norm != "linf":
            violations.append(f"unsupported norm {self.norm!r}")
        if not (0.0 < self.epsilon < 1.0):
            violations.append("epsilon must be in (0, 1)")
        if self.steps < 0:
            violations.append("steps must be >= 0")
        if self.alpha is None:
            self.alpha = self.epsilon / 4.0
        if self.alpha <= 0:
            violations.append("alpha must be positive")
        if self.objective not in OBJECTIVES:
            violations.append(f"unknown objective {self.objective!r}")
        if self.target is not None and self.objective not in TARGETED_OBJECTIVES:
            violations.append("target given for an untargeted objective")
        if violations:
            raise ConfigError(violations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class ObjectiveContext:
    """Everything an objective may need beyond the image batch.

    labels: true class indices (ce_untargeted, dlr_targeted).
    target_labels: per-example target class indices (ce_targeted, dlr_targeted).
    clean_embeddings: reference embeddings for embedding_max (computed from
        the clean batch if omitted).
    target_embeddings: D or N x D targets for embedding_targeted (derived
        from head.caption_embeddings[target_ids] if omitted).
    target_ids: caption-bank indices, used for success accounting.
    """

    head: TextHead | None = None
    labels: torch.Tensor | None = None
    target_labels: torch.Tensor | None = None
    clean_embeddings: torch.Tensor | None = None
    target_embeddings: torch.Tensor | None = None
    target_ids: torch.Tensor | None = None


@dataclass
class AttackResult:
    """Adversarial batch plus bookkeeping; invariants checked at build time."""

    adversarial: torch.Tensor
    objective_trace: list
    success_mask: torch.Tensor
    linf_violation: float

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "best_objective"])
            for i, v in enumerate(self.objective_trace):
                writer.writerow([i, f"{v:.10g}"])


def linf_project(
    x_adv: torch.Tensor, x: torch.Tensor, epsilon: float
) -> torch.Tensor:
    """Clamp each entry into [x - eps, x + eps] intersected with [0, 1]."""
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x.shape}")
    return torch.clamp(torch.min(torch.max(x_adv, x - epsilon), x + epsilon), 0.0, 1.0)


def ce_objective(
    logits: torch.Tensor, labels: torch.Tensor, targeted: bool = False
) -> torch.Tensor:
    """Mean cross-entropy objective (maximize).

    Untargeted: CE against the true labels. Targeted: negative CE against
    the target labels, so maximizing drives the target probability up.
    """
    return ce_objective_per_example(logits, labels, targeted).mean()


def ce_objective_per_example(
    logits: torch.Tensor, labels: torch.Tensor, targeted: bool = False
) -> torch.Tensor:
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    ce = torch.nn.functional.cross_entropy(logits, labels, reduction="none")
    return -ce if targeted else ce


def dlr_targeted_objective(
    logits: torch.Tensor, true_labels: torch.Tensor, target_labels: torch.Tensor
) -> torch.Tensor:
    """Mean targeted difference-of-logits-ratio objective (maximize)."""
    return dlr_targeted_per_example(logits, true_labels, target_labels).mean()


def dlr_targeted_per_example(
    logits: torch.Tensor, true_labels: torch.Tensor, target_labels: torch.Tensor
) -> torch.Tensor:
    k = logits.shape[1]
    if k < 4:
        raise UnsupportedObjectiveError(
            f"targeted DLR needs at least 4 classes, got {k}"
        )
    sorted_logits, _ = logits.sort(dim=1, descending=True)
    rows = torch.arange(logits.shape[0])
    z_y = logits[rows, true_labels]
    z_t = logits[rows, target_labels]
    denom = sorted_logits[:, 0] - 0.5 * (sorted_logits[:, 2] + sorted_logits[:, 3])
    return -(z_y - z_t) / (denom + 1e-12)


def embedding_objectives(
    clean_emb: torch.Tensor,
    adv_emb: torch.Tensor,
    target_emb: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean embedding-space objective (maximize).

    Without a target: squared l2 distance from the clean embedding.
    With a target: negative squared l2 distance to the target embedding.
    """
    return embedding_objectives_per_example(clean_emb, adv_emb, target_emb).mean()


def embedding_objectives_per_example(
    clean_emb: torch.Tensor,
    adv_emb: torch.Tensor,
    target_emb: torch.Tensor | None = None,
) -> torch.Tensor:
    if target_emb is None:
        if clean_emb.shape != adv_emb.shape:
            raise ValueError("embedding shape mismatch")
        return torch.sum((adv_emb - clean_emb) ** 2, dim=1)
    target = target_emb if target_emb.dim() == 2 else target_emb.unsqueeze(0)
    if target.shape[-1] != adv_emb.shape[-1]:
        raise ValueError("embedding shape mismatch")
    return -torch.sum((adv_emb - target.to(adv_emb.dtype)) ** 2, dim=1)


def _resolve_context(
    encoder: VisionEncoder,
    images: torch.Tensor,
    config: AttackConfig,
    ctx: ObjectiveContext | None,
) -> ObjectiveContext:
    ctx = ctx or ObjectiveContext()
    obj = config.objective
    if obj in ("ce_untargeted", "dlr_targeted") and ctx.labels is None:
        raise ConfigError(f"{obj} requires true labels in the objective context")
    if obj in ("ce_untargeted", "ce_targeted", "dlr_targeted") and ctx.head is None:
        raise ConfigError(f"{obj} requires a text head in the objective context")
    if obj in ("ce_targeted", "dlr_targeted") and ctx.target_labels is None:
        if config.target is None:
            raise ConfigError(f"{obj} requires target labels or config.target")
        ctx.target_labels = torch.full(
            (images.shape[0],), int(config.target), dtype=torch.long
        )
    if obj == "dlr_targeted" and ctx.head.num_classes < 4:
        raise UnsupportedObjectiveError(
            f"targeted DLR needs at least 4 classes, got {ctx.head.num_classes}"
        )
    if obj == "embedding_max" and ctx.clean_embeddings is None:
        with torch.no_grad():
            ctx.clean_embeddings = encode(encoder, images).detach()
    if obj == "embedding_targeted" and ctx.target_embeddings is None:
        if ctx.target_ids is not None and ctx.head is not None:
            ctx.target_embeddings = ctx.head.caption_embeddings[ctx.target_ids]
        elif config.target is not None and ctx.head is not None:
            if ctx.head.caption_embeddings is None:
                raise ConfigError("embedding_targeted needs a caption bank")
            ctx.target_embeddings = ctx.head.caption_embeddings[config.target]
            ctx.target_ids = torch.full(
                (images.shape[0],), int(config.target), dtype=torch.long
            )
        else:
            raise ConfigError(
                "embedding_targeted requires target embeddings, target ids, "
                "or config.target"
            )
    return ctx


def _objective_fn(encoder, config: AttackConfig, ctx: ObjectiveContext):
    """Per-example objective (to maximize) as a function of the image batch."""
    obj = config.objective

    def fn(x_adv: torch.Tensor) -> torch.Tensor:
        if obj in ("ce_untargeted", "ce_targeted", "dlr_targeted"):
            emb = encode(encoder, x_adv, normalize=True)
            logits = zero_shot_logits(emb, ctx.head, config.temperature)
            if obj == "ce_untargeted":
                return ce_objective_per_example(logits, ctx.labels, targeted=False)
            if obj == "ce_targeted":
                return ce_objective_per_example(
                    logits, ctx.target_labels, targeted=True
                )
            return dlr_targeted_per_example(logits, ctx.labels, ctx.target_labels)
        emb = encode(encoder, x_adv)
        if obj == "embedding_max":
            return embedding_objectives_per_example(ctx.clean_embeddings, emb)
        return embedding_objectives_per_example(
            emb, emb, target_emb=ctx.target_embeddings
        )

    return fn


def _objective_grad(fn, x_adv: torch.Tensor):
    x_adv = x_adv.detach().requires_grad_(True)
    values = fn(x_adv)
    grad = torch.autograd.grad(values.sum(), x_adv)[0]
    return values.detach(), grad.detach()


def _success_mask(
    encoder, x_best: torch.Tensor, best_vals: torch.Tensor,
    config: AttackConfig, ctx: ObjectiveContext,
) -> torch.Tensor:
    obj = config.objective
    with torch.no_grad():
        if obj in ("ce_untargeted", "ce_targeted", "dlr_targeted"):
            emb = encode(encoder, x_best, normalize=True)
            preds = zero_shot_logits(emb, ctx.head, config.temperature).argmax(dim=1)
            if obj == "ce_untargeted":
                return preds != ctx.labels
            return preds == ctx.target_labels
        if obj == "embedding_targeted" and ctx.target_ids is not None and (
            ctx.head is not None and ctx.head.caption_embeddings is not None
        ):
            emb = torch.nn.functional.normalize(
                encode(encoder, x_best), dim=1, eps=1e-12
            )
            sims = emb @ ctx.head.caption_embeddings.to(emb.dtype).T
            # ties broken toward the lowest caption id
            retrieved = sims.numpy().argmax(axis=1)
            return torch.from_numpy(retrieved) == ctx.target_ids
        # embedding_max (or targeted without a bank): did the embedding move?
        return best_vals > 0


def _finalize(
    encoder, x, x_best, best_vals, trace, config, ctx
) -> AttackResult:
    violation = float((x_best - x).abs().max() - config.epsilon)
    result = AttackResult(
        adversarial=x_best,
        objective_trace=trace,
        success_mask=_success_mask(encoder, x_best, best_vals, config, ctx),
        linf_violation=violation,
    )
    if violation > 1e-6:
        raise AssertionError(f"epsilon budget violated by {violation}")
    if float(x_best.min()) < 0.0 or float(x_best.max()) > 1.0:
        raise AssertionError("adversarial batch left [0, 1]")
    return result


def _initial_point(x: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    if not config.random_start:
        return x.clone()
    gen = torch.Generator().manual_seed(config.seed)
    noise = (
        torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2.0 - 1.0
    ) * config.epsilon
    return linf_project(x + noise, x, config.epsilon)


def pgd(
    encoder: VisionEncoder,
    images: torch.Tensor,
    config: AttackConfig,
    objective_ctx: ObjectiveContext | None = None,
) -> AttackResult:
    """Projected signed-gradient ascent; returns the best-objective iterate.

    sign(0) is 0, so a zero gradient leaves the iterate fixed.
    """
    ctx = _resolve_context(encoder, images, config, objective_ctx)
    fn = _objective_fn(encoder, config, ctx)
    x = images.detach().clone()
    x_adv = _initial_point(x, config)
    x_best = x_adv.clone()
    trace = []

    if config.steps == 0:
        with torch.no_grad():
            best_vals = fn(x_adv)
        trace.append(float(best_vals.mean()))
        return _finalize(encoder, x, x_best, best_vals, trace, config, ctx)

    best_vals = None
    for _ in range(config.steps):
        vals, grad = _objective_grad(fn, x_adv)
        if best_vals is None:
            best_vals = vals.clone()
        else:
            improved = vals > best_vals
            best_vals = torch.where(improved, vals, best_vals)
            x_best[improved] = x_adv[improved]
        trace.append(float(best_vals.mean()))
        x_adv = linf_project(x_adv + config.alpha * torch.sign(grad), x, config.epsilon)
    with torch.no_grad():
        vals = fn(x_adv)
    improved = vals > best_vals
    best_vals = torch.where(improved, vals, best_vals)
    x_best[improved] = x_adv[improved]
    trace.append(float(best_vals.mean()))
    return _finalize(encoder, x, x_best, best_vals, trace, config, ctx)


def apgd(
    encoder: VisionEncoder,
    images: torch.Tensor,
    config: AttackConfig,
    objective_ctx: ObjectiveContext | None = None,
) -> AttackResult:
    """Momentum PGD with adaptive step halving and best-point restarts."""
    if config.steps < 1:
        raise ConfigError("apgd requires steps >= 1")
    ctx = _resolve_context(encoder, images, config, objective_ctx)
    fn = _objective_fn(encoder, config, ctx)
    n_iter = config.steps
    x = images.detach().clone()
    x_adv = _initial_point(x, config)

    vals, grad = _objective_grad(fn, x_adv)
    best_vals = vals.clone()
    x_best = x_adv.clone()
    grad_best = grad.clone()
    trace = [float(best_vals.mean())]

    n = x.shape[0]
    expand = (n,) + (1,) * (x.dim() - 1)
    step_size = torch.full(expand, 2.0 * config.epsilon, dtype=x.dtype)
    x_adv_old = x_adv.clone()

    # Checkpoint schedule of the standard auto-PGD step-halving rule.
    k = max(int(0.22 * n_iter), 1)
    k_min = max(int(0.06 * n_iter), 1)
    k_decr = max(int(0.03 * n_iter), 1)
    counter = 0
    val_steps = torch.zeros((n_iter, n))
    best_last_check = best_vals.clone()
    reduced_last_check = torch.ones(n, dtype=torch.bool)

    for i in range(n_iter):
        with torch.no_grad():
            momentum = x_adv - x_adv_old
            x_adv_old = x_adv.clone()
            a = APGD_MOMENTUM if i > 0 else 1.0
            z = linf_project(x_adv + step_size * torch.sign(grad), x, config.epsilon)
            x_adv = linf_project(
                x_adv + a * (z - x_adv) + (1.0 - a) * momentum, x, config.epsilon
            )
        vals, grad = _objective_grad(fn, x_adv)
        with torch.no_grad():
            val_steps[i] = vals
            improved = vals > best_vals
            best_vals = torch.where(improved, vals, best_vals)
            x_best[improved] = x_adv[improved]
            grad_best[improved] = grad[improved]
            trace.append(float(best_vals.mean()))
            counter += 1
            if counter == k:
                # Halve the step where the objective oscillated or the last
                # halving brought no improvement; restart from the best point.
                window = min(k, i + 1)
                rising = torch.zeros(n)
                for j in range(window - 1):
                    rising += (val_steps[i - j] > val_steps[i - j - 1]).float()
                oscillating = rising <= APGD_RHO * (window - 1)
                stalled = (~reduced_last_check) & (best_last_check >= best_vals)
                halve = oscillating | stalled
                reduced_last_check = halve.clone()
                best_last_check = best_vals.clone()
                if bool(halve.any()):
                    step_size[halve] /= 2.0
                    x_adv = x_adv.clone()
                    x_adv[halve] = x_best[halve]
                    grad = grad.clone()
                    grad[halve] = grad_best[halve]
                k = max(k - k_decr, k_min)
                counter = 0
    return _finalize(encoder, x, x_best, best_vals, trace, config, ctx)
