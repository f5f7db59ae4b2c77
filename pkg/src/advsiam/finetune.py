"""Adversarial fine-tuning loop: inner PGD maximization, siamese loss,
decoupled-weight-decay optimizer, and a warmup + cosine schedule.

The two siamese branches are two forward passes through one encoder
(shared weights). The perturbed view is regenerated against the current
parameters at every step. Data order is a pure function of
(seed, step), so a run resumed from a saved state continues bit-exactly.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from .attacks import AttackConfig, ObjectiveContext, pgd
from .encoder import TextHead, VisionEncoder, encode, zero_shot_logits
from .errors import CollapseError, ConfigError
from .losses import (
    COLLAPSE_PATIENCE,
    COLLAPSE_STD_THRESHOLD,
    CollapseDetector,
    collapse_metric,
    fare_loss,
    simclip_loss,
    tecoa_loss,
)
from .records import RunRecord, run_id_for

LOSS_KINDS = ("simclip", "fare", "tecoa")
OPTIMIZER_KINDS = ("adaptive_moment_decoupled_wd", "plain_sgd")


@dataclass
class TrainConfig:
    loss_kind: str = "simclip"
    stop_grad: bool = True
    epsilon_train: float = 4 / 255
    inner_attack: AttackConfig | None = None
    lr_peak: float = 1e-5
    weight_decay: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 500
    epochs: int | None = None  # when set, total_steps derives from the dataset
    batch_size: int = 64
    seed: int = 0
    optimizer_kind: str = "adaptive_moment_decoupled_wd"
    temperature: float = 0.07
    collapse_threshold: float = COLLAPSE_STD_THRESHOLD
    collapse_patience: int = COLLAPSE_PATIENCE

    def __post_init__(self):
        violations = []
        if self.loss_kind not in LOSS_KINDS:
            violations.append(f"unknown loss_kind {self.loss_kind!r}")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            violations.append(f"unknown optimizer_kind {self.optimizer_kind!r}")
        if not (0.0 < self.epsilon_train < 1.0):
            violations.append("epsilon_train must be in (0, 1)")
        if self.epochs is None and self.warmup_steps >= self.total_steps:
            violations.append("warmup_steps must be < total_steps")
        if self.batch_size < 2:
            violations.append("batch_size must be >= 2")
        if violations:
            raise ConfigError(violations)
        if self.inner_attack is None:
            # The embedding-distance objective is stationary at the clean
            # image (zero residual, zero gradient), so the inner attack
            # starts from a seeded random point inside the epsilon ball.
            self.inner_attack = AttackConfig(
                epsilon=self.epsilon_train,
                steps=10,
                alpha=self.epsilon_train / 4.0,
                objective="embedding_max",
                random_start=True,
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inner_attack"] = self.inner_attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("inner_attack") is not None:
            d["inner_attack"] = AttackConfig.from_dict(d["inner_attack"])
        return cls(**d)


def lr_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup to lr_peak, then cosine decay to zero."""
    total = total_steps if total_steps is not None else config.total_steps
    if step < config.warmup_steps:
        return config.lr_peak * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (total - config.warmup_steps)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _build_optimizer(encoder: VisionEncoder, config: TrainConfig):
    if config.optimizer_kind == "adaptive_moment_decoupled_wd":
        return torch.optim.AdamW(
            encoder.parameters(), lr=config.lr_peak, weight_decay=config.weight_decay
        )
    return torch.optim.SGD(
        encoder.parameters(), lr=config.lr_peak, weight_decay=config.weight_decay
    )


class TrainState:
    """Owns the encoder, optimizer moments, and training histories."""

    def __init__(
        self,
        encoder: VisionEncoder,
        config: TrainConfig,
        head: TextHead | None = None,
        total_steps: int | None = None,
    ):
        self.encoder = encoder
        self.config = config
        self.head = head
        self.total_steps = total_steps if total_steps is not None else config.total_steps
        self.optimizer = _build_optimizer(encoder, config)
        self.step = 0
        self.loss_history: list = []
        self.collapse_history: list = []
        self.detector = CollapseDetector(
            config.collapse_threshold, config.collapse_patience
        )

    def save(self, path) -> None:
        torch.save(
            {
                "step": self.step,
                "total_steps": self.total_steps,
                "encoder_arch": self.encoder.arch.to_dict(),
                "encoder_seed": self.encoder.seed,
                "encoder_state": self.encoder.state_dict(),
                "optimizer_state": self.optimizer.state_dict(),
                "loss_history": self.loss_history,
                "collapse_history": self.collapse_history,
                "detector_consecutive": self.detector.consecutive,
                "config": self.config.to_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path, head: TextHead | None = None) -> "TrainState":
        from .encoder import ArchSpec

        blob = torch.load(path, weights_only=False)
        config = TrainConfig.from_dict(blob["config"])
        encoder = VisionEncoder(
            ArchSpec.from_dict(blob["encoder_arch"]), seed=blob["encoder_seed"]
        )
        encoder.load_state_dict(blob["encoder_state"])
        state = cls(encoder, config, head=head, total_steps=blob["total_steps"])
        state.optimizer.load_state_dict(blob["optimizer_state"])
        state.step = blob["step"]
        state.loss_history = list(blob["loss_history"])
        state.collapse_history = list(blob["collapse_history"])
        state.detector.consecutive = blob["detector_consecutive"]
        return state


def _perturbed_view(state: TrainState, batch: torch.Tensor, labels) -> torch.Tensor:
    config = state.config
    ctx = ObjectiveContext(head=state.head, labels=labels)
    # Fresh random-start noise each step, deterministically derived from
    # (train seed, step) so runs and resumes stay bit-exact.
    inner = replace(
        config.inner_attack, seed=config.inner_attack.seed + 1_000_003 * state.step
    )
    result = pgd(state.encoder, batch, inner, ctx)
    return result.adversarial


def train_step(
    state: TrainState,
    batch: torch.Tensor,
    labels: torch.Tensor | None,
    config: TrainConfig | None = None,
) -> TrainState:
    """One optimizer update: perturb, encode both views, loss, step."""
    config = config or state.config
    needs_labels = config.loss_kind == "tecoa" or config.inner_attack.objective in (
        "ce_untargeted",
        "dlr_targeted",
    )
    if needs_labels and labels is None:
        raise ConfigError(f"labels required for loss {config.loss_kind!r} "
                          f"/ inner objective {config.inner_attack.objective!r}")

    x_adv = _perturbed_view(state, batch, labels)

    clean_emb = encode(state.encoder, batch)
    adv_emb = encode(state.encoder, x_adv)
    if config.loss_kind == "simclip":
        loss = simclip_loss(adv_emb, clean_emb, stop_grad=config.stop_grad)
    elif config.loss_kind == "fare":
        loss = fare_loss(clean_emb, adv_emb)
    else:
        logits = zero_shot_logits(
            torch.nn.functional.normalize(adv_emb, dim=1, eps=1e-12),
            state.head,
            config.temperature,
        )
        loss = tecoa_loss(logits, labels)

    lr = lr_at(state.step, config, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    loss.value.backward()
    state.optimizer.step()

    state.loss_history.append(float(loss.value.detach()))
    if adv_emb.shape[0] >= 2:
        metric = collapse_metric(adv_emb)
        state.collapse_history.append(metric)
        if state.detector.update(metric):
            raise CollapseError(
                state.step, metric, state.loss_history, state.collapse_history
            )
    state.step += 1
    return state


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch for a global step: reshuffle every epoch."""
    steps_per_epoch = math.ceil(n / batch_size)
    epoch, within = divmod(step, steps_per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[within * batch_size : (within + 1) * batch_size]


def run_steps(state: TrainState, dataset, n_steps: int) -> TrainState:
    """Advance training by n_steps using the dataset's deterministic order."""
    config = state.config
    n = len(dataset)
    for _ in range(n_steps):
        idx = _batch_indices(n, config.batch_size, config.seed, state.step)
        batch = dataset.images[idx]
        labels = dataset.labels[idx] if dataset.labels is not None else None
        train_step(state, batch, labels, config)
    return state


def finetune(
    dataset,
    config: TrainConfig,
    head: TextHead | None = None,
    init_encoder: VisionEncoder | None = None,
    checkpoint_every: int | None = None,
    checkpoint_dir=None,
):
    """Run the full fine-tuning schedule; returns (encoder, RunRecord).

    A CollapseError raised mid-run propagates after the partial record is
    attached to it (exc.record).
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = (
        config.epochs * steps_per_epoch if config.epochs is not None
        else config.total_steps
    )
    encoder = (
        copy.deepcopy(init_encoder) if init_encoder is not None
        else VisionEncoder(seed=config.seed)
    )
    state = TrainState(encoder, config, head=head, total_steps=total_steps)
    record = RunRecord(
        run_id=run_id_for(config.to_dict(), config.seed), config=config.to_dict()
    )
    start = time.monotonic()
    try:
        while state.step < total_steps:
            chunk = min(
                total_steps - state.step,
                checkpoint_every or (total_steps - state.step),
            )
            run_steps(state, dataset, chunk)
            if checkpoint_every and checkpoint_dir is not None:
                state.save(f"{checkpoint_dir}/state-{state.step:06d}.pt")
    except CollapseError as exc:
        record.collapsed = True
        record.collapse_step = exc.step
        record.losses = exc.loss_history
        record.collapse_trace = exc.collapse_history
        record.wall_clock_seconds = time.monotonic() - start
        exc.record = record
        raise
    record.losses = list(state.loss_history)
    record.collapse_trace = list(state.collapse_history)
    record.wall_clock_seconds = time.monotonic() - start
    return state.encoder, record


def hyperparameter_sweep(
    grid,
    base_config: TrainConfig,
    dataset,
    head: TextHead | None = None,
    init_encoder: VisionEncoder | None = None,
    early_stop_steps: int = 500,
):
    """Early-stopped runs over a finite (lr, wd, optimizer) grid.

    Returns (records, table) where table rows compare final losses.
    """
    records = []
    table = []
    for point in grid:
        config = replace(
            base_config,
            total_steps=early_stop_steps,
            epochs=None,
            inner_attack=base_config.inner_attack,
            **point,
        )
        try:
            _, record = finetune(dataset, config, head=head, init_encoder=init_encoder)
        except CollapseError as exc:
            record = exc.record
        records.append(record)
        table.append(
            {
                "run_id": record.run_id,
                "lr_peak": config.lr_peak,
                "weight_decay": config.weight_decay,
                "optimizer_kind": config.optimizer_kind,
                "final_loss": record.losses[-1] if record.losses else float("nan"),
                "min_loss": min(record.losses) if record.losses else float("nan"),
                "collapsed": record.collapsed,
            }
        )
    return records, table
