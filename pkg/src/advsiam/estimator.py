"""Scikit-learn style estimators wrapping the encoder and training loop.

These compose with sklearn pipelines and model selection: parameters are
plain constructor attributes, fit returns self, and fitted state lives in
trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .attacks import AttackConfig
from .captions import build_caption_bank
from .encoder import TextHead, VisionEncoder, encode, zero_shot_logits
from .errors import InputSpecError
from .finetune import TrainConfig, finetune


def check_image_batch(X, channels=3, image_size=32) -> torch.Tensor:
    """Validate and coerce input to an N x C x H x W float tensor in [0, 1].

    Accepts 4D arrays or flattened 2D arrays of C * H * W columns.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        expected = channels * image_size * image_size
        if arr.shape[1] != expected:
            raise InputSpecError(
                f"flattened input needs {expected} columns, got {arr.shape[1]}"
            )
        arr = arr.reshape(arr.shape[0], channels, image_size, image_size)
    if arr.ndim != 4:
        raise InputSpecError(f"expected 2D or 4D input, got {arr.ndim}D")
    if arr.shape[0] < 1:
        raise InputSpecError("empty batch")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputSpecError("image values outside [0, 1]")
    return torch.from_numpy(arr)


class _ArrayDataset:
    def __init__(self, images, labels=None):
        self.images = images
        self.labels = labels

    def __len__(self):
        return self.images.shape[0]


class RobustEncoderTransformer(BaseEstimator, TransformerMixin):
    """Adversarially fine-tuned embedding transformer.

    fit(X) runs siamese adversarial fine-tuning (unsupervised by default);
    transform(X) returns embeddings. Pass class_names to also build a
    frozen zero-shot head (used by predict via ZeroShotClassifier).
    """

    def __init__(
        self,
        loss_kind="simclip",
        stop_grad=True,
        epsilon_train=4 / 255,
        inner_steps=10,
        lr_peak=1e-3,
        weight_decay=1e-4,
        warmup_steps=20,
        total_steps=200,
        batch_size=32,
        optimizer_kind="adaptive_moment_decoupled_wd",
        normalize_output=True,
        seed=0,
        init_encoder=None,
        class_names=None,
    ):
        self.loss_kind = loss_kind
        self.stop_grad = stop_grad
        self.epsilon_train = epsilon_train
        self.inner_steps = inner_steps
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.optimizer_kind = optimizer_kind
        self.normalize_output = normalize_output
        self.seed = seed
        self.init_encoder = init_encoder
        self.class_names = class_names

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            loss_kind=self.loss_kind,
            stop_grad=self.stop_grad,
            epsilon_train=self.epsilon_train,
            inner_attack=AttackConfig(
                epsilon=self.epsilon_train,
                steps=self.inner_steps,
                objective="embedding_max",
                random_start=True,
            ),
            lr_peak=self.lr_peak,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps,
            total_steps=self.total_steps,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer_kind=self.optimizer_kind,
        )

    def fit(self, X, y=None):
        images = check_image_batch(X)
        labels = None if y is None else torch.as_tensor(np.asarray(y))
        head = None
        if self.class_names is not None:
            captions, _, _ = build_caption_bank(self.class_names)
            self.head_ = TextHead.build(self.class_names, captions=captions)
            head = self.head_
        torch.manual_seed(self.seed)
        self.encoder_, self.record_ = finetune(
            _ArrayDataset(images, labels),
            self._train_config(),
            head=head,
            init_encoder=self.init_encoder,
        )
        return self

    def transform(self, X):
        images = check_image_batch(X)
        with torch.no_grad():
            emb = encode(self.encoder_, images, normalize=self.normalize_output)
        return emb.numpy()


class ZeroShotClassifier(BaseEstimator, ClassifierMixin):
    """Frozen-head zero-shot classifier over encoder embeddings.

    fit only records the label vocabulary and builds the frozen text head
    (and optionally clean-pretrains the encoder when train_steps > 0);
    predict is cosine argmax against the head.
    """

    def __init__(
        self,
        encoder=None,
        class_names=None,
        temperature=0.07,
        train_steps=0,
        lr_peak=2e-3,
        batch_size=64,
        seed=0,
    ):
        self.encoder = encoder
        self.class_names = class_names
        self.temperature = temperature
        self.train_steps = train_steps
        self.lr_peak = lr_peak
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        images = check_image_batch(X)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        names = (
            self.class_names
            if self.class_names is not None
            else [f"class {c}" for c in self.classes_]
        )
        self.head_ = TextHead.build(names)
        self.encoder_ = self.encoder or VisionEncoder(seed=self.seed)
        if self.train_steps > 0:
            config = TrainConfig(
                loss_kind="tecoa",
                epsilon_train=2 / 255,
                inner_attack=AttackConfig(epsilon=2 / 255, steps=0),
                lr_peak=self.lr_peak,
                warmup_steps=max(1, self.train_steps // 10),
                total_steps=self.train_steps,
                batch_size=self.batch_size,
                seed=self.seed,
            )
            labels = torch.as_tensor(np.searchsorted(self.classes_, y))
            torch.manual_seed(self.seed)
            self.encoder_, _ = finetune(
                _ArrayDataset(images, labels), config, head=self.head_
            )
        return self

    def decision_function(self, X):
        images = check_image_batch(X)
        with torch.no_grad():
            emb = encode(self.encoder_, images, normalize=True)
            logits = zero_shot_logits(emb, self.head_, self.temperature)
        return logits.numpy()

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
