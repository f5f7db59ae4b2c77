"""Toy vision encoder, frozen text head, and checkpoint serialization.

The encoder is a small convolutional network producing D-dimensional
embeddings. It is deterministic given (seed, parameters, input) and
differentiable with respect to both its parameters and its input, which
is what the attack engine and the siamese fine-tuning loop rely on.

The text head stands in for a frozen text encoder: class names and
captions are embedded by a seeded random projection of their
bag-of-character-trigram counts, then l2-normalized. It never receives
gradient updates.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    CheckpointDigestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    InputSpecError,
)

CHECKPOINT_MAGIC = b"ADVSIAMCK"
CHECKPOINT_VERSION = 1


@dataclass
class ArchSpec:
    """Architecture descriptor for the convolutional encoder."""

    in_channels: int = 3
    image_size: int = 32
    widths: tuple = (16, 32, 32, 32)
    embed_dim: int = 64
    groups: int = 4

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "widths": list(self.widths),
            "embed_dim": self.embed_dim,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            in_channels=int(d["in_channels"]),
            image_size=int(d["image_size"]),
            widths=tuple(int(w) for w in d["widths"]),
            embed_dim=int(d["embed_dim"]),
            groups=int(d["groups"]),
        )


class VisionEncoder(nn.Module):
    """Small convolutional encoder for C x H x W images in [0, 1].

    Uses GroupNorm rather than BatchNorm so the forward pass is a pure
    per-example function of (parameters, input): attacks on one example
    cannot leak into another through batch statistics.
    """

    def __init__(self, arch: ArchSpec | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or ArchSpec()
        self.seed = seed
        a = self.arch
        layers = []
        c_in = a.in_channels
        for i, w in enumerate(a.widths):
            stride = 2 if i > 0 else 1
            layers += [
                nn.Conv2d(c_in, w, kernel_size=3, stride=stride, padding=1),
                nn.GroupNorm(min(a.groups, w), w),
                nn.GELU(),
            ]
            c_in = w
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, a.embed_dim)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * 9
                bound = (2.0 / fan_in) ** 0.5
                with torch.no_grad():
                    module.weight.normal_(0.0, bound, generator=gen)
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                bound = 1.0 / module.in_features ** 0.5
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()

    @property
    def embed_dim(self) -> int:
        return self.arch.embed_dim

    def expected_shape(self) -> tuple:
        a = self.arch
        return (a.in_channels, a.image_size, a.image_size)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or tuple(images.shape[1:]) != self.expected_shape():
            raise InputSpecError(
                f"expected N x {self.expected_shape()} batch, "
                f"got {tuple(images.shape)}"
            )
        h = self.blocks(images)
        h = self.pool(h).flatten(1)
        return self.head(h)


def encode(
    encoder: VisionEncoder, images: torch.Tensor, normalize: bool = False
) -> torch.Tensor:
    """Embed an image batch; optionally l2-normalize each row."""
    emb = encoder(images)
    if normalize:
        emb = torch.nn.functional.normalize(emb, dim=1, eps=1e-12)
    return emb


def _trigram_counts(text: str) -> dict:
    padded = f"  {text.lower()} "
    counts: dict = {}
    for i in range(len(padded) - 2):
        g = padded[i : i + 3]
        counts[g] = counts.get(g, 0) + 1
    return counts


def _trigram_vector(g: str, dim: int) -> np.ndarray:
    # Stable across machines: the RNG seed comes from a sha256 of the trigram.
    seed = int.from_bytes(hashlib.sha256(g.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim)


def embed_text(text: str, dim: int) -> np.ndarray:
    """Deterministic text embedding: hashed-trigram random projection, unit norm."""
    vec = np.zeros(dim)
    for g, c in _trigram_counts(text).items():
        vec += c * _trigram_vector(g, dim)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # Empty string: fall back to a fixed direction so the head stays valid.
        vec = _trigram_vector("   ", dim)
        norm = np.linalg.norm(vec)
    return vec / norm


@dataclass
class TextHead:
    """Frozen class/caption embeddings for zero-shot use.

    Rows are unit-normalized and never updated by training.
    """

    labels: list
    class_embeddings: torch.Tensor
    caption_bank: list = field(default_factory=list)
    caption_embeddings: torch.Tensor | None = None

    @classmethod
    def build(cls, labels, captions=None, dim: int = 64, prompt: str = "a photo of {}"):
        class_emb = np.stack([embed_text(prompt.format(l), dim) for l in labels])
        head = cls(
            labels=list(labels),
            class_embeddings=torch.from_numpy(class_emb).float(),
        )
        if captions is not None:
            head.caption_bank = list(captions)
            cap = np.stack([embed_text(c, dim) for c in captions])
            head.caption_embeddings = torch.from_numpy(cap).float()
        return head

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.class_embeddings.numpy().tobytes())
        if self.caption_embeddings is not None:
            h.update(self.caption_embeddings.numpy().tobytes())
        return h.hexdigest()


def zero_shot_logits(
    emb: torch.Tensor, head: TextHead, temperature: float = 0.07
) -> torch.Tensor:
    """Cosine-classifier logits: logits[i, k] = <emb_i, class_k> / temperature.

    Expects unit-normalized embedding rows (head rows are normalized by
    construction), so the dot product is the cosine.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if emb.shape[1] != head.class_embeddings.shape[1]:
        raise InputSpecError(
            f"embedding dim {emb.shape[1]} != head dim "
            f"{head.class_embeddings.shape[1]}"
        )
    weights = head.class_embeddings.to(emb.dtype)
    return emb @ weights.T / temperature


def save_checkpoint(encoder: VisionEncoder, path, metadata=None) -> None:
    """Write the encoder to a single file.

    Layout: magic, header-length uint64, JSON header, raw little-endian
    float32 tensor blob. The header records per-tensor byte offsets and
    a sha256 digest of the blob, verified on load.
    """
    tensors = {}
    blob = bytearray()
    offset = 0
    for name, param in encoder.state_dict().items():
        arr = param.detach().cpu().to(torch.float32).numpy()
        raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        tensors[name] = {
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blob += raw
        offset += len(raw)
    meta = {
        "arch": encoder.arch.to_dict(),
        "seed": encoder.seed,
        "metadata": metadata or {},
    }
    header = {
        "format_version": CHECKPOINT_VERSION,
        **meta,
        "meta_sha256": _meta_digest(meta),
        "tensors": tensors,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "blob_nbytes": len(blob),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(blob))


def _meta_digest(meta: dict) -> str:
    canonical = json.dumps(meta, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(f"{path}: not a checkpoint file")
        raw_len = fh.read(8)
        if len(raw_len) < 8:
            raise CheckpointTruncatedError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise CheckpointTruncatedError(f"{path}: truncated header")
        header = json.loads(header_bytes.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unknown format_version {header.get('format_version')!r}"
        )
    meta = {
        "arch": header["arch"],
        "seed": header["seed"],
        "metadata": header["metadata"],
    }
    if _meta_digest(meta) != header.get("meta_sha256"):
        raise CheckpointDigestError(f"{path}: metadata digest mismatch")
    return header


def load_checkpoint(path) -> VisionEncoder:
    """Load an encoder saved by save_checkpoint; bit-exact round trip."""
    header = read_checkpoint_header(path)
    with open(path, "rb") as fh:
        fh.seek(len(CHECKPOINT_MAGIC))
        (header_len,) = struct.unpack("<Q", fh.read(8))
        fh.seek(len(CHECKPOINT_MAGIC) + 8 + header_len)
        blob = fh.read(header["blob_nbytes"])
    if len(blob) < header["blob_nbytes"]:
        raise CheckpointTruncatedError(f"{path}: truncated tensor blob")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointDigestError(f"{path}: tensor blob digest mismatch")
    arch = ArchSpec.from_dict(header["arch"])
    encoder = VisionEncoder(arch, seed=int(header["seed"]))
    state = {}
    for name, info in header["tensors"].items():
        raw = blob[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy()
        state[name] = torch.from_numpy(arr)
    encoder.load_state_dict(state)
    return encoder
