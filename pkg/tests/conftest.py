import numpy as np
import pytest
import torch

from advsiam.captions import build_caption_bank
from advsiam.data import DatasetSpec, ingest
from advsiam.encoder import ArchSpec, TextHead, VisionEncoder

TINY_ARCH = ArchSpec(in_channels=3, image_size=16, widths=(8, 16), embed_dim=16)


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY_ARCH


@pytest.fixture(scope="session")
def tiny_encoder():
    return VisionEncoder(TINY_ARCH, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return ingest(
        DatasetSpec(source="builtin_small_images", n_samples=40, image_size=16, seed=7)
    )


@pytest.fixture(scope="session")
def tiny_head(tiny_dataset):
    captions, _, _ = build_caption_bank(tiny_dataset.class_names)
    return TextHead.build(
        tiny_dataset.class_names, captions=captions, dim=TINY_ARCH.embed_dim
    )


@pytest.fixture()
def tiny_images(tiny_dataset):
    return tiny_dataset.images[:8].clone()


@pytest.fixture()
def tiny_labels(tiny_dataset):
    return tiny_dataset.labels[:8].clone()


def rand_images(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(n, 3, size, size)) / 255.0
    return torch.from_numpy(arr).float()
