import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.validation import check_is_fitted

from advsiam.data import DatasetSpec, ingest
from advsiam.encoder import VisionEncoder
from advsiam.errors import InputSpecError
from advsiam.estimator import (
    RobustEncoderTransformer,
    ZeroShotClassifier,
    check_image_batch,
)
from conftest import TINY_ARCH


@pytest.fixture(scope="module")
def small_data():
    dataset = ingest(DatasetSpec(n_samples=40, image_size=32, seed=2))
    return dataset.images.numpy(), dataset.labels.numpy(), dataset.class_names


class TestCheckImageBatch:
    def test_accepts_4d(self):
        x = np.zeros((2, 3, 32, 32), dtype=np.float32)
        assert tuple(check_image_batch(x).shape) == (2, 3, 32, 32)

    def test_accepts_flattened(self):
        x = np.zeros((2, 3 * 32 * 32), dtype=np.float32)
        assert tuple(check_image_batch(x).shape) == (2, 3, 32, 32)

    def test_rejects_out_of_range(self):
        x = np.full((1, 3, 32, 32), 1.5, dtype=np.float32)
        with pytest.raises(InputSpecError):
            check_image_batch(x)

    def test_rejects_bad_shape(self):
        with pytest.raises(InputSpecError):
            check_image_batch(np.zeros((2, 7)))


class TestRobustEncoderTransformer:
    def test_get_set_params_clone(self):
        est = RobustEncoderTransformer(total_steps=5, lr_peak=1e-4)
        params = est.get_params()
        assert params["total_steps"] == 5
        cloned = clone(est)
        assert cloned.get_params()["lr_peak"] == 1e-4

    def test_fit_transform_shapes(self, small_data):
        images, labels, class_names = small_data
        est = RobustEncoderTransformer(
            total_steps=3, warmup_steps=1, batch_size=4, inner_steps=2,
            class_names=class_names,
        )
        emb = est.fit_transform(images, labels)
        assert emb.shape[0] == len(images)
        check_is_fitted(est)
        norms = np.linalg.norm(emb, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_transform_before_fit_raises(self, small_data):
        images, _, _ = small_data
        est = RobustEncoderTransformer()
        with pytest.raises(Exception):
            est.transform(images)


class TestZeroShotClassifier:
    def test_predict_without_training(self, small_data):
        images, labels, class_names = small_data
        clf = ZeroShotClassifier(
            encoder=VisionEncoder(seed=0), class_names=class_names
        )
        clf.fit(images, labels)
        preds = clf.predict(images)
        assert preds.shape == labels.shape
        assert set(np.unique(preds)).issubset(set(np.unique(labels)))
        assert list(clf.classes_) == sorted(set(labels))

    def test_decision_function_shape(self, small_data):
        images, labels, class_names = small_data
        clf = ZeroShotClassifier(
            encoder=VisionEncoder(seed=0), class_names=class_names
        )
        clf.fit(images, labels)
        scores = clf.decision_function(images)
        assert scores.shape == (len(images), len(class_names))

    def test_training_improves_over_chance(self, small_data):
        images, labels, class_names = small_data
        clf = ZeroShotClassifier(
            class_names=class_names, train_steps=30, lr_peak=2e-3, batch_size=20
        )
        clf.fit(images, labels)
        acc = float(np.mean(clf.predict(images) == labels))
        assert acc > 0.2  # chance is 0.1 on 10 balanced classes

    def test_sklearn_params_roundtrip(self):
        clf = ZeroShotClassifier(temperature=0.05, train_steps=7)
        cloned = clone(clf)
        assert cloned.get_params()["temperature"] == 0.05
        assert cloned.get_params()["train_steps"] == 7
