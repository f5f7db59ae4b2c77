import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advsiam.errors import DegenerateEmbeddingError
from advsiam.losses import (
    COLLAPSE_PATIENCE,
    COLLAPSE_STD_THRESHOLD,
    CollapseDetector,
    collapse_metric,
    fare_loss,
    neg_cosine,
    simclip_loss,
    tecoa_loss,
)


def embeddings(min_rows=1):
    return st.integers(min_rows, 5).flatmap(
        lambda n: st.integers(2, 6).flatmap(
            lambda d: st.lists(
                st.lists(
                    st.floats(-10, 10, allow_nan=False, width=32),
                    min_size=d,
                    max_size=d,
                ),
                min_size=n,
                max_size=n,
            ).map(lambda rows: torch.tensor(rows, dtype=torch.float64))
        )
    )


class TestNegCosine:
    def test_hand_value(self):
        # cos((1,0), (1,1)) = 1/sqrt(2)
        a = torch.tensor([[1.0, 0.0]])
        b = torch.tensor([[1.0, 1.0]])
        assert neg_cosine(a, b).item() == pytest.approx(-1 / math.sqrt(2), abs=1e-6)

    def test_identical_rows_give_minus_one(self):
        x = torch.randn(4, 8, dtype=torch.float64)
        assert neg_cosine(x, x.clone()).item() == pytest.approx(-1.0, abs=1e-12)

    def test_opposite_rows_give_plus_one(self):
        x = torch.randn(4, 8, dtype=torch.float64)
        assert neg_cosine(x, -x).item() == pytest.approx(1.0, abs=1e-12)

    def test_zero_row_raises(self):
        a = torch.tensor([[0.0, 0.0]])
        b = torch.tensor([[1.0, 0.0]])
        with pytest.raises(DegenerateEmbeddingError):
            neg_cosine(a, b)
        with pytest.raises(DegenerateEmbeddingError):
            neg_cosine(b, a)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            neg_cosine(torch.ones(2, 3), torch.ones(2, 4))

    @given(embeddings())
    @settings(max_examples=30, deadline=None)
    def test_range_and_scale_invariance(self, x):
        if bool((x.norm(dim=1) < 1e-6).any()):
            return  # degenerate rows are rejected or eps-clamped, not scored
        loss = neg_cosine(x, 3.0 * x)
        assert -1.0 - 1e-9 <= loss.item() <= 1.0 + 1e-9
        assert loss.item() == pytest.approx(-1.0, abs=1e-6)


class TestSimclipLoss:
    def test_value_identical_with_and_without_stop_grad(self):
        torch.manual_seed(0)
        for _ in range(20):
            p = torch.randn(5, 8, dtype=torch.float64)
            c = torch.randn(5, 8, dtype=torch.float64)
            with_sg = simclip_loss(p, c, stop_grad=True).item()
            without = simclip_loss(p, c, stop_grad=False).item()
            assert with_sg == pytest.approx(without, abs=1e-12)

    def test_symmetric_in_arguments(self):
        p = torch.randn(4, 6, dtype=torch.float64)
        c = torch.randn(4, 6, dtype=torch.float64)
        assert simclip_loss(p, c).item() == pytest.approx(
            simclip_loss(c, p).item(), abs=1e-12
        )

    def test_stop_grad_blocks_clean_branch_term(self):
        torch.manual_seed(1)
        p = torch.randn(3, 8, requires_grad=True)
        c = torch.randn(3, 8, requires_grad=True)
        loss = simclip_loss(p, c, stop_grad=True)
        assert loss.grad_flags["term_p_to_clean"] is False
        assert loss.grad_flags["term_c_to_perturbed"] is False
        gp, gc = torch.autograd.grad(loss.value, (p, c))
        # both branches still receive gradient via their own direct term
        assert gp.abs().sum() > 0
        assert gc.abs().sum() > 0

    def test_without_stop_grad_each_term_reaches_both(self):
        p = torch.randn(3, 8, requires_grad=True)
        c = torch.randn(3, 8, requires_grad=True)
        loss = simclip_loss(p, c, stop_grad=False)
        assert loss.grad_flags["term_p_to_clean"] is True
        assert loss.grad_flags["term_c_to_perturbed"] is True

    def test_gradients_differ_between_settings(self):
        torch.manual_seed(2)
        p0 = torch.randn(4, 8)
        c0 = torch.randn(4, 8)
        grads = {}
        for sg in (True, False):
            p = p0.clone().requires_grad_(True)
            c = c0.clone().requires_grad_(True)
            loss = simclip_loss(p, c, stop_grad=sg)
            grads[sg] = torch.autograd.grad(loss.value, c)[0]
        assert not torch.allclose(grads[True], grads[False])


class TestFareLoss:
    def test_hand_value(self):
        clean = torch.tensor([[0.0, 0.0, 0.0]])
        adv = torch.tensor([[1.0, 2.0, 2.0]])
        assert fare_loss(clean, adv).item() == pytest.approx(9.0, abs=1e-6)

    def test_zero_at_equality(self):
        x = torch.randn(3, 5)
        assert fare_loss(x, x.clone()).item() == 0.0

    def test_clean_branch_detached_by_default(self):
        clean = torch.randn(3, 5, requires_grad=True)
        adv = torch.randn(3, 5, requires_grad=True)
        loss = fare_loss(clean, adv)
        assert loss.grad_flags["clean"] is False
        assert loss.grad_flags["adversarial"] is True
        g = torch.autograd.grad(loss.value, clean, allow_unused=True)[0]
        assert g is None

    def test_symmetric_variant_flows_to_clean(self):
        clean = torch.randn(3, 5, requires_grad=True)
        adv = torch.randn(3, 5, requires_grad=True)
        loss = fare_loss(clean, adv, detach_clean=False)
        assert loss.grad_flags["clean"] is True
        g = torch.autograd.grad(loss.value, clean)[0]
        assert g.abs().sum() > 0

    @given(embeddings())
    @settings(max_examples=30, deadline=None)
    def test_matches_direct_formula(self, x):
        y = x + 1.0
        expected = ((y - x) ** 2).sum(dim=1).mean()
        assert fare_loss(x, y).item() == pytest.approx(float(expected), rel=1e-9)


class TestTecoaLoss:
    def test_hand_value(self):
        # CE([1, 0], y=0) = log(1 + e^{-1})
        logits = torch.tensor([[1.0, 0.0]])
        labels = torch.tensor([0])
        expected = math.log(1 + math.exp(-1))
        assert tecoa_loss(logits, labels).item() == pytest.approx(expected, abs=1e-6)

    def test_three_class_hand_value(self):
        # CE([2, 1, 0], y=0) = log(1 + e^{-1} + e^{-2})
        logits = torch.tensor([[2.0, 1.0, 0.0]])
        expected = math.log(1 + math.exp(-1) + math.exp(-2))
        assert tecoa_loss(logits, torch.tensor([0])).item() == pytest.approx(
            expected, abs=1e-6
        )

    def test_uniform_logits_give_log_k(self):
        for k in (2, 5, 10):
            logits = torch.zeros(3, k)
            labels = torch.tensor([0, 1, k - 1])
            assert tecoa_loss(logits, labels).item() == pytest.approx(
                math.log(k), abs=1e-6
            )

    def test_label_out_of_range_raises(self):
        with pytest.raises(ValueError):
            tecoa_loss(torch.zeros(1, 3), torch.tensor([3]))
        with pytest.raises(ValueError):
            tecoa_loss(torch.zeros(1, 3), torch.tensor([-1]))


class TestCollapseMetric:
    def test_orthonormal_basis_value(self):
        # rows (1,0) and (0,1): per-dim population std is 0.5 in both dims
        emb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert collapse_metric(emb) == pytest.approx(0.5, abs=1e-7)

    def test_identical_rows_give_zero(self):
        emb = torch.ones(6, 4) * 3.0
        assert collapse_metric(emb) == pytest.approx(0.0, abs=1e-7)

    def test_scale_invariance(self):
        emb = torch.randn(8, 16, dtype=torch.float64)
        assert collapse_metric(emb) == pytest.approx(
            collapse_metric(10.0 * emb), abs=1e-9
        )

    def test_permutation_invariance(self):
        emb = torch.randn(8, 16)
        perm = torch.randperm(8)
        assert collapse_metric(emb) == pytest.approx(
            collapse_metric(emb[perm]), abs=1e-7
        )

    def test_single_row_raises(self):
        with pytest.raises(ValueError):
            collapse_metric(torch.randn(1, 4))


class TestCollapseDetector:
    def test_fires_after_patience_consecutive(self):
        det = CollapseDetector(threshold=0.01, patience=3)
        assert det.update(0.005) is False
        assert det.update(0.005) is False
        assert det.update(0.005) is True

    def test_recovery_resets_counter(self):
        det = CollapseDetector(threshold=0.01, patience=3)
        det.update(0.001)
        det.update(0.001)
        assert det.update(0.5) is False
        assert det.update(0.001) is False
        assert det.update(0.001) is False
        assert det.update(0.001) is True

    def test_threshold_is_strict(self):
        det = CollapseDetector(threshold=0.01, patience=1)
        assert det.update(0.01) is False  # at the threshold, not below
        assert det.update(0.0099) is True

    def test_defaults(self):
        det = CollapseDetector()
        assert det.threshold == COLLAPSE_STD_THRESHOLD == 0.01
        assert det.patience == COLLAPSE_PATIENCE == 50
