import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advsiam.attacks import (
    APGD_MOMENTUM,
    APGD_RHO,
    OBJECTIVES,
    AttackConfig,
    ObjectiveContext,
    apgd,
    ce_objective,
    ce_objective_per_example,
    dlr_targeted_per_example,
    embedding_objectives,
    linf_project,
    pgd,
)
from advsiam.encoder import encode
from advsiam.errors import ConfigError, UnsupportedObjectiveError


class TestAttackConfig:
    def test_alpha_defaults_to_quarter_epsilon(self):
        cfg = AttackConfig(epsilon=8 / 255, steps=10)
        assert cfg.alpha == pytest.approx(2 / 255)

    def test_explicit_alpha_kept(self):
        cfg = AttackConfig(epsilon=8 / 255, steps=10, alpha=1 / 255)
        assert cfg.alpha == pytest.approx(1 / 255)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epsilon": 0.0, "steps": 1},
            {"epsilon": 1.5, "steps": 1},
            {"epsilon": 4 / 255, "steps": -1},
            {"epsilon": 4 / 255, "steps": 1, "norm": "l2"},
            {"epsilon": 4 / 255, "steps": 1, "objective": "nonsense"},
            {"epsilon": 4 / 255, "steps": 1, "alpha": -0.1},
            {"epsilon": 4 / 255, "steps": 1, "target": 3},  # untargeted objective
        ],
    )
    def test_invalid_configs_raise(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)

    def test_roundtrip_dict(self):
        cfg = AttackConfig(epsilon=4 / 255, steps=7, objective="embedding_max", seed=3)
        assert AttackConfig.from_dict(cfg.to_dict()) == cfg


class TestLinfProject:
    def test_hand_case(self):
        x = torch.tensor([0.5, 0.0, 1.0])
        x_adv = torch.tensor([0.9, -0.3, 1.2])
        out = linf_project(x_adv, x, 0.1)
        assert torch.allclose(out, torch.tensor([0.6, 0.0, 1.0]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            linf_project(torch.zeros(3), torch.zeros(4), 0.1)

    @given(
        st.lists(st.floats(0, 1, width=32), min_size=1, max_size=16),
        st.lists(st.floats(-2, 2, width=32), min_size=1, max_size=16),
        st.floats(1e-4, 0.5),
    )
    @settings(max_examples=50, deadline=None)
    def test_always_inside_ball_and_range(self, xs, ds, eps):
        n = min(len(xs), len(ds))
        x = torch.tensor(xs[:n])
        x_adv = x + torch.tensor(ds[:n])
        out = linf_project(x_adv, x, eps)
        assert float((out - x).abs().max()) <= eps + 1e-6
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_idempotent(self):
        torch.manual_seed(0)
        x = torch.rand(10)
        x_adv = x + torch.randn(10)
        once = linf_project(x_adv, x, 0.05)
        assert torch.equal(once, linf_project(once, x, 0.05))


class TestObjectives:
    def test_ce_untargeted_hand_value(self):
        logits = torch.tensor([[2.0, 1.0, 0.0]])
        expected = math.log(1 + math.exp(-1) + math.exp(-2))
        assert float(ce_objective(logits, torch.tensor([0]))) == pytest.approx(
            expected, abs=1e-6
        )

    def test_ce_targeted_is_negated(self):
        logits = torch.randn(4, 6)
        labels = torch.randint(0, 6, (4,))
        untargeted = ce_objective_per_example(logits, labels, targeted=False)
        targeted = ce_objective_per_example(logits, labels, targeted=True)
        assert torch.allclose(untargeted, -targeted)

    def test_dlr_hand_value(self):
        # logits (5,4,3,2), y=0, t=1: -(5-4)/(5 - (3+2)/2) = -0.4
        logits = torch.tensor([[5.0, 4.0, 3.0, 2.0]])
        val = dlr_targeted_per_example(
            logits, torch.tensor([0]), torch.tensor([1])
        )
        assert float(val) == pytest.approx(-0.4, abs=1e-6)

    def test_dlr_zero_when_target_equals_true(self):
        logits = torch.tensor([[5.0, 4.0, 3.0, 2.0]])
        val = dlr_targeted_per_example(logits, torch.tensor([0]), torch.tensor([0]))
        assert float(val) == pytest.approx(0.0, abs=1e-9)

    def test_dlr_needs_four_classes(self):
        with pytest.raises(UnsupportedObjectiveError):
            dlr_targeted_per_example(
                torch.randn(2, 3), torch.tensor([0, 1]), torch.tensor([1, 2])
            )

    def test_embedding_max_is_squared_distance(self):
        clean = torch.zeros(1, 3)
        adv = torch.tensor([[1.0, 2.0, 2.0]])
        assert float(embedding_objectives(clean, adv)) == pytest.approx(9.0)

    def test_embedding_targeted_is_negative_distance(self):
        emb = torch.tensor([[1.0, 0.0]])
        target = torch.tensor([0.0, 0.0])
        assert float(
            embedding_objectives(emb, emb, target_emb=target)
        ) == pytest.approx(-1.0)


class TestPgd:
    def test_zero_steps_returns_clean(self, tiny_encoder, tiny_images):
        cfg = AttackConfig(epsilon=4 / 255, steps=0, objective="embedding_max")
        res = pgd(tiny_encoder, tiny_images, cfg)
        assert torch.equal(res.adversarial, tiny_images)
        assert res.linf_violation <= 0.0

    def test_budget_and_range(self, tiny_encoder, tiny_images, tiny_labels, tiny_head):
        eps = 8 / 255
        cfg = AttackConfig(epsilon=eps, steps=5)
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        res = pgd(tiny_encoder, tiny_images, cfg, ctx)
        assert float((res.adversarial - tiny_images).abs().max()) <= eps + 1e-6
        assert float(res.adversarial.min()) >= 0.0
        assert float(res.adversarial.max()) <= 1.0

    def test_trace_best_so_far_nondecreasing(
        self, tiny_encoder, tiny_images, tiny_labels, tiny_head
    ):
        cfg = AttackConfig(epsilon=8 / 255, steps=10)
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        res = pgd(tiny_encoder, tiny_images, cfg, ctx)
        assert len(res.objective_trace) == 11
        for a, b in zip(res.objective_trace, res.objective_trace[1:]):
            assert b >= a - 1e-9

    def test_ce_objective_improves(
        self, tiny_encoder, tiny_images, tiny_labels, tiny_head
    ):
        cfg = AttackConfig(epsilon=8 / 255, steps=10)
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        res = pgd(tiny_encoder, tiny_images, cfg, ctx)
        assert res.objective_trace[-1] > res.objective_trace[0]

    def test_embedding_max_stationary_without_random_start(
        self, tiny_encoder, tiny_images
    ):
        # sign(0) = 0: the clean image is a fixed point of this objective
        cfg = AttackConfig(
            epsilon=8 / 255, steps=3, objective="embedding_max", random_start=False
        )
        res = pgd(tiny_encoder, tiny_images, cfg)
        assert torch.equal(res.adversarial, tiny_images)

    def test_embedding_max_moves_with_random_start(self, tiny_encoder, tiny_images):
        cfg = AttackConfig(
            epsilon=8 / 255, steps=5, objective="embedding_max", random_start=True
        )
        res = pgd(tiny_encoder, tiny_images, cfg)
        assert res.objective_trace[-1] > 0.0
        assert not torch.equal(res.adversarial, tiny_images)

    def test_random_start_deterministic_in_seed(self, tiny_encoder, tiny_images):
        cfg = AttackConfig(
            epsilon=4 / 255, steps=3, objective="embedding_max",
            random_start=True, seed=11,
        )
        r1 = pgd(tiny_encoder, tiny_images, cfg)
        r2 = pgd(tiny_encoder, tiny_images, cfg)
        assert torch.equal(r1.adversarial, r2.adversarial)
        other = AttackConfig(
            epsilon=4 / 255, steps=3, objective="embedding_max",
            random_start=True, seed=12,
        )
        r3 = pgd(tiny_encoder, tiny_images, other)
        assert not torch.equal(r1.adversarial, r3.adversarial)

    def test_missing_context_raises(self, tiny_encoder, tiny_images):
        cfg = AttackConfig(epsilon=4 / 255, steps=2)
        with pytest.raises(ConfigError):
            pgd(tiny_encoder, tiny_images, cfg)  # ce needs labels and head

    def test_trace_csv(self, tmp_path, tiny_encoder, tiny_images):
        cfg = AttackConfig(
            epsilon=4 / 255, steps=2, objective="embedding_max", random_start=True
        )
        res = pgd(tiny_encoder, tiny_images, cfg)
        path = tmp_path / "trace.csv"
        res.write_trace_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,best_objective"
        assert len(lines) == len(res.objective_trace) + 1


class TestApgd:
    def test_requires_at_least_one_step(self, tiny_encoder, tiny_images):
        cfg = AttackConfig(epsilon=4 / 255, steps=0, objective="embedding_max")
        with pytest.raises(ConfigError):
            apgd(tiny_encoder, tiny_images, cfg)

    def test_budget_and_range(self, tiny_encoder, tiny_images, tiny_labels, tiny_head):
        eps = 4 / 255
        cfg = AttackConfig(epsilon=eps, steps=20)
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        res = apgd(tiny_encoder, tiny_images, cfg, ctx)
        assert float((res.adversarial - tiny_images).abs().max()) <= eps + 1e-6
        assert float(res.adversarial.min()) >= 0.0
        assert float(res.adversarial.max()) <= 1.0

    def test_beats_or_matches_pgd_on_ce(
        self, tiny_encoder, tiny_images, tiny_labels, tiny_head
    ):
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        cfg = AttackConfig(epsilon=8 / 255, steps=30)
        res_pgd = pgd(tiny_encoder, tiny_images, cfg, ctx)
        res_apgd = apgd(tiny_encoder, tiny_images, cfg, ctx)
        assert res_apgd.objective_trace[-1] >= res_pgd.objective_trace[-1] - 0.05

    def test_trace_nondecreasing(
        self, tiny_encoder, tiny_images, tiny_labels, tiny_head
    ):
        ctx = ObjectiveContext(head=tiny_head, labels=tiny_labels)
        cfg = AttackConfig(epsilon=8 / 255, steps=25)
        res = apgd(tiny_encoder, tiny_images, cfg, ctx)
        for a, b in zip(res.objective_trace, res.objective_trace[1:]):
            assert b >= a - 1e-9

    def test_dlr_targeted_end_to_end(
        self, tiny_encoder, tiny_images, tiny_labels, tiny_head
    ):
        cfg = AttackConfig(epsilon=8 / 255, steps=15, objective="dlr_targeted")
        targets = (tiny_labels + 1) % tiny_head.num_classes
        ctx = ObjectiveContext(
            head=tiny_head, labels=tiny_labels, target_labels=targets
        )
        res = apgd(tiny_encoder, tiny_images, cfg, ctx)
        assert res.objective_trace[-1] > res.objective_trace[0]

    def test_embedding_targeted_uses_caption_bank(
        self, tiny_encoder, tiny_images, tiny_head
    ):
        cfg = AttackConfig(
            epsilon=8 / 255, steps=15, objective="embedding_targeted", target=0
        )
        ctx = ObjectiveContext(head=tiny_head)
        res = apgd(tiny_encoder, tiny_images, cfg, ctx)
        # negative squared distance to the target grows toward zero
        assert res.objective_trace[-1] > res.objective_trace[0]

    def test_constants(self):
        assert APGD_MOMENTUM == 0.75
        assert APGD_RHO == 0.75
        assert set(OBJECTIVES) == {
            "ce_untargeted",
            "ce_targeted",
            "dlr_targeted",
            "embedding_max",
            "embedding_targeted",
        }
