"""Fusion-plan sampling and feature fusion."""

import math

import numpy as np
import pytest
import torch

from dsfwsi.ctfm import FusionPlan, fuse, fuse_batch, sample_fusion_plan


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestFusionPlan:
    def test_mask_count_is_floor_of_ratio(self):
        for m, ratio in [(16, 0.5), (16, 0.3), (4, 0.5), (5, 0.5), (7, 0.99), (3, 0.0)]:
            plan = sample_fusion_plan(m, ratio, _rng())
            assert len(plan.mask_set) == math.floor(m * ratio)
            assert plan.mask_ratio == pytest.approx(ratio)

    def test_permutation_is_valid(self):
        plan = sample_fusion_plan(16, 0.5, _rng(3))
        assert sorted(plan.permutation) == list(range(16))
        assert all(s in range(16) for s in plan.mask_set)

    def test_deterministic_given_rng_state(self):
        a = sample_fusion_plan(16, 0.5, _rng(7))
        b = sample_fusion_plan(16, 0.5, _rng(7))
        assert a.permutation == b.permutation and a.mask_set == b.mask_set

    def test_shuffle_disabled_gives_identity_permutation(self):
        plan = sample_fusion_plan(8, 0.5, _rng(1), shuffle=False)
        assert plan.permutation == tuple(range(8))
        assert len(plan.mask_set) == 4

    def test_mask_disabled_records_zero_ratio(self):
        plan = sample_fusion_plan(8, 0.5, _rng(1), mask=False)
        assert plan.mask_set == frozenset()
        assert plan.mask_ratio == 0.0  # plan invariant stays floor(m * ratio)

    def test_ratio_one_rejected(self):
        with pytest.raises(ValueError):
            sample_fusion_plan(8, 1.0, _rng())
        with pytest.raises(ValueError):
            sample_fusion_plan(8, -0.1, _rng())

    def test_zero_targets_rejected(self):
        with pytest.raises(ValueError):
            sample_fusion_plan(0, 0.0, _rng())

    def test_invariant_violations_rejected(self):
        with pytest.raises(ValueError):
            FusionPlan(m=4, permutation=(0, 1, 2, 2), mask_set=frozenset(), mask_ratio=0.0)
        with pytest.raises(ValueError):
            FusionPlan(m=4, permutation=(0, 1, 2, 3), mask_set=frozenset({4}), mask_ratio=0.25)
        with pytest.raises(ValueError):
            # |mask_set| must equal floor(m * mask_ratio)
            FusionPlan(m=4, permutation=(0, 1, 2, 3), mask_set=frozenset({0}), mask_ratio=0.0)


class TestFuse:
    def test_hand_example(self):
        # m=4, slots 1 and 3 masked, slot 0 <- target 2, slot 2 <- target 3.
        plan = FusionPlan(
            m=4,
            permutation=(2, 0, 3, 1),
            mask_set=frozenset({1, 3}),
            mask_ratio=0.5,
        )
        context = torch.tensor([1.0, 2.0, 3.0])
        targets = torch.tensor(
            [[10.0, 11.0, 12.0], [13.0, 14.0, 15.0], [16.0, 17.0, 18.0], [19.0, 20.0, 21.0]]
        )
        fused = fuse(context, targets, plan)
        expected = torch.tensor(
            [1.0, 2.0, 3.0, 16.0, 17.0, 18.0, 0.0, 0.0, 0.0, 19.0, 20.0, 21.0, 0.0, 0.0, 0.0]
        )
        assert torch.equal(fused, expected)

    def test_identity_plan_is_plain_concat(self):
        plan = FusionPlan(m=3, permutation=(0, 1, 2), mask_set=frozenset(), mask_ratio=0.0)
        context = torch.randn(5)
        targets = torch.randn(3, 5)
        fused = fuse(context, targets, plan)
        assert torch.equal(fused, torch.cat([context, targets.reshape(-1)]))

    def test_invertible_when_nothing_masked(self):
        rng = _rng(9)
        plan = sample_fusion_plan(6, 0.0, rng)
        context = torch.randn(4)
        targets = torch.randn(6, 4)
        fused = fuse(context, targets, plan)
        slots = fused[4:].reshape(6, 4)
        recovered = torch.empty_like(targets)
        for j in range(6):
            recovered[plan.permutation[j]] = slots[j]
        assert torch.equal(recovered, targets)

    def test_context_never_masked(self):
        for seed in range(20):
            plan = sample_fusion_plan(4, 0.5, _rng(seed))
            context = torch.arange(3, dtype=torch.float32) + 100.0
            targets = torch.randn(4, 3)
            fused = fuse(context, targets, plan)
            assert torch.equal(fused[:3], context)

    def test_batched_input_matches_per_row_fuse(self):
        plan = sample_fusion_plan(4, 0.5, _rng(2))
        context = torch.randn(3, 8)
        targets = torch.randn(3, 4, 8)
        fused = fuse(context, targets, plan)
        for i in range(3):
            assert torch.equal(fused[i], fuse(context[i], targets[i], plan))

    def test_fuse_batch_matches_loop(self):
        plans = [sample_fusion_plan(4, 0.5, _rng(s)) for s in range(3)]
        context = torch.randn(3, 8)
        targets = torch.randn(3, 4, 8)
        fused = fuse_batch(context, targets, plans)
        for i in range(3):
            assert torch.equal(fused[i], fuse(context[i], targets[i], plans[i]))

    def test_masked_targets_get_no_gradient(self):
        plan = FusionPlan(m=4, permutation=(2, 0, 3, 1), mask_set=frozenset({1, 3}), mask_ratio=0.5)
        targets = torch.randn(4, 3, requires_grad=True)
        context = torch.randn(3)
        fuse(context, targets, plan).sum().backward()
        # slots 1 and 3 are zeroed, so their sources (targets 0 and 1) get zero grad
        assert torch.equal(targets.grad[0], torch.zeros(3))
        assert torch.equal(targets.grad[1], torch.zeros(3))
        assert (targets.grad[2] != 0).all() and (targets.grad[3] != 0).all()

    def test_shape_mismatch_rejected(self):
        plan = sample_fusion_plan(4, 0.5, _rng())
        with pytest.raises(ValueError):
            fuse(torch.randn(3), torch.randn(5, 3), plan)  # wrong m
        with pytest.raises(ValueError):
            fuse(torch.randn(3), torch.randn(4, 2), plan)  # feature dim differs
        with pytest.raises(ValueError):
            fuse_batch(torch.randn(2, 3), torch.randn(2, 4, 3), [plan])  # plan count

    def test_property_sweep(self):
        """Masked slots zero, surviving slots a permutation of the kept targets."""
        m, ratio = 16, 0.5
        rng = _rng(123)
        for _ in range(200):
            plan = sample_fusion_plan(m, ratio, rng)
            context = torch.full((2,), 7.0)
            targets = torch.arange(1, m + 1, dtype=torch.float32).unsqueeze(1).repeat(1, 2)
            fused = fuse(context, targets, plan)
            slots = fused[2:].reshape(m, 2)
            assert len(plan.mask_set) == 8
            for j in range(m):
                if j in plan.mask_set:
                    assert torch.equal(slots[j], torch.zeros(2))
                else:
                    assert torch.equal(slots[j], targets[plan.permutation[j]])
            kept = sorted(slots[j, 0].item() for j in range(m) if j not in plan.mask_set)
            expected = sorted(targets[plan.permutation[j], 0].item() for j in range(m) if j not in plan.mask_set)
            assert kept == expected
