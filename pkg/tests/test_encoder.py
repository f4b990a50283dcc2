"""Dual-trunk stage encoder: shapes, seeding, branch isolation, pooling."""

import numpy as np
import pytest
import torch

from dsfwsi.encoder import DualBranchEncoder, StageEncoder, global_pool


class TestStageShapes:
    def test_stage_pyramid_at_224(self):
        enc = StageEncoder()
        enc.eval()
        with torch.no_grad():
            feats = enc(torch.randn(2, 3, 224, 224))
        assert [tuple(f.shape) for f in feats] == [
            (2, 64, 56, 56),
            (2, 128, 28, 28),
            (2, 256, 14, 14),
            (2, 512, 7, 7),
        ]

    def test_stem_resolution(self):
        enc = StageEncoder()
        enc.eval()
        with torch.no_grad():
            stem, feats = enc.forward_with_stem(torch.randn(1, 3, 224, 224))
        assert tuple(stem.shape) == (1, 64, 112, 112)
        assert len(feats) == 4

    def test_fully_convolutional(self):
        enc = StageEncoder()
        enc.eval()
        with torch.no_grad():
            feats = enc(torch.randn(1, 3, 96, 96))
        assert [tuple(f.shape[2:]) for f in feats] == [(24, 24), (12, 12), (6, 6), (3, 3)]

    def test_input_validation(self):
        enc = StageEncoder()
        with pytest.raises(ValueError):
            enc(torch.randn(3, 224, 224))  # missing batch dim
        with pytest.raises(ValueError):
            enc(torch.randn(1, 1, 224, 224))  # wrong channel count


class TestDualBranch:
    def test_branches_initialized_differently(self):
        dual = DualBranchEncoder(seed=0)
        w_ctx = dual.branch("context").stem[0].weight
        w_tgt = dual.branch("target").stem[0].weight
        assert not torch.equal(w_ctx, w_tgt)

    def test_seed_reproducibility(self):
        a = DualBranchEncoder(seed=3)
        b = DualBranchEncoder(seed=3)
        c = DualBranchEncoder(seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert any(
            not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
        )

    def test_unknown_branch_rejected(self):
        dual = DualBranchEncoder()
        with pytest.raises(ValueError):
            dual.branch("middle")
        with pytest.raises(ValueError):
            dual.forward_stages("middle", torch.randn(1, 3, 64, 64))

    def test_forward_stages_routes_to_named_trunk(self):
        dual = DualBranchEncoder(seed=1)
        dual.eval()
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            via_dual = dual.forward_stages("context", x)
            direct = dual.branch("context")(x)
        for a, b in zip(via_dual, direct):
            assert torch.equal(a, b)

    def test_branch_isolation_under_optimizer(self):
        dual = DualBranchEncoder(seed=2)
        before = [p.detach().clone() for p in dual.branch("target").parameters()]
        opt = torch.optim.SGD(dual.parameters(), lr=0.5)
        feats = dual.forward_stages("context", torch.randn(2, 3, 64, 64))
        loss = sum(f.mean() for f in feats)
        loss.backward()
        opt.step()
        after = list(dual.branch("target").parameters())
        for b, a in zip(before, after):
            assert torch.equal(b, a)
        # and the context trunk did move
        assert any(
            not torch.equal(b, a)
            for b, a in zip(before, dual.branch("context").parameters())
        )

    def test_eval_forward_deterministic(self):
        dual = DualBranchEncoder(seed=5)
        dual.eval()
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            a = dual.forward_stages("target", x)
            b = dual.forward_stages("target", x)
        for fa, fb in zip(a, b):
            assert torch.equal(fa, fb)

    def test_stage_widths(self):
        assert DualBranchEncoder().stage_widths == (64, 128, 256, 512)


class TestGlobalPool:
    def test_constant_map(self):
        x = torch.full((2, 8, 5, 5), 3.25)
        pooled = global_pool(x)
        assert pooled.shape == (2, 8)
        assert torch.allclose(pooled, torch.full((2, 8), 3.25))

    def test_known_average(self):
        x = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        assert global_pool(x).item() == pytest.approx(4.0)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 16, 7, 7)).astype(np.float32)
        pooled = global_pool(torch.from_numpy(arr))
        want = arr.mean(axis=(2, 3))
        assert np.allclose(pooled.numpy(), want, atol=1e-6)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ValueError):
            global_pool(torch.randn(2, 8))
