"""Fusion-block formula fidelity against the direct-evaluation oracle,
row-stochasticity, permutation equivariance, and the modality-swap symmetry."""

import numpy as np
import pytest
import torch

import oracles
from pairvid.backbone import FeaturePyramid
from pairvid.fusion import (
    AttentionProjection,
    ConcatFusion,
    DualAttentionFusion,
    DualAttentionFusionLevel,
    SingleModalityFusion,
    SumAttentionFusion,
    build_fusion,
    cross_attention,
    self_attention_residual,
)


def identity_projection(dim: int) -> AttentionProjection:
    proj = AttentionProjection(dim)
    with torch.no_grad():
        for lin in (proj.w_q, proj.w_k, proj.w_v):
            lin.weight.copy_(torch.eye(dim))
    return proj


def proj_weights(proj: AttentionProjection) -> dict:
    return {
        "q": proj.w_q.weight.detach().numpy().astype(np.float64),
        "k": proj.w_k.weight.detach().numpy().astype(np.float64),
        "v": proj.w_v.weight.detach().numpy().astype(np.float64),
    }


class TestCrossAttention:
    def test_single_token_weight_is_one(self):
        proj = identity_projection(3)
        q = torch.tensor([[1.0, 2.0, 3.0]])
        kv = torch.tensor([[4.0, 5.0, 6.0]])
        out, weights = cross_attention(q, kv, proj, proj, return_weights=True)
        assert torch.allclose(weights, torch.ones(1, 1))
        assert torch.allclose(out, kv)

    def test_identical_keys_give_shared_value(self):
        proj = identity_projection(4)
        kv = torch.ones(5, 4) * 0.7
        q = torch.rand(5, 4)
        out = cross_attention(q, kv, proj, proj)
        assert torch.allclose(out, kv, atol=1e-6)

    def test_hand_set_instance_matches_oracle(self):
        proj = identity_projection(2).double()
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        kv = torch.tensor([[2.0, 1.0], [-1.0, 3.0]], dtype=torch.float64)
        out = cross_attention(q, kv, proj, proj)
        expect = oracles.attention(q.numpy(), kv.numpy(), kv.numpy())
        np.testing.assert_allclose(out.detach().numpy(), expect, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_attention(torch.rand(3, 4), torch.rand(3, 5), AttentionProjection(4), AttentionProjection(4))


class TestSelfAttentionResidual:
    def test_single_token_doubles(self):
        proj = identity_projection(3)
        x = torch.tensor([[1.0, -2.0, 0.5]])
        assert torch.allclose(self_attention_residual(x, proj), 2 * x)

    def test_zero_input_zero_output(self):
        proj = AttentionProjection(4)
        x = torch.zeros(6, 4)
        assert torch.allclose(self_attention_residual(x, proj), torch.zeros(6, 4))

    def test_random_instance_matches_oracle(self):
        torch.manual_seed(1)
        proj = AttentionProjection(4).double()
        x = torch.randn(3, 4, dtype=torch.float64)
        out = self_attention_residual(x, proj)
        w = proj_weights(proj)
        q, k, v = (x.numpy() @ w[n].T for n in ("q", "k", "v"))
        expect = oracles.softmax_rows(q @ k.T / np.sqrt(4)) @ v + x.numpy()
        assert np.max(np.abs(out.detach().numpy() - expect)) < 1e-6


class TestFusionLevel:
    def test_identity_single_token_hand_evaluation(self):
        level = DualAttentionFusionLevel(2)
        with torch.no_grad():
            for proj in (level.proj_a, level.proj_b):
                for lin in (proj.w_q, proj.w_k, proj.w_v):
                    lin.weight.copy_(torch.eye(2))
        x = torch.tensor([[0.3, -0.7]])
        concat = level.pre_projection_concat(x, x.clone())
        # invariant = 2x, each specific stream = 2x; concat = [2x, 2x, 2x].
        assert torch.allclose(concat, torch.cat([2 * x, 2 * x, 2 * x], dim=-1), atol=1e-6)

    def test_concat_width_is_three_d(self):
        level = DualAttentionFusionLevel(8)
        out = level.pre_projection_concat(torch.rand(5, 8), torch.rand(5, 8))
        assert out.shape == (5, 24)

    def test_full_module_matches_oracle(self):
        torch.manual_seed(2)
        rng = np.random.default_rng(2)
        for _ in range(20):
            level = DualAttentionFusionLevel(8).double()
            ta = torch.tensor(rng.standard_normal((16, 8)))
            tb = torch.tensor(rng.standard_normal((16, 8)))
            out = level.fuse_tokens(ta, tb)
            expect = oracles.dual_fusion(
                ta.numpy(),
                tb.numpy(),
                proj_weights(level.proj_a),
                proj_weights(level.proj_b),
                w_out=level.out_proj.weight.detach().numpy().astype(np.float64),
            )
            assert np.max(np.abs(out.detach().numpy() - expect)) < 1e-5

    def test_row_stochastic_attention(self):
        torch.manual_seed(3)
        proj = AttentionProjection(8)
        x = torch.randn(12, 8)
        _, weights = self_attention_residual(x, proj, return_weights=True)
        assert torch.all(weights >= 0)
        assert torch.allclose(weights.sum(-1), torch.ones(12), atol=1e-5)

    def test_token_permutation_equivariance(self):
        torch.manual_seed(4)
        level = DualAttentionFusionLevel(8)
        ta, tb = torch.randn(10, 8), torch.randn(10, 8)
        perm = torch.randperm(10)
        with torch.no_grad():
            base = level.fuse_tokens(ta, tb)
            permuted = level.fuse_tokens(ta[perm], tb[perm])
        assert torch.allclose(base[perm], permuted, atol=1e-6)

    def test_modality_swap_symmetry(self):
        # Exchanging the projection parameter sets and swapping the inputs
        # leaves the invariant stream unchanged and swaps the specific streams.
        torch.manual_seed(5)
        level = DualAttentionFusionLevel(6)
        swapped = DualAttentionFusionLevel(6)
        with torch.no_grad():
            for src, dst in ((level.proj_a, swapped.proj_b), (level.proj_b, swapped.proj_a)):
                dst.w_q.weight.copy_(src.w_q.weight)
                dst.w_k.weight.copy_(src.w_k.weight)
                dst.w_v.weight.copy_(src.w_v.weight)
        ta, tb = torch.randn(7, 6), torch.randn(7, 6)
        with torch.no_grad():
            spec_a, invar, spec_b = level.pre_projection_concat(ta, tb).chunk(3, dim=-1)
            s_spec_a, s_invar, s_spec_b = swapped.pre_projection_concat(tb, ta).chunk(3, dim=-1)
        assert torch.allclose(invar, s_invar, atol=1e-6)
        assert torch.allclose(spec_a, s_spec_b, atol=1e-6)
        assert torch.allclose(spec_b, s_spec_a, atol=1e-6)


def make_pyramid(rng, dims=(8, 12, 16), sizes=((8, 8), (4, 4), (2, 2)), batch=2):
    levels = [
        torch.tensor(rng.standard_normal((batch, d, h, w)), dtype=torch.float32)
        for d, (h, w) in zip(dims, sizes)
    ]
    return FeaturePyramid(levels=levels, input_hw=(64, 64))


class TestFusionBlocks:
    def test_output_shapes_match_input(self):
        rng = np.random.default_rng(0)
        pa, pb = make_pyramid(rng), make_pyramid(rng)
        for kind in ("dual_attention", "sum_attention", "concat", "single_a", "single_b"):
            block = build_fusion(kind, (8, 12, 16))
            fused = block(pa, pb)
            assert [tuple(t.shape) for t in fused.levels] == [tuple(t.shape) for t in pa.levels]

    def test_single_modality_passthrough(self):
        rng = np.random.default_rng(1)
        pa, pb = make_pyramid(rng), make_pyramid(rng)
        assert torch.equal(SingleModalityFusion("a")(pa, pb).levels[0], pa.levels[0])
        assert torch.equal(SingleModalityFusion("b")(pa, pb).levels[1], pb.levels[1])

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        pa = make_pyramid(rng)
        pb = make_pyramid(rng, sizes=((4, 4), (2, 2), (1, 1)))
        with pytest.raises(ValueError, match="differ"):
            DualAttentionFusion((8, 12, 16))(pa, pb)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown fusion"):
            build_fusion("bilinear", (8, 12, 16))

    def test_sum_variant_differs_from_concat_variant(self):
        torch.manual_seed(9)
        rng = np.random.default_rng(3)
        pa, pb = make_pyramid(rng), make_pyramid(rng)
        dual = DualAttentionFusion((8, 12, 16))
        summed = SumAttentionFusion((8, 12, 16))
        with torch.no_grad():
            f1 = dual(pa, pb)
            f2 = summed(pa, pb)
        assert not torch.allclose(f1.levels[0], f2.levels[0])


class TestFusionGradients:
    def test_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        rng = np.random.default_rng(6)
        for _ in range(5):
            level = DualAttentionFusionLevel(4).double()
            ta = torch.tensor(rng.standard_normal((3, 4)), requires_grad=True)
            tb = torch.tensor(rng.standard_normal((3, 4)), requires_grad=True)
            target = torch.tensor(rng.standard_normal((3, 4)))

            def loss_fn():
                return ((level.fuse_tokens(ta, tb) - target) ** 2).sum()

            loss = loss_fn()
            loss.backward()
            tensors = [ta, tb] + [p for p in level.parameters()]
            analytic = [t.grad.numpy().copy() for t in tensors]
            numeric = oracles.finite_diff_grad(loss_fn, tensors)
            for a, n in zip(analytic, numeric):
                assert oracles.relative_error(a, n) < 1e-4
