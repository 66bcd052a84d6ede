"""Backbone contracts: pyramid shapes, weight sharing, sample isolation."""

import pytest
import torch

from pairvid.backbone import BackboneConfig, DualBranchBackbone


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return DualBranchBackbone(BackboneConfig()).eval()


class TestShapes:
    def test_level_shapes_128(self, backbone):
        x = torch.rand(1, 1, 128, 128)
        pyr = backbone(x)
        assert [tuple(t.shape[-2:]) for t in pyr.levels] == [(16, 16), (8, 8), (4, 4)]
        assert [t.shape[1] for t in pyr.levels] == [32, 64, 128]

    def test_non_divisible_input_padded_and_cropped(self, backbone):
        pyr = backbone(torch.rand(1, 1, 100, 100))
        # ceil(100 / {8, 16, 32}) = {13, 7, 4}
        assert [tuple(t.shape[-2:]) for t in pyr.levels] == [(13, 13), (7, 7), (4, 4)]
        assert pyr.input_hw == (100, 100)

    def test_bad_rank_rejected(self, backbone):
        with pytest.raises(ValueError):
            backbone(torch.rand(1, 128, 128))


class TestWeightSharing:
    def test_equal_inputs_equal_pyramids(self, backbone):
        x = torch.rand(2, 1, 64, 64)
        with torch.no_grad():
            pa, pb = backbone.extract_pair(x, x.clone())
        for la, lb in zip(pa.levels, pb.levels):
            assert torch.equal(la, lb)

    def test_single_parameter_set(self, backbone):
        # There is literally one module: extract_pair runs self.forward twice.
        params = list(backbone.parameters())
        assert len(params) > 0
        assert backbone.extract_pair.__self__ is backbone

    def test_mismatched_shapes_rejected(self, backbone):
        with pytest.raises(ValueError, match="differ"):
            backbone.extract_pair(torch.rand(1, 1, 64, 64), torch.rand(1, 1, 32, 32))


class TestDeterminismAndIsolation:
    def test_eval_mode_repeatable(self, backbone):
        x = torch.rand(1, 1, 96, 96)
        with torch.no_grad():
            p1 = backbone(x)
            p2 = backbone(x)
        for a, b in zip(p1.levels, p2.levels):
            assert torch.equal(a, b)

    def test_batch_permutation_equivariance(self, backbone):
        x = torch.rand(4, 1, 64, 64)
        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            out = backbone(x)
            out_perm = backbone(x[perm])
        for a, b in zip(out.levels, out_perm.levels):
            assert torch.allclose(a[perm], b, atol=1e-6)

    def test_no_cross_sample_leakage(self, backbone):
        x = torch.rand(3, 1, 64, 64)
        y = x.clone()
        y[1] = torch.rand(1, 64, 64)  # change another batch entry
        with torch.no_grad():
            pa = backbone(x)
            pb = backbone(y)
        for la, lb in zip(pa.levels, pb.levels):
            assert torch.equal(la[0], lb[0])
            assert torch.equal(la[2], lb[2])


class TestConfigValidation:
    def test_decreasing_dims_rejected(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            BackboneConfig(stage_dims=(64, 32, 128))

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(patch_size=0)
