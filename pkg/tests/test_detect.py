"""Detection head: shapes, assignment vs brute force, loss properties, NMS."""

import numpy as np
import pytest
import torch

import oracles
from pairvid.backbone import BackboneConfig, DualBranchBackbone, FeaturePyramid
from pairvid.boxes import BBox
from pairvid.detect import (
    CENTER_RADIUS,
    AssignmentMap,
    DetectionHead,
    assign_targets,
    decode_and_nms,
    decode_level_boxes,
    detection_loss,
    flatten_cells,
    greedy_nms,
)


def make_pred(batch=1, num_classes=2, sizes=((16, 16), (8, 8), (4, 4)), seed=0):
    torch.manual_seed(seed)
    head = DetectionHead((32, 64, 128), num_classes=num_classes)
    levels = [torch.randn(batch, d, h, w) for d, (h, w) in zip((32, 64, 128), sizes)]
    pyramid = FeaturePyramid(levels=levels, input_hw=(sizes[0][0] * 8, sizes[0][1] * 8))
    with torch.no_grad():
        return head(pyramid)


class TestHeadForward:
    def test_total_cells_128(self):
        pred = make_pred()
        assert pred.total_cells() == 16 * 16 + 8 * 8 + 4 * 4 == 336

    def test_feature_shapes(self):
        pred = make_pred(batch=2)
        for cls_feat, reg_feat in zip(pred.cls_feat, pred.reg_feat):
            assert cls_feat.shape == reg_feat.shape
            assert cls_feat.shape[1] == 64

    def test_eval_determinism(self):
        torch.manual_seed(3)
        head = DetectionHead((32, 64, 128)).eval()
        levels = [torch.randn(1, d, s, s) for d, s in zip((32, 64, 128), (16, 8, 4))]
        pyr = FeaturePyramid(levels=levels, input_hw=(128, 128))
        with torch.no_grad():
            p1 = head(pyr)
            p2 = head(pyr)
        for a, b in zip(p1.cls_logits, p2.cls_logits):
            assert torch.equal(a, b)


class TestAssignment:
    LEVELS = [(16, 16), (8, 8), (4, 4)]

    def test_box_covering_one_cell_center(self):
        # Cell (1, 1) at stride 8 has center (12, 12).
        box = BBox(10.0, 10.0, 14.0, 14.0)
        amap = assign_targets([box], self.LEVELS)
        assert amap.assigned[0][1, 1] == 0
        assert (amap.assigned[0] >= 0).sum() == 1

    def test_no_gt_all_negative(self):
        amap = assign_targets([], self.LEVELS)
        assert amap.num_positives == 0
        assert all((a == -1).all() for a in amap.assigned)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            boxes = []
            for _ in range(rng.integers(1, 4)):
                x0, y0 = rng.uniform(0, 90, 2)
                w, h = rng.uniform(8, 36, 2)
                boxes.append(BBox(x0, y0, x0 + w, y0 + h))
            got = assign_targets(boxes, self.LEVELS)
            expect = oracles.assign_cells(
                [b.as_array() for b in boxes], self.LEVELS, (8, 16, 32), CENTER_RADIUS
            )
            for a, e in zip(got.assigned, expect):
                assert np.array_equal(a, e)


class TestDetectionLoss:
    def test_perfect_predictions_near_zero(self):
        pred = make_pred()
        box = BBox(40.0, 40.0, 72.0, 72.0)
        amap = assign_targets([box], [(16, 16), (8, 8), (4, 4)])
        # Saturate logits and write exact regression targets.
        for li, stride in enumerate(pred.strides):
            pred.objectness[li] = torch.where(
                torch.from_numpy(amap.assigned[li] >= 0)[None, None], 30.0, -30.0
            )
            cls = torch.full_like(pred.cls_logits[li], -30.0)
            cls[:, 1] = torch.where(torch.from_numpy(amap.assigned[li] >= 0)[None], 30.0, -30.0)
            pred.cls_logits[li] = cls
            reg = torch.zeros_like(pred.box_reg[li])
            h, w = amap.assigned[li].shape
            for r in range(h):
                for c in range(w):
                    if amap.assigned[li][r, c] >= 0:
                        cx, cy = box.center
                        reg[0, 0, r, c] = cx / stride - c - 0.5
                        reg[0, 1, r, c] = cy / stride - r - 0.5
                        reg[0, 2, r, c] = np.log(box.width / stride)
                        reg[0, 3, r, c] = np.log(box.height / stride)
            pred.box_reg[li] = reg
        comps = detection_loss(pred, [box], [1], assignment=amap)
        assert comps["total"].item() < 1e-3

    def test_zero_positive_normalization(self):
        pred = make_pred(seed=5)
        comps = detection_loss(pred, [], [])
        assert comps["box"].item() == 0.0
        assert comps["cls"].item() == 0.0
        assert comps["obj"].item() > 0.0

    def test_loss_nonnegative(self):
        pred = make_pred(seed=6)
        comps = detection_loss(pred, [BBox(30, 30, 70, 70)], [0])
        for name in ("box", "obj", "cls", "total"):
            assert comps[name].item() >= 0.0

    def test_box_term_decreases_toward_target(self):
        # Interpolate a predicted box toward its assigned gt in
        # (center, size) space; the box term must not increase.
        box = BBox(40.0, 40.0, 72.0, 72.0)
        sizes = [(16, 16), (8, 8), (4, 4)]
        amap = assign_targets([box], sizes)
        losses = []
        for t in np.linspace(0.0, 1.0, 5):
            pred = make_pred(seed=7)
            for li, stride in enumerate(sizes and (8, 16, 32)):
                reg = torch.zeros_like(pred.box_reg[li])
                h, w = amap.assigned[li].shape
                for r in range(h):
                    for c in range(w):
                        if amap.assigned[li][r, c] >= 0:
                            # Start offset by (12 px, 8 px) and 0.6 log-size.
                            cx, cy = box.center
                            reg[0, 0, r, c] = (cx + (1 - t) * 12.0) / stride - c - 0.5
                            reg[0, 1, r, c] = (cy + (1 - t) * 8.0) / stride - r - 0.5
                            reg[0, 2, r, c] = np.log(box.width / stride) + (1 - t) * 0.6
                            reg[0, 3, r, c] = np.log(box.height / stride) + (1 - t) * 0.6
                pred.box_reg[li] = reg
            losses.append(detection_loss(pred, [box], [1], assignment=amap)["box"].item())
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            # Tiny 2-cell grid in double precision.
            cls_logits = torch.tensor(rng.standard_normal((1, 2, 1, 2)), requires_grad=True)
            objectness = torch.tensor(rng.standard_normal((1, 1, 1, 2)), requires_grad=True)
            box_reg = torch.tensor(rng.standard_normal((1, 4, 1, 2)) * 0.3, requires_grad=True)
            feat = torch.zeros(1, 4, 1, 2)
            from pairvid.detect import GridPrediction

            gt = [BBox(2.0, 1.0, 14.0, 9.0)]

            def loss_fn():
                pred = GridPrediction(
                    cls_logits=[cls_logits], objectness=[objectness], box_reg=[box_reg],
                    cls_feat=[feat], reg_feat=[feat], strides=(8,), input_hw=(8, 16),
                )
                return detection_loss(pred, gt, [1])["total"]

            loss = loss_fn()
            loss.backward()
            tensors = [cls_logits, objectness, box_reg]
            analytic = [t.grad.numpy().copy() for t in tensors]
            numeric = oracles.finite_diff_grad(loss_fn, tensors)
            for a, n in zip(analytic, numeric):
                assert oracles.relative_error(a, n) < 1e-4


class TestDecodeAndNMS:
    def test_identical_boxes_keep_highest(self):
        boxes = np.array([[10, 10, 30, 30], [10, 10, 30, 30]], dtype=float)
        scores = np.array([0.8, 0.9])
        keep = greedy_nms(boxes, scores, [(0, 0, 0), (0, 0, 1)], 0.5)
        assert keep == [1]

    def test_disjoint_boxes_all_survive(self):
        boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30], [40, 0, 50, 10]], dtype=float)
        scores = np.array([0.5, 0.9, 0.7])
        keep = greedy_nms(boxes, scores, [(0, 0, 0), (0, 0, 1), (0, 0, 2)], 0.5)
        assert sorted(keep) == [0, 1, 2]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = 50
            x0 = rng.uniform(0, 100, n)
            y0 = rng.uniform(0, 100, n)
            boxes = np.stack([x0, y0, x0 + rng.uniform(5, 40, n), y0 + rng.uniform(5, 40, n)], 1)
            scores = rng.uniform(0, 1, n)
            keys = [(0, i, 0) for i in range(n)]
            assert greedy_nms(boxes, scores, keys, 0.5) == oracles.nms(boxes, scores, keys, 0.5)

    def test_score_composition(self):
        pred = make_pred(seed=8)
        scores, classes, _, keys = flatten_cells(pred)
        # Recompute score for a few cells directly from the logits.
        for idx in (0, 100, 300):
            level, r, c = keys[idx]
            obj = torch.sigmoid(pred.objectness[level][0, 0, r, c])
            cls_p = torch.sigmoid(pred.cls_logits[level][0, :, r, c])
            assert abs(scores[idx] - float(obj * cls_p.max())) < 1e-6
            assert classes[idx] == int(cls_p.argmax())

    def test_decode_respects_stride_arithmetic(self):
        reg = torch.zeros(1, 4, 2, 2)
        boxes = decode_level_boxes(reg, 16)
        # Cell (0, 0): center (8, 8), size 16.
        np.testing.assert_allclose(boxes[0, 0, 0].numpy(), [0, 0, 16, 16], atol=1e-6)
        np.testing.assert_allclose(boxes[0, 1, 1].numpy(), [16, 16, 32, 32], atol=1e-6)

    def test_output_sorted_and_antichain(self):
        pred = make_pred(seed=9)
        dets = decode_and_nms(pred, score_thresh=0.01, iou_thresh=0.5)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        from pairvid.boxes import box_iou

        by_cls = {}
        for d in dets:
            by_cls.setdefault(d.cls, []).append(d)
        for group in by_cls.values():
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    assert box_iou(group[i].box, group[j].box) <= 0.5 + 1e-9

    def test_bad_thresholds_rejected(self):
        pred = make_pred()
        with pytest.raises(ValueError):
            decode_and_nms(pred, score_thresh=-0.1)
