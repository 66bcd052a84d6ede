"""Metric correctness against brute-force PR computation and closed forms."""

import numpy as np
import pytest

import oracles
from pairvid.boxes import BBox
from pairvid.detect import DetectionBox
from pairvid.evaluation import (
    ABLATION_GRID,
    average_precision,
    detection_metrics,
    diagnosis_metrics,
    majority_vote,
    read_csv_rows,
    write_csv_rows,
)


def random_frames(rng, num_frames=10, max_preds=6, max_gts=3):
    frame_preds, frame_gts = [], []
    for _ in range(num_frames):
        gts = []
        for _ in range(rng.integers(0, max_gts + 1)):
            x0, y0 = rng.uniform(0, 70, 2)
            w, h = rng.uniform(10, 30, 2)
            gts.append(BBox(x0, y0, x0 + w, y0 + h))
        preds = []
        for _ in range(rng.integers(0, max_preds + 1)):
            if gts and rng.random() < 0.6:
                base = gts[rng.integers(len(gts))]
                jitter = rng.uniform(-6, 6, 4)
                box = BBox(
                    base.x_min + jitter[0], base.y_min + jitter[1],
                    max(base.x_max + jitter[2], base.x_min + jitter[0] + 2),
                    max(base.y_max + jitter[3], base.y_min + jitter[1] + 2),
                )
            else:
                x0, y0 = rng.uniform(0, 70, 2)
                box = BBox(x0, y0, x0 + rng.uniform(5, 25), y0 + rng.uniform(5, 25))
            preds.append((box, float(rng.uniform())))
        frame_preds.append(preds)
        frame_gts.append(gts)
    return frame_preds, frame_gts


class TestAveragePrecision:
    def test_perfect_single_match(self):
        gt = BBox(10, 10, 30, 30)
        for thresh in (0.5, 0.75):
            assert average_precision([[(gt, 0.9)]], [[gt]], thresh) == 1.0

    def test_no_predictions_zero(self):
        assert average_precision([[]], [[BBox(0, 0, 10, 10)]], 0.5) == 0.0

    def test_no_ground_truth_rejected(self):
        with pytest.raises(ValueError, match="no ground-truth"):
            average_precision([[(BBox(0, 0, 5, 5), 0.5)]], [[]], 0.5)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            frame_preds, frame_gts = random_frames(rng)
            if sum(len(g) for g in frame_gts) == 0:
                continue
            got = average_precision(frame_preds, frame_gts, 0.5)
            expect = oracles.average_precision(
                [[(b.as_array(), s) for b, s in preds] for preds in frame_preds],
                [[g.as_array() for g in gts] for gts in frame_gts],
                0.5,
            )
            assert abs(got - expect) < 1e-9

    def test_invariant_to_monotone_score_transform(self):
        rng = np.random.default_rng(1)
        frame_preds, frame_gts = random_frames(rng)
        while sum(len(g) for g in frame_gts) == 0:
            frame_preds, frame_gts = random_frames(rng)
        base = average_precision(frame_preds, frame_gts, 0.5)
        squashed = [[(b, s**3) for b, s in preds] for preds in frame_preds]
        assert average_precision(squashed, frame_gts, 0.5) == pytest.approx(base, abs=1e-12)

    def test_ap_is_one_iff_perfect_threshold_exists(self):
        gt1, gt2 = BBox(0, 0, 20, 20), BBox(50, 50, 80, 80)
        # Exact matches ranked above one stray false positive: AP stays 1.
        preds = [[(gt1, 0.9), (BBox(30, 0, 45, 15), 0.2)], [(gt2, 0.8)]]
        assert average_precision(preds, [[gt1], [gt2]], 0.5) == 1.0
        # False positive ranked above a match: AP < 1.
        preds = [[(gt1, 0.9), (BBox(30, 0, 45, 15), 0.85)], [(gt2, 0.8)]]
        assert average_precision(preds, [[gt1], [gt2]], 0.5) < 1.0


class TestDetectionMetrics:
    def test_two_class_mean(self):
        gt0, gt1 = BBox(10, 10, 30, 30), BBox(40, 40, 70, 70)
        dets = [
            [DetectionBox(box=gt0, cls=0, score=0.9, level=0, cell=(0, 0))],
            [DetectionBox(box=gt1, cls=1, score=0.8, level=0, cell=(1, 1))],
        ]
        out = detection_metrics(dets, [[gt0], [gt1]], [[0], [1]])
        assert out["ap50"] == 1.0 and out["ap75"] == 1.0
        assert out["frame_cls_accuracy"] == 1.0

    def test_class_with_no_gt_skipped(self):
        gt = BBox(10, 10, 30, 30)
        dets = [[DetectionBox(box=gt, cls=0, score=0.9, level=0, cell=(0, 0))]]
        out = detection_metrics(dets, [[gt]], [[0]])
        assert out["ap50"] == 1.0

    def test_missing_detection_counts_wrong(self):
        gt = BBox(10, 10, 30, 30)
        out = detection_metrics([[]], [[gt]], [[1]])
        assert out["frame_cls_accuracy"] == 0.0


class TestDiagnosisMetrics:
    def test_all_correct(self):
        out = diagnosis_metrics([0, 1, 0, 1], [0, 1, 0, 1])
        assert out["accuracy"] == 1.0 and out["f1"] == 1.0

    def test_one_class_collapse_on_balanced_set(self):
        # Predicting a single class on a balanced set: accuracy 1/2,
        # macro F1 = (2/3 + 0) / 2 = 1/3.
        out = diagnosis_metrics([1, 1, 1, 1], [0, 0, 1, 1])
        assert out["accuracy"] == 0.5
        assert out["f1"] == pytest.approx(1.0 / 3.0)

    def test_matches_confusion_matrix_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(2, 50))
            pred = rng.integers(0, 2, n)
            true = rng.integers(0, 2, n)
            out = diagnosis_metrics(pred, true)
            acc = sum(int(p == t) for p, t in zip(pred, true)) / n
            f1s = []
            for cls in (0, 1):
                tp = sum(1 for p, t in zip(pred, true) if p == cls and t == cls)
                fp = sum(1 for p, t in zip(pred, true) if p == cls and t != cls)
                fn = sum(1 for p, t in zip(pred, true) if p != cls and t == cls)
                f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
            assert out["accuracy"] == pytest.approx(acc)
            assert out["f1"] == pytest.approx(np.mean(f1s))

    def test_macro_f1_invariant_under_label_swap_balanced(self):
        pred = [0, 1, 1, 0, 1, 0]
        true = [0, 0, 1, 1, 1, 0]
        base = diagnosis_metrics(pred, true)["f1"]
        flipped = diagnosis_metrics([1 - p for p in pred], [1 - t for t in true])["f1"]
        assert base == pytest.approx(flipped)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            diagnosis_metrics([], [])


class TestMajorityVote:
    def test_vote(self):
        out = majority_vote(
            ["a", "a", "a", "b"], [1, 1, 0, 0], [1, 1, 1, 0]
        )
        assert out["case_accuracy"] == 1.0


class TestAblationPlumbing:
    def test_grid_rows_match_expected_settings(self):
        assert set(ABLATION_GRID) == {(1, 1), (2, 1), (2, 2), (4, 1), (4, 2), (8, 1)}

    def test_csv_round_trip(self, tmp_path):
        rows = [
            {"clip_length": l, "interval": i, "accuracy": 0.5, "f1": 0.4, "case_accuracy": 0.6}
            for l, i in ABLATION_GRID
        ]
        path = tmp_path / "grid.csv"
        write_csv_rows(path, rows)
        back = read_csv_rows(path)
        assert len(back) == 6
        assert {(int(r["clip_length"]), int(r["interval"])) for r in back} == set(ABLATION_GRID)
