#!/usr/bin/env python3
"""Overfit the single-frame detector on four frames (about half a minute).

A correct detection path must memorize four frames to AP50 = 1.0 within 200
iterations; this is the fastest end-to-end sanity check of backbone + fusion +
head + loss + decoding working together.

Run:  python3 demos/03_detection_overfit.py
"""

import time

from pairvid.data import CaseRecord
from pairvid.datagen import SyntheticConfig, generate_case
from pairvid.pipeline import ModelBundle, detect_frame
from pairvid.temporal import TemporalAggregator
from pairvid.train import RunConfig, train_stage1

cfg = SyntheticConfig(image_size=128, num_cases=1, frames_per_case=8, seed=5)
case = generate_case(cfg, 0)
four = CaseRecord(case.case_id, case.label, case.frames[:4], case.center_id)
print(f"memorizing 4 frames of a {case.label} case (label index {four.label_index})")

config = RunConfig(
    epochs=200, batch_size=4, lr=0.02, warmup_epochs=5, no_aug_epochs=200,
    eval_interval=50, seed=0,
)
t0 = time.time()
result = train_stage1(config, [four], [four])
print(f"trained 200 iterations in {time.time() - t0:.0f}s; AP50 = {result.best_ap50}")

bundle = ModelBundle(detector=result.detector, aggregator=TemporalAggregator())
dets = detect_frame(bundle, four.frames[0], score_thresh=0.3)
truth = four.frames[0].box
print(f"frame 0 ground truth: [{truth.x_min:.1f}, {truth.y_min:.1f}, {truth.x_max:.1f}, {truth.y_max:.1f}]")
for d in dets[:3]:
    b = d.box
    print(f"  det: cls={d.cls} score={d.score:.3f} box=[{b.x_min:.1f}, {b.y_min:.1f}, {b.x_max:.1f}, {b.y_max:.1f}]"
          f" (level {d.level}, cell {d.cell})")
