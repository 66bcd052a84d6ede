#!/usr/bin/env python3
"""The whole pipeline through the command-line interface (a few minutes).

Generates a small dataset, trains both stages, evaluates detection and
diagnosis, runs the clip-grid ablation, and dumps per-case predictions,
exactly as a batch user would.

Run:  python3 demos/05_full_pipeline_cli.py
"""

from pathlib import Path

from pairvid.cli import main

out = Path("demo_out/cli")
out.mkdir(parents=True, exist_ok=True)
config = out / "run.ini"
config.write_text("""
[dataset]
image_size = 96
num_cases = 24
frames_per_case = 8
tumor_radius_min = 10
tumor_radius_max = 16
cue_mode = both
seed = 11

[model]
image_size = 96
fusion = dual_attention

[train]
epochs = 4
batch_size = 8
lr = 0.01
warmup_epochs = 1
no_aug_epochs = 1
eval_interval = 2
seed = 0

[stage2]
clip_length = 4
clip_interval = 1
epochs = 25
lr = 0.002
batch_size = 16
""")

steps = [
    ["gen-data", "--config", str(config), "--out", str(out / "data")],
    ["train-stage1", "--config", str(config), "--data", str(out / "data"), "--out", str(out / "s1")],
    ["train-stage2", "--config", str(config), "--data", str(out / "data"),
     "--ckpt", str(out / "s1" / "stage1.npz"), "--out", str(out / "s2")],
    ["eval-detect", "--config", str(config), "--data", str(out / "data"),
     "--ckpt", str(out / "s2" / "stage2.npz"), "--out", str(out / "eval_det"), "--split", "val"],
    ["eval-video", "--config", str(config), "--data", str(out / "data"),
     "--ckpt", str(out / "s2" / "stage2.npz"), "--out", str(out / "eval_vid"), "--split", "val"],
    ["ablate", "--config", str(config), "--data", str(out / "data"),
     "--ckpt", str(out / "s1" / "stage1.npz"), "--out", str(out / "ablation")],
    ["predict", "--config", str(config), "--data", str(out / "data"),
     "--ckpt", str(out / "s2" / "stage2.npz"), "--out", str(out / "pred"), "--case", "case_0000"],
]
for argv in steps:
    print(f"\n$ pairvid {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"command failed with exit {code}"
print(f"\nall artifacts under {out}/")
