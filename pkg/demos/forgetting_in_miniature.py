"""
Forgetting and distillation in miniature
========================================

A shortened version of the main experiment: a 32x32 camera, four steps, a
few hundred iterations per step. The naive strategy fine-tunes one network
step after step; unikd starts every step from the previous teacher and
alternates supervised batches with distillation batches rendered by that
teacher from randomly inquired poses inside the stored pose ranges.

The final model of each strategy is evaluated on the test views of every
step. Expect naive to be good only on the last step. Takes a few minutes on
one CPU core.

Run with ``python3 demos/forgetting_in_miniature.py``.
"""
import time

import numpy as np

from unikd import diffcore as dc
from unikd.continual import RunConfig, TrainSchedule, run_experiment
from unikd.evalkit import build_report, format_summary
from unikd.field import FieldConfig
from unikd.geometry import Intrinsics
from unikd.sceneworld import TrajectorySpec, default_scene, generate_incremental_dataset

dc.tune_allocator()

traj = TrajectorySpec(n_views=40, steps=4)
steps = generate_incremental_dataset(default_scene(), traj, Intrinsics.from_fov(32, 32, 45), 0.4, 2.6, 0.125)
print(f"{len(steps)} steps, train/test views per step:",
      [(len(s.train_views), len(s.test_views)) for s in steps])

cfg = RunConfig(field=FieldConfig(dtype="float32"),
                schedule=TrainSchedule(iters_per_step=200, rays_per_batch=256, learning_rate=1e-3))

records = []
for name in ("naive", "unikd", "batch"):
    t0 = time.perf_counter()
    rec = run_experiment(steps, name, cfg)
    records.append(rec)
    psnrs = ", ".join(f"{e['psnr']:.1f}" for e in rec["per_step"])
    print(f"{name:>6}: per-step PSNR [{psnrs}] dB, {time.perf_counter() - t0:.0f} s")

# what unikd kept between steps: the teacher's parameters and one 12-float range per step
log = records[1]["train_log"]
print("unikd distillation iterations per step:", [e["dis_iters"] for e in log])
print("unikd calibrated thresholds:", [None if e["beta_thr"] is None else round(e["beta_thr"], 3) for e in log])
print("auxiliary memory (bytes):", {r["strategy"]: r["memory_bytes"][-1] for r in records})

summary = build_report(records, "demo_out/miniature")
print(format_summary(summary))
print("forgetting gap vs batch on step 0:",
      {k: round(v["forgetting_gap"][0], 2) for k, v in summary["strategies"].items()})
