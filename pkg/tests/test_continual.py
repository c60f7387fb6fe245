import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unikd import diffcore as dc
from unikd.continual import (RANGE_BYTES, ContinualTrainer, FilterConfig, RunConfig, StepState, StrategyTag,
                             TeacherBundle, TrainSchedule, filter_views, keyframe_indices, memory_footprint,
                             public_record, run_experiment, score_view)
from unikd.errors import ConfigError, UsageError
from unikd.field import FieldConfig, FieldModel, FieldSample, snapshot_as_teacher
from unikd.geometry import Intrinsics, PoseRange, look_at_pose, range_of_poses
from unikd.renderer import SamplingConfig
from unikd.sceneworld import AccessAudit, TrajectorySpec, attach_audit, default_scene, generate_incremental_dataset

K12 = Intrinsics.from_fov(12, 12, 45)


class FlatField:
    """Constant density, color and raw uncertainty everywhere."""

    def __init__(self, density, raw_beta):
        self.density, self.raw_beta = density, raw_beta

    def query(self, x, d):
        n = len(np.asarray(x).reshape(-1, 3))
        return FieldSample(dc.constant(np.full((n, 3), 0.5)), dc.constant(np.full(n, self.density)),
                           dc.constant(np.full(n, self.raw_beta)))


def tiny_cfg(**sched):
    base = dict(iters_per_step=6, rays_per_batch=32, learning_rate=1e-3)
    base.update(sched)
    return RunConfig(field=FieldConfig(trunk_depth=2, trunk_width=16, head_width=8, pos_levels=2, dir_levels=1),
                     sampling=SamplingConfig(8, 8, True), schedule=TrainSchedule(**base),
                     filter=FilterConfig(calibration_poses=4, candidate_views_per_round=2, max_resample_rounds=2,
                                         rays_per_candidate_view=8, views_per_batch=2))


@pytest.fixture(scope="module")
def steps():
    traj = TrajectorySpec(n_views=12, steps=3)
    return generate_incremental_dataset(default_scene(), traj, K12, 0.4, 2.6, 0.25, seed=0)


def test_schedule_pattern_one_to_one():
    assert "".join(TrainSchedule().pattern(10)) == "SDSDSDSDSD"
    assert "".join(TrainSchedule(sup_iters=2, dis_iters=1).pattern(6)) == "SSDSSD"
    assert set(TrainSchedule(sup_iters=1, dis_iters=0).pattern(5)) == {"S"}


@given(st.integers(0, 9), st.integers(0, 9), st.integers(1, 500))
def test_schedule_supervised_count(x, y, n):
    if x + y == 0:
        return
    count = TrainSchedule(sup_iters=x, dis_iters=y).pattern(n).count("S")
    assert count == math.ceil(n * x / (x + y))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainSchedule(sup_iters=0, dis_iters=0)
    with pytest.raises(ConfigError):
        TrainSchedule(sup_iters=-1)
    with pytest.raises(ConfigError):
        FilterConfig(views_per_batch=0)
    with pytest.raises(ConfigError):
        FilterConfig(fallback="retry")
    with pytest.raises(ConfigError):
        StrategyTag("replay-everything")
    with pytest.raises(ConfigError):
        StrategyTag("keyframe-replay", 0)


def test_score_view_constant_fields():
    pose = look_at_pose((0.0, -3.0, 0.0))
    cfg = FilterConfig(rays_per_candidate_view=16)
    s = SamplingConfig(16, 0, False)
    opaque = score_view(FlatField(1e4, 1.0), pose, K12, 1.0, 5.0, cfg, s, np.random.default_rng(0))
    assert opaque == pytest.approx(math.log(2) + 0.01, abs=1e-9)
    clear = score_view(FlatField(0.0, 3.0), pose, K12, 1.0, 5.0, cfg, s, np.random.default_rng(0))
    assert clear == 0.01
    model = FieldModel()
    a = score_view(model, pose, K12, 1.0, 5.0, cfg, SamplingConfig(), np.random.default_rng(5))
    b = score_view(model, pose, K12, 1.0, 5.0, cfg, SamplingConfig(), np.random.default_rng(5))
    assert a == b


def test_filter_acceptance_is_strict():
    ranges = [PoseRange((0,) * 6, (1,) * 6, 0)]
    cfg = FilterConfig(candidate_views_per_round=2, max_resample_rounds=1, views_per_batch=2)
    res = filter_views(None, ranges, K12, 1, 2, cfg, SamplingConfig(), np.random.default_rng(0), 0.4,
                       scorer=lambda poses: [0.2, 0.5])
    assert [s for _, _, s in res.accepted] == [0.2] and not res.fallback_used
    res = filter_views(None, ranges, K12, 1, 2, cfg, SamplingConfig(), np.random.default_rng(0), 0.4,
                       scorer=lambda poses: [0.4, 0.4])
    assert res.fallback_used


def test_filter_below_floor_falls_back():
    ranges = [PoseRange((0,) * 6, (1,) * 6, 0)]
    cfg = FilterConfig(candidate_views_per_round=3, max_resample_rounds=2, views_per_batch=2)
    scores = iter([[0.3, 0.1, 0.2], [0.5, 0.05, 0.6]])
    res = filter_views(None, ranges, K12, 1, 2, cfg, SamplingConfig(), np.random.default_rng(0), 0.005,
                       scorer=lambda poses: next(scores))
    assert res.fallback_used and res.scored == 6
    assert [s for _, _, s in res.accepted] == [0.05, 0.1]
    skip = replace(cfg, fallback="skip-distill")
    res = filter_views(None, ranges, K12, 1, 2, skip, SamplingConfig(), np.random.default_rng(0), 0.005,
                       scorer=lambda poses: [1.0] * len(poses))
    assert res.accepted == [] and res.fallback_used
    with pytest.raises(UsageError):
        filter_views(None, [], K12, 1, 2, cfg, SamplingConfig(), np.random.default_rng(0), 1.0)


def test_filter_accepted_poses_lie_in_ranges():
    ranges = [PoseRange((0, 0, 0, 0.1, 0.1, 0.1), (1, 1, 1, 0.2, 0.2, 0.2), 0),
              PoseRange((5, 5, 5, 1.0, 1.0, 1.0), (6, 6, 6, 1.1, 1.1, 1.1), 1)]
    res = filter_views(None, ranges, K12, 1, 2, FilterConfig(), SamplingConfig(), np.random.default_rng(1), 1.0,
                       scorer=lambda poses: [0.5] * len(poses))
    for pose, k, _ in res.accepted:
        assert ranges[k].contains(pose, tol=1e-12)


def test_keyframe_indices():
    assert keyframe_indices(8, 1) == [0]
    assert keyframe_indices(9, 3) == [0, 4, 8]
    assert keyframe_indices(3, 5) == [0, 1, 2]


def test_memory_accounting_shapes():
    model = FieldModel()
    teacher = snapshot_as_teacher(model)
    img = np.zeros((64, 64, 3), np.float32)
    sizes = {}
    for T in (2, 5, 10):
        ranges = [PoseRange((0,) * 6, (0,) * 6, k) for k in range(T)]
        uk = memory_footprint("unikd", StepState(bundle=TeacherBundle(teacher, ranges), ranges=ranges))
        assert uk["bytes"] == model.params.total_count * 8 + 96 * T
        for k in (1, 3):
            rep = memory_footprint(StrategyTag("keyframe-replay", k),
                                   StepState(replay=[(0, 0, img, None)] * (T * k)))
            assert rep["bytes"] == T * k * img.nbytes
        assert memory_footprint("naive", StepState())["bytes"] == 0
        sizes[T] = uk["bytes"]
    assert RANGE_BYTES == 96
    assert (sizes[10] - sizes[2]) / sizes[2] < 0.01


def test_bundle_mismatch_is_usage_error(steps):
    trainer = ContinualTrainer("unikd", tiny_cfg())
    with pytest.raises(UsageError):
        trainer.train_one_step(1, steps[1], StepState())
    with pytest.raises(UsageError):
        ContinualTrainer("batch", tiny_cfg()).train_one_step(0, steps[0], StepState())


def test_unikd_steps(steps):
    trainer = ContinualTrainer("unikd", tiny_cfg())
    s0 = trainer.train_one_step(0, steps[0], StepState())
    log0 = s0.log[-1]
    assert log0["dis_iters"] == 0 and log0["sup_iters"] == 6 and set(log0["pattern_head"]) == {"S"}
    assert s0.bundle.steps_covered == 1 and s0.bundle.teacher.is_teacher
    c0 = s0.bundle.teacher.checksum()
    s1 = trainer.train_one_step(1, steps[1], s0)
    assert s1.bundle.steps_covered == 2 and len(s1.ranges) == 2
    assert s1.bundle.teacher.checksum() != c0
    assert s0.bundle.teacher.checksum() == c0
    log1 = s1.log[-1]
    assert log1["pattern_head"] == "SDSDSD" and log1["sup_iters"] == 3
    assert log1["max_accepted_score"] is None or log1["max_accepted_score"] < log1["beta_thr"]
    assert s1.model.step_trained_through == 1 and s1.bundle.teacher.step_trained_through == 1


def test_unikd_never_reads_past_steps(steps):
    audit = AccessAudit()
    attach_audit(steps, audit)
    try:
        run_experiment(steps, "unikd", tiny_cfg(iters_per_step=4), audit=audit)
    finally:
        attach_audit(steps, None)
    assert audit.reads and audit.violations() == []
    during = {(a, s) for a, s, _ in audit.reads if a is not None}
    assert during == {(0, 0), (1, 1), (2, 2)}


def test_keyframe_replay_buffer(steps):
    trainer = ContinualTrainer(StrategyTag("keyframe-replay", 2), tiny_cfg(iters_per_step=2))
    state = StepState()
    for t in range(3):
        state = trainer.train_one_step(t, steps[t], state)
        assert len(state.replay) == 2 * (t + 1)
        assert memory_footprint("keyframe-replay", state)["bytes"] == 2 * (t + 1) * 12 * 12 * 3 * 4


def test_naive_record_and_determinism(steps, tmp_path):
    cfg = tiny_cfg(iters_per_step=4)
    a = run_experiment(steps, "naive", cfg, out_dir=tmp_path / "a")
    b = run_experiment(steps, "naive", cfg, out_dir=tmp_path / "b")
    assert a["memory_bytes"] == [0, 0, 0]
    assert len(a["per_step"]) == 3 and a["avg_psnr"] == pytest.approx(np.mean([e["psnr"] for e in a["per_step"]]))
    assert (tmp_path / "a" / "record.json").read_bytes() == (tmp_path / "b" / "record.json").read_bytes()
    assert json.loads((tmp_path / "a" / "record.json").read_text()) == json.loads(json.dumps(public_record(a)))
    for t in range(3):
        assert (tmp_path / "a" / "ckpt" / f"step_{t:02d}" / "model.unkd").exists()
    assert len(json.loads((tmp_path / "a" / "timing.json").read_text())["wall_seconds_per_step"]) == 3
    assert a["model_checksum"] == b["model_checksum"]


@pytest.mark.parametrize("strategy", ["unikd", "keyframe-replay"])
def test_resume_matches_uninterrupted_run(steps, tmp_path, strategy):
    cfg = tiny_cfg(iters_per_step=4)
    full = run_experiment(steps, strategy, cfg, out_dir=tmp_path / "full")
    assert run_experiment(steps, strategy, cfg, out_dir=tmp_path / "cut", stop_after=0) is None
    resumed = run_experiment(steps, strategy, cfg, out_dir=tmp_path / "cut", resume=True)
    assert resumed["model_checksum"] == full["model_checksum"]
    assert (tmp_path / "cut" / "record.json").read_bytes() == (tmp_path / "full" / "record.json").read_bytes()


def test_batch_strategy(steps):
    cfg = tiny_cfg(iters_per_step=2)
    rec = run_experiment(steps, "batch", cfg)
    assert rec["train_log"][0]["sup_iters"] == 6
    n_train = [sum(v.split == "train" for v in s.views) for s in steps]
    expect = np.cumsum(n_train) * (12 * 12 * 3 * 4 + 48)
    assert rec["memory_bytes"] == expect.tolist()


def test_distill_only_training_reduces_teacher_gap(steps):
    cfg = tiny_cfg(iters_per_step=4)
    s0 = ContinualTrainer("naive", cfg).train_one_step(0, steps[0], StepState())
    bundle = TeacherBundle(snapshot_as_teacher(s0.model), s0.ranges)
    before = bundle.teacher.checksum()
    audit = AccessAudit()
    attach_audit(steps, audit)
    try:
        student, losses = ContinualTrainer("unikd", cfg).train_distill_only(bundle, steps[1], 30)
    finally:
        attach_audit(steps, None)
    assert audit.reads == []
    assert bundle.teacher.checksum() == before
    assert len(losses) == 30 and np.mean(losses[-5:]) < np.mean(losses[:5])
    assert student.role == "student" and student.optimizer is None


def test_distill_only_restarts_optimizer_and_threshold(steps, monkeypatch):
    import unikd.continual as continual
    cfg = tiny_cfg(iters_per_step=4)
    s0 = ContinualTrainer("naive", cfg).train_one_step(0, steps[0], StepState())
    bundle = TeacherBundle(snapshot_as_teacher(s0.model), s0.ranges)
    calls, real = [], continual.calibrate_threshold
    monkeypatch.setattr(continual, "calibrate_threshold", lambda *a, **k: calls.append(1) or real(*a, **k))
    trainer = ContinualTrainer("unikd", cfg)
    counts = []
    real_dis = trainer._dis_step
    trainer._dis_step = lambda student, *a: counts.append(student.optimizer.step_count) or real_dis(student, *a)
    trainer.train_distill_only(bundle, steps[1], 25, restart_every=10)
    assert len(calls) == 3
    assert counts == list(range(10)) * 2 + list(range(5))
