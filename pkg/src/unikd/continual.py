"""Incremental training: student-teacher distillation and the baseline strategies.

Strategies
----------
``unikd``            student initialised from the previous teacher; supervised
                     (uncertainty-weighted) and distillation iterations alternate
                     in an ``x:y`` pattern; distillation rays come from random
                     inquirer poses accepted by the uncertainty filter.
``naive``            the same network trained step after step with the plain
                     rendering loss and nothing carried over but the weights.
``keyframe-replay``  naive plus a buffer of a few frames per finished step,
                     mixed into every later batch.
``batch``            one training run on the union of all steps.
"""
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, UsageError
from .evalkit import psnr, ssim
from .field import FieldConfig, FieldModel, init_student_from_teacher, snapshot_as_teacher
from .geometry import PoseRange, rays_for_view, range_of_poses, sample_pose, Rays
from .objectives import LossConfig, distill_loss, rgb_loss, supervised_loss
from .renderer import SamplingConfig, render_rays, render_rays_nograd, render_view

STRATEGIES = ("unikd", "naive", "keyframe-replay", "batch")


@dataclass(frozen=True)
class TrainSchedule:
    sup_iters: int = 1
    dis_iters: int = 1
    iters_per_step: int = 2000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    # batch training runs iters_per_step * batch_iter_factor * T iterations
    batch_iter_factor: float = 1.0

    def __post_init__(self):
        if self.sup_iters < 0 or self.dis_iters < 0 or self.sup_iters + self.dis_iters < 1:
            raise ConfigError("schedule", "need sup_iters, dis_iters >= 0 with sup_iters + dis_iters >= 1")
        if self.iters_per_step < 1:
            raise ConfigError("schedule.iters_per_step", "must be >= 1")
        if self.rays_per_batch < 1:
            raise ConfigError("schedule.rays_per_batch", "must be >= 1")

    def kind(self, i):
        """'S' (supervised) or 'D' (distillation) for iteration ``i``; 1:1 gives S on even i.

        Supervised iterations are spread evenly: the first ``n`` iterations
        hold exactly ``ceil(n x / (x + y))`` of them for every ``n``.
        """
        x, c = self.sup_iters, self.sup_iters + self.dis_iters
        return "S" if -(-(i + 1) * x // c) > -(-i * x // c) else "D"

    def pattern(self, n):
        return [self.kind(i) for i in range(n)]


@dataclass(frozen=True)
class FilterConfig:
    beta_thr: float = None
    calibration_poses: int = 64
    calibration_quantile: float = 0.9
    candidate_views_per_round: int = 8
    max_resample_rounds: int = 4
    rays_per_candidate_view: int = 64
    views_per_batch: int = 8
    fallback: str = "lowest-uncertainty"
    gate: str = "student"

    def __post_init__(self):
        for key in ("calibration_poses", "candidate_views_per_round", "max_resample_rounds",
                    "rays_per_candidate_view", "views_per_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"filter.{key}", "must be >= 1")
        if self.fallback not in ("lowest-uncertainty", "skip-distill"):
            raise ConfigError("filter.fallback", "must be 'lowest-uncertainty' or 'skip-distill'")
        if self.gate not in ("student", "teacher"):
            raise ConfigError("filter.gate", "must be 'student' or 'teacher'")
        if not 0 < self.calibration_quantile <= 1:
            raise ConfigError("filter.calibration_quantile", "must lie in (0, 1]")


@dataclass(frozen=True)
class StrategyTag:
    name: str = "unikd"
    kr_keyframes_per_step: int = 1

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {self.name!r}")
        if self.name == "keyframe-replay" and self.kr_keyframes_per_step < 1:
            raise ConfigError("kr_keyframes_per_step", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    field: FieldConfig = FieldConfig()
    sampling: SamplingConfig = SamplingConfig()
    loss: LossConfig = LossConfig()
    schedule: TrainSchedule = TrainSchedule()
    filter: FilterConfig = FilterConfig()
    seed: int = 0
    eval_train_views: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class TeacherBundle:
    teacher: FieldModel
    pose_ranges: list

    @property
    def steps_covered(self):
        return len(self.pose_ranges)


@dataclass
class StepState:
    """Everything carried from one step to the next."""

    model: FieldModel = None
    bundle: TeacherBundle = None
    replay: list = field(default_factory=list)     # (step, view index, image, pose)
    ranges: list = field(default_factory=list)
    log: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# ray pools


@dataclass
class RayPool:
    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    t_near: float
    t_far: float

    def __len__(self):
        return len(self.origins)

    def draw(self, n, rng):
        idx = rng.integers(len(self.origins), size=n)
        return Rays(self.origins[idx], self.directions[idx], self.t_near, self.t_far), self.colors[idx]


def ray_pool(images_poses, K, t_near, t_far):
    origins, dirs, cols = [], [], []
    for image, pose in images_poses:
        r = rays_for_view(pose, K, None, t_near, t_far)
        origins.append(r.origins)
        dirs.append(r.directions)
        cols.append(np.asarray(image, dtype=np.float64).reshape(-1, 3))
    return RayPool(np.concatenate(origins), np.concatenate(dirs), np.concatenate(cols), t_near, t_far)


# ---------------------------------------------------------------------------
# uncertainty filter


def score_views(model, poses, K, t_near, t_far, cfg, sampling, rng, beta_min=0.01, background=None):
    """Mean composited uncertainty over ``cfg.rays_per_candidate_view`` random pixels per view."""
    n = cfg.rays_per_candidate_view
    batches = []
    for p in poses:
        flat = rng.choice(K.width * K.height, size=min(n, K.width * K.height), replace=False)
        pix = np.stack([flat // K.width, flat % K.width], axis=1)
        batches.append(rays_for_view(p, K, pix, t_near, t_far))
    rays = Rays.cat(batches)
    _, beta, _, _ = render_rays_nograd(model, rays, sampling, rng, beta_min, background)
    return beta.reshape(len(poses), -1).mean(axis=1)


def score_view(model, pose, K, t_near, t_far, cfg, sampling, rng, beta_min=0.01, background=None):
    return float(score_views(model, [pose], K, t_near, t_far, cfg, sampling, rng, beta_min, background)[0])


@dataclass
class FilterResult:
    accepted: list            # (pose, k, score)
    scored: int
    fallback_used: bool


def filter_views(model, ranges, K, t_near, t_far, cfg, sampling, rng, beta_thr, beta_min=0.01,
                 background=None, scorer=None):
    """Random inquirer plus uncertainty gate: keep views with mean uncertainty < ``beta_thr``.

    ``scorer(poses) -> scores`` overrides rendering-based scoring.
    """
    if not ranges:
        raise UsageError("filter_views: no stored pose ranges")
    if scorer is None:
        def scorer(poses):
            return score_views(model, poses, K, t_near, t_far, cfg, sampling, rng, beta_min, background)
    accepted, candidates = [], []
    for _ in range(cfg.max_resample_rounds):
        drawn = [sample_pose(ranges, rng) for _ in range(cfg.candidate_views_per_round)]
        scores = scorer([p for p, _ in drawn])
        for (p, k), s in zip(drawn, scores):
            candidates.append((p, k, float(s)))
            if s < beta_thr and len(accepted) < cfg.views_per_batch:
                accepted.append((p, k, float(s)))
        if len(accepted) >= cfg.views_per_batch:
            break
    fallback = False
    if not accepted:
        fallback = True
        if cfg.fallback == "lowest-uncertainty":
            accepted = sorted(candidates, key=lambda c: c[2])[:cfg.views_per_batch]
    return FilterResult(accepted, len(candidates), fallback)


def calibrate_threshold(model, ranges, K, t_near, t_far, cfg, sampling, rng, beta_min=0.01, background=None):
    poses = [sample_pose(ranges, rng)[0] for _ in range(cfg.calibration_poses)]
    scores = score_views(model, poses, K, t_near, t_far, cfg, sampling, rng, beta_min, background)
    return float(np.quantile(scores, cfg.calibration_quantile))


# ---------------------------------------------------------------------------
# memory accounting

RANGE_BYTES = 12 * 8


def param_bytes(model):
    return model.params.total_count * 8


def memory_footprint(strategy, state=None, steps=None, steps_done=None):
    """Bytes of auxiliary storage a strategy keeps beyond the live model.

    unikd: teacher parameters + 12 float64 per stored pose range;
    keyframe-replay: stored keyframe images; naive: nothing; batch: every
    training image plus its pose.
    """
    name = strategy.name if isinstance(strategy, StrategyTag) else strategy
    if name == "naive":
        return {"strategy": name, "bytes": 0, "parts": {}}
    if name == "unikd":
        p = param_bytes(state.bundle.teacher) if state.bundle is not None else 0
        r = RANGE_BYTES * len(state.ranges)
        return {"strategy": name, "bytes": p + r, "parts": {"teacher_params": p, "pose_ranges": r}}
    if name == "keyframe-replay":
        b = int(np.sum([img.nbytes for _, _, img, _ in state.replay], dtype=np.int64))
        return {"strategy": name, "bytes": b, "parts": {"keyframes": b}}
    if name == "batch":
        done = steps if steps_done is None else steps[:steps_done]
        views = [v for s in done for v in s.views if v.split == "train"]
        img = int(np.sum([v.image.astype(np.float32).nbytes for v in views], dtype=np.int64))
        pose = 6 * 8 * len(views)
        return {"strategy": name, "bytes": img + pose, "parts": {"images": img, "poses": pose}}
    raise UsageError(f"unknown strategy {name!r}")


def keyframe_indices(n_frames, k):
    """First frame plus evenly spaced frames."""
    if k >= n_frames:
        return list(range(n_frames))
    return sorted({int(round(i * (n_frames - 1) / max(k - 1, 1))) for i in range(k)} if k > 1 else {0})


# ---------------------------------------------------------------------------
# training


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


class ContinualTrainer:
    """Runs one strategy over a sequence of :class:`StepDataset`."""

    def __init__(self, strategy, cfg=RunConfig()):
        self.strategy = strategy if isinstance(strategy, StrategyTag) else StrategyTag(strategy)
        self.cfg = cfg

    # -- helpers -----------------------------------------------------------

    def _adam(self, model):
        return model.new_optimizer(learning_rate=self.cfg.schedule.learning_rate)

    def _sup_step(self, model, pool, rng_batch, rng_render, uncertainty):
        cfg = self.cfg
        rays, gt = pool.draw(cfg.schedule.rays_per_batch, rng_batch)
        model.params.zero_grad()
        coarse, fine = render_rays(model, rays, cfg.sampling, rng_render, cfg.loss.beta_min, self._bg)
        if uncertainty:
            loss = dc.add(supervised_loss(coarse, gt, cfg.loss), supervised_loss(fine, gt, cfg.loss))
        else:
            loss = dc.add(rgb_loss(coarse.color, gt, cfg.loss.reduction), rgb_loss(fine.color, gt, cfg.loss.reduction))
        dc.backward(loss, model.params)
        dc.adam_step(model.params, model.optimizer)
        return float(loss.values), float(np.mean((fine.color.values - gt) ** 2))

    def _dis_step(self, student, bundle, data, beta_thr, rng_filter, rng_render):
        cfg = self.cfg
        f = cfg.filter
        K = data.intrinsics
        gate = bundle.teacher if f.gate == "teacher" else student
        res = filter_views(gate, bundle.pose_ranges, K, data.t_near, data.t_far, f, cfg.sampling,
                           rng_filter, beta_thr, cfg.loss.beta_min, self._bg)
        if not res.accepted:
            return None, res
        per_view = max(1, cfg.schedule.rays_per_batch // f.views_per_batch)
        batches = []
        for pose, _, _ in res.accepted:
            flat = rng_filter.integers(K.width * K.height, size=per_view)
            pix = np.stack([flat // K.width, flat % K.width], axis=1)
            batches.append(rays_for_view(pose, K, pix, data.t_near, data.t_far))
        rays = Rays.cat(batches)
        teacher_rgb, _, _, _ = render_rays_nograd(bundle.teacher, rays, cfg.sampling, rng_render,
                                                  cfg.loss.beta_min, self._bg)
        student.params.zero_grad()
        coarse, fine = render_rays(student, rays, cfg.sampling, rng_render, cfg.loss.beta_min, self._bg)
        loss = dc.add(distill_loss(coarse, teacher_rgb, cfg.loss), distill_loss(fine, teacher_rgb, cfg.loss))
        dc.backward(loss, student.params)
        dc.adam_step(student.params, student.optimizer)
        return float(loss.values), res

    # -- one step ------------------------------------------------------------

    def train_one_step(self, t, data, state):
        """Train step ``t`` on ``data`` and return the updated :class:`StepState`."""
        cfg, name = self.cfg, self.strategy.name
        if name == "batch":
            raise UsageError("the batch strategy trains once on all steps; use train_batch")
        if name == "unikd" and (t == 0) != (state.bundle is None):
            raise UsageError("unikd needs a teacher bundle exactly when t > 0")
        self._bg = data.background if np.any(np.asarray(data.background) != 0) else None
        K = data.intrinsics
        train = data.train_views
        pool_items = [(v.image, v.pose) for v in train]
        if name == "keyframe-replay":
            pool_items += [(img, pose) for _, _, img, pose in state.replay]
        pool = ray_pool(pool_items, K, data.t_near, data.t_far)

        if state.model is None:
            model = FieldModel(cfg.field)
            self._adam(model)
        elif name == "unikd":
            model = init_student_from_teacher(state.bundle.teacher)
            self._adam(model)
        else:
            model = state.model
            self._adam(model)

        rng_batch = _rng(cfg.seed, t, 0)
        rng_render = _rng(cfg.seed, t, 1)
        rng_filter = _rng(cfg.seed, t, 2)
        rng_dis_render = _rng(cfg.seed, t, 3)

        distill = name == "unikd" and state.bundle is not None
        beta_thr = None
        teacher_sum = None
        if distill:
            teacher_sum = state.bundle.teacher.checksum()
            if cfg.filter.beta_thr is not None:
                beta_thr = cfg.filter.beta_thr
            else:
                gate = state.bundle.teacher if cfg.filter.gate == "teacher" else model
                beta_thr = calibrate_threshold(gate, state.bundle.pose_ranges, K, data.t_near, data.t_far,
                                               cfg.filter, cfg.sampling, _rng(cfg.seed, t, 4),
                                               cfg.loss.beta_min, self._bg)

        stats = {"sup_iters": 0, "dis_iters": 0, "skipped_dis": 0, "fallbacks": 0,
                 "accepted_views": 0, "scored_views": 0, "accepted_scores": []}
        sup_losses, dis_losses, mses = [], [], []
        kinds = []
        for i in range(cfg.schedule.iters_per_step):
            kind = cfg.schedule.kind(i) if distill else "S"
            if kind == "D":
                loss, res = self._dis_step(model, state.bundle, data, beta_thr, rng_filter, rng_dis_render)
                stats["scored_views"] += res.scored
                stats["fallbacks"] += int(res.fallback_used)
                if loss is None:
                    stats["skipped_dis"] += 1
                    kinds.append("-")
                    continue
                stats["dis_iters"] += 1
                stats["accepted_views"] += len(res.accepted)
                if not res.fallback_used:
                    stats["accepted_scores"].extend(s for _, _, s in res.accepted)
                dis_losses.append(loss)
            else:
                loss, mse = self._sup_step(model, pool, rng_batch, rng_render, uncertainty=name == "unikd")
                stats["sup_iters"] += 1
                sup_losses.append(loss)
                mses.append(mse)
            kinds.append(kind)
        if teacher_sum is not None and state.bundle.teacher.checksum() != teacher_sum:
            raise AssertionError("teacher parameters changed during a training step")

        model.step_trained_through = t
        ranges = state.ranges + [range_of_poses([v.pose for v in train], t)]
        replay = list(state.replay)
        if name == "keyframe-replay":
            for j in keyframe_indices(len(train), self.strategy.kr_keyframes_per_step):
                replay.append((t, train[j].index, train[j].image.astype(np.float32).copy(), train[j].pose))
        bundle = None
        if name == "unikd":
            bundle = TeacherBundle(snapshot_as_teacher(model), list(ranges))
        tail = max(1, len(mses) // 10)
        entry = {
            "step": t,
            "beta_thr": beta_thr,
            "sup_iters": stats["sup_iters"],
            "dis_iters": stats["dis_iters"],
            "skipped_dis": stats["skipped_dis"],
            "filter_fallbacks": stats["fallbacks"],
            "accepted_views": stats["accepted_views"],
            "scored_views": stats["scored_views"],
            "max_accepted_score": max(stats["accepted_scores"]) if stats["accepted_scores"] else None,
            "final_sup_loss": float(np.mean(sup_losses[-tail:])) if sup_losses else None,
            "final_dis_loss": float(np.mean(dis_losses[-tail:])) if dis_losses else None,
            "final_train_mse": float(np.mean(mses[-tail:])) if mses else None,
            "pattern_head": "".join(kinds[:16]),
        }
        model.optimizer = None
        return StepState(model, bundle, replay, ranges, state.log + [entry])

    def train_batch(self, steps):
        cfg = self.cfg
        first = steps[0]
        self._bg = first.background if np.any(np.asarray(first.background) != 0) else None
        items = [(v.image, v.pose) for s in steps for v in s.train_views]
        pool = ray_pool(items, first.intrinsics, first.t_near, first.t_far)
        model = FieldModel(cfg.field)
        self._adam(model)
        rng_batch = _rng(cfg.seed, 0, 0)
        rng_render = _rng(cfg.seed, 0, 1)
        n = int(round(cfg.schedule.iters_per_step * cfg.schedule.batch_iter_factor * len(steps)))
        mses = []
        for _ in range(n):
            _, mse = self._sup_step(model, pool, rng_batch, rng_render, uncertainty=False)
            mses.append(mse)
        model.step_trained_through = len(steps) - 1
        model.optimizer = None
        tail = max(1, len(mses) // 10)
        ranges = [range_of_poses([v.pose for v in s.train_views], s.step) for s in steps]
        return StepState(model, None, [], ranges, [{"step": len(steps) - 1, "sup_iters": n,
                                                     "final_train_mse": float(np.mean(mses[-tail:]))}])

    def train_distill_only(self, bundle, data, iters, student=None, stream=99, restart_every=250):
        """Train ``student`` (fresh if None) for ``iters`` distillation iterations and nothing else.

        Only ``data``'s intrinsics, interval and background are used; none of
        its views are read. Every ``restart_every`` iterations the optimizer is
        re-created and an automatic threshold recalibrated against the current
        gate, as at the start of each incremental step. A fresh student's first
        iterations see near-zero uncertainty and very large gradients; without
        the restart Adam's second moments keep the step size tiny long after.
        Returns the student and the per-iteration losses.
        """
        cfg = self.cfg
        self._bg = data.background if np.any(np.asarray(data.background) != 0) else None
        if student is None:
            student = FieldModel(cfg.field)
        K = data.intrinsics
        gate = bundle.teacher if cfg.filter.gate == "teacher" else student
        rng_filter, rng_render = _rng(cfg.seed, stream, 2), _rng(cfg.seed, stream, 3)
        rng_calib = _rng(cfg.seed, stream, 4)
        beta_thr = cfg.filter.beta_thr
        losses = []
        for i in range(iters):
            if i == 0 or (restart_every and i % restart_every == 0):
                self._adam(student)
                if cfg.filter.beta_thr is None:
                    beta_thr = calibrate_threshold(gate, bundle.pose_ranges, K, data.t_near, data.t_far, cfg.filter,
                                                   cfg.sampling, rng_calib, cfg.loss.beta_min, self._bg)
            loss, _ = self._dis_step(student, bundle, data, beta_thr, rng_filter, rng_render)
            if loss is not None:
                losses.append(loss)
        student.optimizer = None
        return student, losses


# ---------------------------------------------------------------------------
# evaluation and experiments


def eval_config(sampling):
    return replace(sampling, stratified=False)


def evaluate_views(model, views, K, t_near, t_far, sampling, beta_min=0.01, background=None):
    out = []
    bg = background if background is not None and np.any(np.asarray(background) != 0) else None
    for v in views:
        img, beta, _, _ = render_view(model, v.pose, K, eval_config(sampling), t_near, t_far,
                                      beta_min=beta_min, background=bg)
        gt = v.image.astype(np.float64)
        out.append({"view": v.index, "psnr": psnr(img, gt), "ssim": ssim(img, gt),
                    "mean_beta": float(beta.mean()), "image": img})
    return out


def evaluate_final(model, steps, cfg, include_train=False):
    per_step = []
    previews = []
    for s in steps:
        res = evaluate_views(model, s.test_views, s.intrinsics, s.t_near, s.t_far, cfg.sampling,
                             cfg.loss.beta_min, s.background)
        entry = {"step": s.step,
                 "psnr": float(np.mean([r["psnr"] for r in res])) if res else None,
                 "ssim": float(np.mean([r["ssim"] for r in res])) if res else None,
                 "mean_beta": float(np.mean([r["mean_beta"] for r in res])) if res else None,
                 "views": [{"view": r["view"], "psnr": r["psnr"], "ssim": r["ssim"]} for r in res]}
        if include_train:
            tr = evaluate_views(model, s.train_views, s.intrinsics, s.t_near, s.t_far, cfg.sampling,
                                cfg.loss.beta_min, s.background)
            entry["train_psnr"] = float(np.mean([r["psnr"] for r in tr]))
        per_step.append(entry)
        previews.append(res[0]["image"] if res else None)
    return per_step, previews


def save_state(state, path, strategy):
    path.mkdir(parents=True, exist_ok=True)
    state.model.save(path / "model")
    if state.bundle is not None:
        state.bundle.teacher.save(path / "teacher")
    meta = {"ranges": [r.to_json() for r in state.ranges],
            "replay": [{"step": s, "index": i} for s, i, _, _ in state.replay],
            "log": state.log, "strategy": strategy}
    (path / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_state(path, steps):
    meta = json.loads((path / "state.json").read_text())
    model = FieldModel.load(path / "model")
    ranges = [PoseRange.from_json(r) for r in meta["ranges"]]
    bundle = None
    if (path / "teacher.json").exists():
        bundle = TeacherBundle(FieldModel.load(path / "teacher"), list(ranges))
    by_index = {v.index: v for s in steps for v in s.views}
    replay = [(r["step"], r["index"], by_index[r["index"]].image.astype(np.float32).copy(),
               by_index[r["index"]].pose) for r in meta["replay"]]
    return StepState(model, bundle, replay, ranges, meta["log"])


def run_experiment(steps, strategy, cfg=RunConfig(), out_dir=None, resume=False, stop_after=None,
                   audit=None):
    """Train a strategy over all steps and evaluate the final model on every step's test views.

    With ``out_dir`` a checkpoint is written after each step; ``resume`` picks
    up from the last one. ``stop_after`` ends training after that step index
    (used to simulate interruptions) and returns ``None``.
    """
    trainer = ContinualTrainer(strategy, cfg)
    name = trainer.strategy.name
    out = Path(out_dir) if out_dir is not None else None
    timings = []
    memory = []
    if name == "batch":
        t0 = time.perf_counter()
        state = trainer.train_batch(steps)
        timings.append(time.perf_counter() - t0)
        memory = [memory_footprint("batch", state, steps, k + 1)["bytes"] for k in range(len(steps))]
        if out is not None:
            save_state(state, out / "ckpt" / f"step_{len(steps) - 1:02d}", name)
    else:
        state = StepState()
        start = 0
        if resume and out is not None:
            done = sorted((out / "ckpt").glob("step_*")) if (out / "ckpt").exists() else []
            if done:
                last = done[-1]
                state = load_state(last, steps)
                start = int(last.name.split("_")[1]) + 1
                memory = [e.get("memory_bytes") for e in state.log]
        for t in range(start, len(steps)):
            if audit is not None:
                audit.active_step = t
            t0 = time.perf_counter()
            state = trainer.train_one_step(t, steps[t], state)
            timings.append(time.perf_counter() - t0)
            mem = memory_footprint(name, state)["bytes"]
            state.log[-1]["memory_bytes"] = mem
            memory.append(mem)
            if out is not None:
                save_state(state, out / "ckpt" / f"step_{t:02d}", name)
            if stop_after is not None and t >= stop_after:
                return None
        if audit is not None:
            audit.active_step = None

    per_step, previews = evaluate_final(state.model, steps, cfg, cfg.eval_train_views)
    psnrs = [e["psnr"] for e in per_step if e["psnr"] is not None]
    ssims = [e["ssim"] for e in per_step if e["ssim"] is not None]
    record = {
        "format": "unikd-record",
        "strategy": name,
        "kr_keyframes_per_step": trainer.strategy.kr_keyframes_per_step,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "n_steps": len(steps),
        "dataset_fingerprint": dataset_fingerprint(steps),
        "per_step": per_step,
        "avg_psnr": float(np.mean(psnrs)) if psnrs else None,
        "avg_ssim": float(np.mean(ssims)) if ssims else None,
        "memory_bytes": memory,
        "train_log": state.log,
        "model_checksum": state.model.checksum(),
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_seconds_per_step": timings}) + "\n")
        pdir = out / "previews"
        pdir.mkdir(exist_ok=True)
        for s, img in zip(steps, previews):
            if img is not None:
                (pdir / f"step_{s.step:02d}.f32rgb").write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
    record["_state"] = state
    record["_timings"] = timings
    record["_previews"] = previews
    return record


def public_record(record):
    return {k: v for k, v in record.items() if not k.startswith("_")}


def dataset_fingerprint(steps):
    h = hashlib.sha256()
    for s in steps:
        for v in s.views:
            h.update(str((s.step, v.index, v.split, v.pose.as_tuple())).encode())
            h.update(np.ascontiguousarray(v.image, dtype="<f4").tobytes())
    return h.hexdigest()[:16]
