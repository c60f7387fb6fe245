"""Fast invariant checks run by ``unikd selftest``.

Each check returns ``(name, ok, detail)``. They cover the renderer's
compositing identity, a closed-form homogeneous medium, end-to-end
gradients of both uncertainty-weighted losses, and the memory accounting.
"""
import numpy as np

from . import diffcore as dc
from .continual import RANGE_BYTES, StepState, TeacherBundle, memory_footprint
from .field import FieldConfig, FieldModel, FieldSample, snapshot_as_teacher
from .geometry import PoseRange, Pose6DoF, Rays, rays_for_view, Intrinsics
from .objectives import LossConfig, distill_loss, supervised_loss
from .renderer import SamplingConfig, composite, compositing_weights, render_rays


class ConstantField:
    """A medium of constant density and color; ignores position and direction."""

    def __init__(self, density, color):
        self.density = float(density)
        self.color = np.asarray(color, dtype=float)

    def query(self, x, d):
        n = len(np.asarray(x).reshape(-1, 3))
        return FieldSample(dc.constant(np.tile(self.color, (n, 1))), dc.constant(np.full(n, self.density)),
                           dc.constant(np.zeros(n)))


def check_compositing(n_rays=10_000, n_samples=64, seed=0):
    rng = np.random.default_rng(seed)
    t_near, t_far = 1.0, 5.0
    t = np.sort(rng.uniform(t_near, t_far, size=(n_rays, n_samples)), axis=1)
    t = np.maximum.accumulate(t + np.arange(n_samples) * 1e-9, axis=1)
    t = np.minimum(t, t_far)
    density = rng.exponential(2.0, size=(n_rays, n_samples)) * (rng.random((n_rays, n_samples)) < 0.7)
    with dc.no_grad():
        w, trans, t_end = compositing_weights(density, t, t_far)
    err = float(np.max(np.abs(w.values.sum(axis=1) + t_end.values - 1.0)))
    monotone = bool(np.all(np.diff(trans.values, axis=1) <= 1e-15))
    ok = err <= 1e-6 and monotone
    return "compositing identity", ok, f"max |sum w + T_end - 1| = {err:.2e}, transmittance non-increasing: {monotone}"


def homogeneous_error(density, color, length, n_samples=256, t_near=1.0):
    """Largest channel error of a constant-medium render against ``c (1 - exp(-sigma L))``."""
    t_far = t_near + length
    t = t_near + length * np.arange(n_samples)[None, :] / n_samples
    rays = Rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), t_near, t_far)
    with dc.no_grad():
        res, _ = render_rays(ConstantField(density, color), rays, SamplingConfig(n_samples, 0, False),
                             t_values=t)
    expect = np.asarray(color) * (1.0 - np.exp(-density * length))
    return float(np.max(np.abs(res.color.values[0] - expect)))


def check_homogeneous_medium(n_cases=10, seed=0):
    rng = np.random.default_rng(seed)
    errs = [homogeneous_error(rng.uniform(0.0, 5.0), rng.uniform(0.0, 1.0, 3), rng.uniform(0.2, 3.0))
            for _ in range(n_cases)]
    worst = max(errs)
    return "homogeneous medium", worst <= 1e-3, f"max error {worst:.2e} over {n_cases} media"


def probe_rays(n=4, seed=0):
    K = Intrinsics.from_fov(16, 16, 45)
    pose = Pose6DoF(np.pi / 2 - 0.25, 0.0, np.pi / 2, 0.0, -3.0, 0.8)
    rng = np.random.default_rng(seed)
    pix = np.stack([rng.integers(4, 12, n), rng.integers(4, 12, n)], axis=1)
    return rays_for_view(pose, K, pix, 1.5, 4.5)


def gradient_errors(n_rays=4, max_entries=12, h=1e-5, seed=0):
    """Per-block relative errors of both uncertainty-weighted losses versus central differences."""
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(dtype="float64", seed=seed, density_bias_init=0.5)
    model = FieldModel(cfg)
    teacher = snapshot_as_teacher(FieldModel(FieldConfig(dtype="float64", seed=seed + 1)))
    rays = probe_rays(n_rays, seed)
    t = np.linspace(rays.t_near, rays.t_far, 24, endpoint=False)[None, :].repeat(n_rays, axis=0)
    t = t + rng.uniform(0, 0.1, size=t.shape)
    gt = rng.uniform(0, 1, size=(n_rays, 3))
    with dc.no_grad():
        teacher_rgb = render_rays(teacher, rays, SamplingConfig(24, 0, False), t_values=t)[0].color.values
    loss_cfg = LossConfig()

    def sup():
        res = render_rays(model, rays, SamplingConfig(24, 0, False), t_values=t)[0]
        return supervised_loss(res, gt, loss_cfg)

    def dis():
        res = render_rays(model, rays, SamplingConfig(24, 0, False), t_values=t)[0]
        return distill_loss(res, teacher_rgb, loss_cfg)

    out = {}
    for name, f in (("supervised", sup), ("distillation", dis)):
        rep = dc.finite_diff_check(f, model.params, h=h, tol=1e-4, max_entries=max_entries,
                                   rng=np.random.default_rng(seed))
        out[name] = rep
    return out


def check_gradients():
    reps = gradient_errors()
    worst = max(r.max_error for r in reps.values())
    detail = ", ".join(f"{k} max rel err {r.max_error:.2e}" for k, r in reps.items())
    return "loss gradients", worst <= 1e-4, detail


def check_memory(steps=(2, 5, 10)):
    model = FieldModel(FieldConfig())
    teacher = snapshot_as_teacher(model)
    image_bytes = 64 * 64 * 3 * 4
    ok = True
    for T in steps:
        ranges = [PoseRange(np.zeros(6), np.zeros(6), k) for k in range(T)]
        uk = memory_footprint("unikd", StepState(bundle=TeacherBundle(teacher, ranges), ranges=ranges))["bytes"]
        replay = [(k, k, np.zeros((64, 64, 3), np.float32), None) for k in range(T)]
        kr = memory_footprint("keyframe-replay", StepState(replay=replay))["bytes"]
        ok &= uk == model.params.total_count * 8 + RANGE_BYTES * T
        ok &= kr == T * image_bytes
    return "memory accounting", bool(ok), f"checked T in {list(steps)}"


def run_all():
    return [check_compositing(), check_homogeneous_medium(), check_gradients(), check_memory()]
