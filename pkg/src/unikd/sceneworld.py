"""Analytic emission-absorption scenes and incremental dataset generation.

The ground truth is integrated exactly: each primitive is a region of
constant density and albedo, so along a ray the medium is piecewise constant
and transmittance has a closed form on every segment.
"""
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ChecksumError, ManifestError, TruncatedFileError, UsageError
from .field import FieldSample
from .geometry import Intrinsics, Pose6DoF, look_at_pose, rays_for_view

DATASET_FORMAT = "unikd-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    density: float
    albedo: tuple

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        return -b - root, -b + root, hit

    def inside(self, x):
        return np.sum((x - np.asarray(self.center)) ** 2, axis=-1) < self.radius ** 2


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extent: tuple
    density: float
    albedo: tuple

    def intersect(self, o, d):
        lo = np.asarray(self.center) - np.asarray(self.half_extent)
        hi = np.asarray(self.center) + np.asarray(self.half_extent)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        # a zero direction component never leaves or enters the slab
        parallel = d == 0
        inside_slab = (o >= lo) & (o <= hi)
        tmin_ax = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        tmax_ax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t0 = tmin_ax.max(axis=1)
        t1 = tmax_ax.min(axis=1)
        return t0, t1, t1 > t0

    def inside(self, x):
        lo = np.asarray(self.center) - np.asarray(self.half_extent)
        hi = np.asarray(self.center) + np.asarray(self.half_extent)
        return np.all((x > lo) & (x < hi), axis=-1)


@dataclass
class SceneSpec:
    primitives: list
    background: tuple = (0.0, 0.0, 0.0)
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        for p in self.primitives:
            if p.density < 0:
                raise UsageError("primitive density must be >= 0")
            if np.any(np.asarray(p.albedo) < 0) or np.any(np.asarray(p.albedo) > 1):
                raise UsageError("albedo must lie in [0, 1]")
            ext = p.radius if isinstance(p, Sphere) else np.asarray(p.half_extent)
            c = np.asarray(p.center)
            if np.any(c - ext < lo - 1e-12) or np.any(c + ext > hi + 1e-12):
                raise UsageError("primitive exceeds scene bounds")

    def to_dict(self):
        prims = []
        for p in self.primitives:
            d = {"kind": "sphere" if isinstance(p, Sphere) else "box", "center": list(p.center),
                 "density": p.density, "albedo": list(p.albedo)}
            if isinstance(p, Sphere):
                d["radius"] = p.radius
            else:
                d["half_extent"] = list(p.half_extent)
            prims.append(d)
        return {"primitives": prims, "background": list(self.background),
                "bounds": [list(self.bounds[0]), list(self.bounds[1])]}

    @classmethod
    def from_dict(cls, d):
        prims = []
        for p in d["primitives"]:
            if p["kind"] == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"], p["density"], tuple(p["albedo"])))
            else:
                prims.append(Box(tuple(p["center"]), tuple(p["half_extent"]), p["density"], tuple(p["albedo"])))
        return cls(prims, tuple(d["background"]), (tuple(d["bounds"][0]), tuple(d["bounds"][1])))


def default_scene():
    """Five spheres and two boxes of distinct albedos on a ring around the room's center.

    Seen from a camera that orbits the center looking outward, each stretch
    of the orbit faces different objects.
    """
    def at(deg, r, z):
        a = np.deg2rad(deg)
        return (round(r * np.cos(a), 6), round(r * np.sin(a), 6), z)

    return SceneSpec([
        Sphere(at(15, 1.45, 0.05), 0.42, 12.0, (0.9, 0.2, 0.15)),
        Box(at(60, 1.5, -0.1), (0.3, 0.3, 0.35), 10.0, (0.2, 0.85, 0.85)),
        Sphere(at(105, 1.35, 0.1), 0.38, 15.0, (0.15, 0.8, 0.25)),
        Sphere(at(150, 1.5, -0.05), 0.45, 10.0, (0.2, 0.3, 0.95)),
        Box(at(195, 1.4, 0.05), (0.32, 0.28, 0.3), 11.0, (0.95, 0.6, 0.3)),
        Sphere(at(240, 1.45, 0.0), 0.4, 14.0, (0.95, 0.85, 0.2)),
        Sphere(at(285, 1.4, -0.1), 0.4, 18.0, (0.85, 0.3, 0.85)),
    ], bounds=((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0)))


def trace_rays_gt(scene, rays):
    """Exact color of each ray through the piecewise-constant medium."""
    o, d = rays.origins, rays.directions
    n = len(o)
    tn, tf = rays.t_near, rays.t_far
    intervals = []
    for p in scene.primitives:
        t0, t1, hit = p.intersect(o, d)
        t0 = np.clip(np.where(hit, t0, tf), tn, tf)
        t1 = np.clip(np.where(hit, t1, tf), tn, tf)
        intervals.append((t0, t1))
    bg = np.asarray(scene.background, dtype=float)
    if not intervals:
        return np.broadcast_to(bg, (n, 3)).copy()
    bounds = np.sort(np.concatenate([np.full((n, 1), tn), np.full((n, 1), tf)]
                                    + [np.stack(iv, axis=1) for iv in intervals], axis=1), axis=1)
    trans = np.ones(n)
    color = np.zeros((n, 3))
    for j in range(bounds.shape[1] - 1):
        a, b = bounds[:, j], bounds[:, j + 1]
        length = b - a
        mid = 0.5 * (a + b)
        sig = np.zeros(n)
        emit = np.zeros((n, 3))
        for p, (t0, t1) in zip(scene.primitives, intervals):
            active = (t0 <= mid) & (mid <= t1) & (t1 > t0)
            sig += np.where(active, p.density, 0.0)
            emit += np.where(active, p.density, 0.0)[:, None] * np.asarray(p.albedo)
        # overlapping primitives emit the density-weighted mix of their albedos
        c = np.where(sig[:, None] > 0, emit / np.where(sig > 0, sig, 1.0)[:, None], 0.0)
        absorbed = -np.expm1(-sig * length)
        color += (trans * absorbed)[:, None] * c
        trans = trans * np.exp(-sig * length)
    return color + trans[:, None] * bg


def trace_ray_gt(scene, ray):
    return trace_rays_gt(scene, ray)[0]


def render_gt_image(scene, pose, K, t_near, t_far):
    rays = rays_for_view(pose, K, None, t_near, t_far)
    return trace_rays_gt(scene, rays).reshape(K.height, K.width, 3)


class SceneField:
    """The scene's own density and albedo exposed through the field interface."""

    def __init__(self, scene, dtype=np.float64):
        self.scene = scene
        self.dtype = dtype

    def query(self, x, d):
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        sig = np.zeros(len(x))
        emit = np.zeros((len(x), 3))
        for p in self.scene.primitives:
            m = p.inside(x)
            sig += np.where(m, p.density, 0.0)
            emit += np.where(m, p.density, 0.0)[:, None] * np.asarray(p.albedo)
        col = np.where(sig[:, None] > 0, emit / np.where(sig > 0, sig, 1.0)[:, None], 0.0)
        return FieldSample(dc.constant(col), dc.constant(sig), dc.constant(np.zeros(len(x))))


# ---------------------------------------------------------------------------
# trajectories and datasets


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    n_views: int = 100
    steps: int = 10
    jitter: tuple = (0.02, 0.02, 0.02, 0.02, 0.02, 0.02)
    radius: float = 0.2
    height: float = 0.0
    arc_degrees: float = 300.0
    start_degrees: float = 0.0
    facing: str = "outward"
    sweep_start: tuple = (-1.5, -3.0, 0.5)
    sweep_end: tuple = (1.5, -3.0, 0.5)
    look_offset: tuple = (0.0, 3.0, -0.5)

    def __post_init__(self):
        if self.kind not in ("orbit", "sweep"):
            raise UsageError("trajectory kind must be 'orbit' or 'sweep'")
        if self.facing not in ("outward", "inward"):
            raise UsageError("trajectory facing must be 'outward' or 'inward'")
        if self.steps < 1 or self.n_views % self.steps:
            raise UsageError("n_views must be a positive multiple of steps")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def trajectory_poses(traj, rng):
    poses = []
    for i in range(traj.n_views):
        if traj.kind == "orbit":
            span = np.deg2rad(traj.arc_degrees)
            denom = traj.n_views if traj.arc_degrees >= 360.0 else max(traj.n_views - 1, 1)
            phi = np.deg2rad(traj.start_degrees) + span * i / denom
            eye = np.array([traj.radius * np.cos(phi), traj.radius * np.sin(phi), traj.height])
            if traj.facing == "inward":
                base = look_at_pose(eye)
            else:
                base = look_at_pose(eye, eye + np.array([np.cos(phi), np.sin(phi), 0.0]))
        else:
            s = i / max(traj.n_views - 1, 1)
            eye = (1 - s) * np.asarray(traj.sweep_start) + s * np.asarray(traj.sweep_end)
            base = look_at_pose(eye, eye + np.asarray(traj.look_offset))
        jit = rng.uniform(-1.0, 1.0, size=6) * np.asarray(traj.jitter)
        poses.append(Pose6DoF.from_array(base.as_array() + jit))
    return poses


def split_counts(n_views, steps, test_fraction):
    """Per-step test counts from cumulative round-half-up of ``fraction * views``."""
    per = n_views // steps
    cum = [int(np.floor(test_fraction * per * (t + 1) + 0.5)) for t in range(steps)]
    counts = [cum[0]] + [cum[t] - cum[t - 1] for t in range(1, steps)]
    return [min(max(c, 0), per - 1) if per > 1 else 0 for c in counts]


class AccessAudit:
    """Record which step's views are read while each training step runs."""

    def __init__(self):
        self.active_step = None
        self.reads = []

    def note(self, step, split):
        self.reads.append((self.active_step, step, split))

    def violations(self):
        """Reads of an earlier step's views made while a later step was training."""
        return [r for r in self.reads if r[0] is not None and r[1] < r[0]]


@dataclass
class View:
    index: int
    pose: Pose6DoF
    image: np.ndarray
    split: str

    @property
    def filename(self):
        return f"view_{self.index:04d}.f32rgb"


@dataclass
class StepDataset:
    step: int
    intrinsics: Intrinsics
    t_near: float
    t_far: float
    background: tuple
    views: list = field(default_factory=list)
    audit: AccessAudit = field(default=None, repr=False, compare=False)

    def _read(self, split):
        if self.audit is not None:
            self.audit.note(self.step, split)
        return [v for v in self.views if v.split == split]

    @property
    def train_views(self):
        return self._read("train")

    @property
    def test_views(self):
        return self._read("test")

    @property
    def image_bytes(self):
        return self.intrinsics.width * self.intrinsics.height * 3 * 4

    def __eq__(self, other):
        if not isinstance(other, StepDataset):
            return NotImplemented
        if (self.step, self.intrinsics, self.t_near, self.t_far, tuple(self.background)) != (
                other.step, other.intrinsics, other.t_near, other.t_far, tuple(other.background)):
            return False
        if len(self.views) != len(other.views):
            return False
        return all(a.index == b.index and a.pose == b.pose and a.split == b.split
                   and a.image.dtype == b.image.dtype and np.array_equal(a.image, b.image)
                   for a, b in zip(self.views, other.views))


def attach_audit(steps, audit):
    for s in steps:
        s.audit = audit
    return steps


def generate_incremental_dataset(scene, traj, K, t_near, t_far, test_fraction=0.125, seed=0):
    """Render a trajectory and split it into ``traj.steps`` consecutive steps."""
    if not 0 <= test_fraction < 1:
        raise UsageError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    poses = trajectory_poses(traj, rng)
    per = traj.n_views // traj.steps
    counts = split_counts(traj.n_views, traj.steps, test_fraction)
    steps = []
    for t in range(traj.steps):
        chosen = set(rng.choice(per, size=counts[t], replace=False).tolist()) if counts[t] else set()
        sd = StepDataset(t, K, float(t_near), float(t_far), tuple(float(c) for c in scene.background))
        for j in range(per):
            i = t * per + j
            img = render_gt_image(scene, poses[i], K, t_near, t_far).astype(np.float32)
            sd.views.append(View(i, poses[i], img, "test" if j in chosen else "train"))
        steps.append(sd)
    return steps


def write_dataset(root, steps, extra=None):
    """Write images and ``manifest.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = steps[0]
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "intrinsics": first.intrinsics.to_dict(),
        "t_near": first.t_near,
        "t_far": first.t_far,
        "background": list(first.background),
        "steps": [],
    }
    if extra:
        manifest["generator"] = extra
    for s in steps:
        entries = []
        for v in s.views:
            raw = np.ascontiguousarray(v.image, dtype="<f4").tobytes()
            (root / v.filename).write_bytes(raw)
            entries.append({"index": v.index, "file": v.filename, "pose": list(v.pose.as_tuple()),
                            "split": v.split, "crc32": zlib.crc32(raw)})
        manifest["steps"].append({"step": s.step, "views": entries})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root / "manifest.json"


def _need(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise ManifestError(f"{path}.{key}" if path else key, "missing key")
    return d[key]


def read_dataset(root):
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ManifestError("manifest.json", "file not found")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError("manifest.json", f"invalid JSON ({exc})") from None
    if _need(m, "format", "") != DATASET_FORMAT:
        raise ManifestError("format", f"expected {DATASET_FORMAT!r}")
    kd = _need(m, "intrinsics", "")
    K = Intrinsics(*[_need(kd, k, "intrinsics") for k in ("width", "height", "fx", "fy", "cx", "cy")])
    t_near = float(_need(m, "t_near", ""))
    t_far = float(_need(m, "t_far", ""))
    bg = tuple(float(c) for c in _need(m, "background", ""))
    nbytes = K.width * K.height * 3 * 4
    steps = []
    for si, sd in enumerate(_need(m, "steps", "")):
        spath = f"steps[{si}]"
        s = StepDataset(int(_need(sd, "step", spath)), K, t_near, t_far, bg)
        for vi, vd in enumerate(_need(sd, "views", spath)):
            vpath = f"{spath}.views[{vi}]"
            fname = _need(vd, "file", vpath)
            pose = _need(vd, "pose", vpath)
            if len(pose) != 6:
                raise ManifestError(f"{vpath}.pose", "expected six values")
            split = _need(vd, "split", vpath)
            if split not in ("train", "test"):
                raise ManifestError(f"{vpath}.split", f"unknown split {split!r}")
            crc = int(_need(vd, "crc32", vpath))
            index = int(_need(vd, "index", vpath))
            fpath = root / fname
            if not fpath.exists():
                raise TruncatedFileError(fname, nbytes, 0)
            raw = fpath.read_bytes()
            if len(raw) != nbytes:
                raise TruncatedFileError(fname, nbytes, len(raw))
            actual = zlib.crc32(raw)
            if actual != crc:
                raise ChecksumError(fname, crc, actual)
            img = np.frombuffer(raw, dtype="<f4").reshape(K.height, K.width, 3).astype(np.float32)
            s.views.append(View(index, Pose6DoF(*pose), img, split))
        steps.append(s)
    return steps
