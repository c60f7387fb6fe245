"""Pinhole cameras, 6-DoF poses, per-step pose ranges and the random inquirer.

Conventions: camera-to-world rotation ``Rz(gamma) @ Ry(beta) @ Rx(alpha)``;
the camera looks down its local -z axis with +x right and +y up. Pixel
``(row, col)`` has its center at continuous image coordinates
``(col + 0.5, row + 0.5)``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

TWO_PI = 2.0 * np.pi
AXES = ("x", "y", "z", "alpha", "beta", "gamma")


def wrap_angle(a):
    """Map angles into (-pi, pi]; values already inside are returned untouched."""
    a = np.asarray(a, dtype=float)
    out = np.where(a > np.pi, a - TWO_PI, a)
    out = np.where(a <= -np.pi, a + TWO_PI, out)
    far = (out > np.pi) | (out <= -np.pi)
    if np.any(far):
        out = np.where(far, np.pi - np.mod(np.pi - a, TWO_PI), out)
    return out


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise UsageError("Intrinsics: width and height must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise UsageError("Intrinsics: focal lengths must be positive")

    @classmethod
    def from_fov(cls, width, height, fov_deg):
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
        return cls(width, height, f, f, width / 2.0, height / 2.0)

    def to_dict(self):
        return {"width": self.width, "height": self.height, "fx": self.fx,
                "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class Pose6DoF:
    x: float
    y: float
    z: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(wrap_angle(getattr(self, name))))
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_array(self):
        return np.array([self.x, self.y, self.z, self.alpha, self.beta, self.gamma])

    @classmethod
    def from_array(cls, v):
        return cls(*[float(a) for a in v])

    def as_tuple(self):
        return tuple(float(a) for a in self.as_array())


def rotation_matrix(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose_to_matrix(p):
    """4x4 camera-to-world matrix of a pose."""
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(p.alpha, p.beta, p.gamma)
    m[:3, 3] = (p.x, p.y, p.z)
    return m


def matrix_to_pose(m):
    """Inverse of :func:`pose_to_matrix` away from gimbal lock (|beta| = pi/2)."""
    r = m[:3, :3]
    beta = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    alpha = np.arctan2(r[2, 1], r[2, 2])
    gamma = np.arctan2(r[1, 0], r[0, 0])
    return Pose6DoF(m[0, 3], m[1, 3], m[2, 3], alpha, beta, gamma)


def look_at_pose(eye, target=(0.0, 0.0, 0.0)):
    """Pose at ``eye`` looking at ``target`` with world +z as up (beta = 0)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    # forward = Rz(g) Rx(a) (0,0,-1) = (-sin g sin a, cos g sin a, -cos a)
    alpha = np.arccos(np.clip(-fwd[2], -1.0, 1.0))
    gamma = np.arctan2(-fwd[0], fwd[1])
    return Pose6DoF(eye[0], eye[1], eye[2], alpha, 0.0, gamma)


@dataclass
class Rays:
    """A batch of rays ``r(t) = o + t d`` with a shared sampling interval."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: float
    t_far: float
    pixels: np.ndarray = None

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise UsageError(f"ray interval must satisfy t_near < t_far, got [{self.t_near}, {self.t_far}]")

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return Rays(self.origins[idx], self.directions[idx], self.t_near, self.t_far,
                    None if self.pixels is None else self.pixels[idx])

    @staticmethod
    def cat(batches):
        first = batches[0]
        pix = None if first.pixels is None else np.concatenate([b.pixels for b in batches])
        return Rays(np.concatenate([b.origins for b in batches]),
                    np.concatenate([b.directions for b in batches]),
                    first.t_near, first.t_far, pix)


def all_pixels(K):
    rows, cols = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def rays_for_view(p, K, pixels=None, t_near=0.0, t_far=1.0):
    """Cast one ray through the center of each ``(row, col)`` pixel."""
    if pixels is None:
        pixels = all_pixels(K)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= K.height) or np.any(pixels[:, 1] >= K.width):
        raise UsageError("rays_for_view: pixel outside image bounds")
    u = pixels[:, 1] + 0.5
    v = pixels[:, 0] + 0.5
    cam = np.stack([(u - K.cx) / K.fx, -(v - K.cy) / K.fy, -np.ones(len(pixels))], axis=1)
    cam /= np.linalg.norm(cam, axis=1, keepdims=True)
    m = pose_to_matrix(p)
    dirs = cam @ m[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(m[:3, 3], dirs.shape).copy()
    return Rays(origins, dirs, float(t_near), float(t_far), pixels)


# ---------------------------------------------------------------------------
# pose ranges


@dataclass(frozen=True)
class PoseRange:
    """Per-axis bounds of one step's camera poses.

    Angular axes are stored as an arc ``[lo, hi]`` with ``lo`` in (-pi, pi]
    and ``hi - lo`` in [0, 2 pi); ``hi`` may exceed pi when the arc crosses the
    +-pi seam. Such an arc is treated as two sub-ranges on the sphere of
    angles, so folding never inflates it across the seam.
    """

    lo: tuple
    hi: tuple
    step_index: int = 0

    def __post_init__(self):
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise UsageError("PoseRange: min must not exceed max")

    @classmethod
    def from_pose(cls, p, step_index=0):
        v = tuple(p.as_tuple())
        return cls(v, v, step_index)

    def bounds(self, axis):
        i = AXES.index(axis) if isinstance(axis, str) else axis
        return self.lo[i], self.hi[i]

    def as_list(self):
        """Twelve floats interleaved ``(x_min, x_max, ..., gamma_min, gamma_max)``."""
        out = []
        for l, h in zip(self.lo, self.hi):
            out += [float(l), float(h)]
        return out

    @classmethod
    def from_list(cls, vals, step_index=0):
        vals = [float(v) for v in vals]
        if len(vals) != 12:
            raise UsageError("PoseRange needs 12 values")
        return cls(tuple(vals[0::2]), tuple(vals[1::2]), int(step_index))

    def to_json(self):
        return {"step": self.step_index, "range": self.as_list()}

    @classmethod
    def from_json(cls, d):
        return cls.from_list(d["range"], d["step"])

    def contains(self, p, tol=0.0):
        v = p.as_array()
        for i in range(3):
            if not self.lo[i] - tol <= v[i] <= self.hi[i] + tol:
                return False
        for i in range(3, 6):
            if not _arc_contains(self.lo[i], self.hi[i], v[i], tol):
                return False
        return True

    def subranges(self, i):
        """Angular axis ``i`` as one or two intervals inside (-pi, pi]."""
        lo, hi = self.lo[i], self.hi[i]
        if hi <= np.pi:
            return [(lo, hi)]
        return [(lo, np.pi), (-np.pi, hi - TWO_PI)]


def update_range(r, p):
    """Fold pose ``p`` into range ``r`` (componentwise min/max, arcs for angles).

    For angles that fit inside a half turn the result does not depend on the
    order in which poses are folded.
    """
    v = p.as_array()
    lo, hi = list(r.lo), list(r.hi)
    for i in range(3):
        lo[i] = min(lo[i], v[i])
        hi[i] = max(hi[i], v[i])
    for i in range(3, 6):
        a = v[i]
        if _arc_contains(lo[i], hi[i], a):
            continue
        up = a if a >= lo[i] else a + TWO_PI
        down = a if a <= hi[i] else a - TWO_PI
        if up - hi[i] <= lo[i] - down:
            hi[i] = up
        else:
            lo[i] = down
            if lo[i] <= -np.pi:
                lo[i] += TWO_PI
                hi[i] += TWO_PI
    return PoseRange(tuple(lo), tuple(hi), r.step_index)


def _arc_contains(lo, hi, a, tol=0.0):
    return lo - tol <= a <= hi + tol or lo - tol <= a + TWO_PI <= hi + tol


def range_of_poses(poses, step_index=0):
    poses = list(poses)
    if not poses:
        raise UsageError("range_of_poses: no poses")
    r = PoseRange.from_pose(poses[0], step_index)
    for p in poses[1:]:
        r = update_range(r, p)
    return r


def sample_in_range(r, rng):
    v = [min(rng.uniform(l, h), h) if h > l else l for l, h in zip(r.lo, r.hi)]
    return Pose6DoF(*v)


def sample_pose(ranges, rng):
    """Random inquirer: pick a past step uniformly, then a pose inside its range."""
    if not ranges:
        raise UsageError("sample_pose: no stored pose ranges (nothing to distill at t = 0)")
    k = int(rng.integers(len(ranges)))
    return sample_in_range(ranges[k], rng), k
