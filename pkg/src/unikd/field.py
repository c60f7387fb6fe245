"""MLP radiance field with density, color and uncertainty heads."""
import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class FieldConfig:
    trunk_depth: int = 4
    trunk_width: int = 64
    head_width: int = 32
    pos_levels: int = 6
    dir_levels: int = 2
    skip_layer: int = None
    uncertainty_head: bool = True
    density_bias_init: float = 0.1
    beta_bias_init: float = 0.0
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for key in ("trunk_depth", "trunk_width", "head_width"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("pos_levels", "dir_levels"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.trunk_depth:
            raise ConfigError("skip_layer", "must index an inner trunk layer")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", "must be float64 or float32")

    @property
    def pos_features(self):
        return 3 + 6 * self.pos_levels

    @property
    def dir_features(self):
        return 3 + 6 * self.dir_levels


def encode_position(x, levels):
    """Frequency encoding ``[x, sin(2^k pi x), cos(2^k pi x)]_k`` per axis.

    Accepts a single 3-vector or an ``(n, 3)`` array; the layout is
    ``x (3) | sin k=0 (3) | cos k=0 (3) | sin k=1 (3) | ...``.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    enc = np.empty((len(x), 3 + 6 * levels), dtype=x.dtype)
    enc[:, :3] = x
    if levels:
        s = np.sin(np.pi * x)
        c = np.cos(np.pi * x)
        for k in range(levels):
            if k:
                # double-angle recurrence instead of fresh sin/cos calls
                s, c = 2.0 * s * c, (c - s) * (c + s)
            enc[:, 3 + 6 * k:6 + 6 * k] = s
            enc[:, 6 + 6 * k:9 + 6 * k] = c
    return enc[0] if single else enc


@dataclass
class FieldSample:
    color: dc.Tensor        # (n, 3) in [0, 1]
    density: dc.Tensor      # (n,) >= 0
    raw_beta: dc.Tensor     # (n,) unbounded


def _layer_shapes(cfg):
    shapes = []
    fin = cfg.pos_features
    for i in range(cfg.trunk_depth):
        if cfg.skip_layer is not None and i == cfg.skip_layer:
            fin += cfg.pos_features
        shapes.append((f"trunk{i}", fin, cfg.trunk_width))
        fin = cfg.trunk_width
    shapes.append(("density", cfg.trunk_width, 1))
    head_in = cfg.trunk_width + cfg.dir_features
    shapes.append(("color0", head_in, cfg.head_width))
    shapes.append(("color1", cfg.head_width, 3))
    if cfg.uncertainty_head:
        shapes.append(("beta0", head_in, cfg.head_width))
        shapes.append(("beta1", cfg.head_width, 1))
    return shapes


def init_params(cfg):
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    params = dc.ParameterSet()
    for name, fin, fout in _layer_shapes(cfg):
        bound = np.sqrt(6.0 / fin)
        if name in ("density", "color1", "beta1"):
            bound = np.sqrt(1.0 / fin)
        params.add(f"{name}.W", rng.uniform(-bound, bound, size=(fin, fout)).astype(dtype))
        bias = np.zeros(fout, dtype=dtype)
        if name == "density":
            bias += cfg.density_bias_init
        elif name == "beta1":
            bias += cfg.beta_bias_init
        params.add(f"{name}.b", bias)
    return params


class FieldModel:
    """The field ``(c, sigma, beta) = F(x, d)``, usable as student or frozen teacher."""

    def __init__(self, config=None, params=None, role="student", step_trained_through=-1):
        self.config = config or FieldConfig()
        self.params = params if params is not None else init_params(self.config)
        self.role = role
        self.step_trained_through = step_trained_through
        self.optimizer = None
        if role == "teacher":
            self._freeze()

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def is_teacher(self):
        return self.role == "teacher"

    def _freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.values.flags.writeable = False

    def new_optimizer(self, **hyper):
        if self.is_teacher:
            raise UsageError("a teacher model cannot own an optimizer")
        self.optimizer = dc.AdamState.for_params(self.params, **hyper)
        return self.optimizer

    def checksum(self):
        return self.params.checksum()

    def query(self, x, d):
        """Evaluate the field at points ``x`` (n, 3) seen along unit directions ``d`` (n, 3)."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        d = np.asarray(d, dtype=self.dtype).reshape(-1, 3)
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise UsageError("query: view directions must be unit vectors")
        cfg, p = self.config, self.params
        ex = dc.constant(encode_position(x, cfg.pos_levels))
        ed = dc.constant(encode_position(d, cfg.dir_levels))

        h = ex
        for i in range(cfg.trunk_depth):
            if cfg.skip_layer is not None and i == cfg.skip_layer:
                h = dc.concat([h, ex], axis=1)
            h = dc.relu(dc.affine(h, p[f"trunk{i}.W"], p[f"trunk{i}.b"]))
        sigma = dc.relu(dc.reshape(dc.affine(h, p["density.W"], p["density.b"]), (-1,)))

        hd = dc.concat([h, ed], axis=1)
        hc = dc.relu(dc.affine(hd, p["color0.W"], p["color0.b"]))
        color = dc.sigmoid(dc.affine(hc, p["color1.W"], p["color1.b"]))
        if cfg.uncertainty_head:
            hb = dc.relu(dc.affine(hd, p["beta0.W"], p["beta0.b"]))
            beta = dc.reshape(dc.affine(hb, p["beta1.W"], p["beta1.b"]), (-1,))
        else:
            beta = dc.constant(np.zeros(len(x), dtype=self.dtype))
        return FieldSample(color, sigma, beta)

    def clone(self, role=None):
        other = FieldModel(self.config, self.params.copy(), role or "student", self.step_trained_through)
        return other

    def save(self, path):
        """Write ``<path>.unkd`` parameters and a ``<path>.json`` sidecar."""
        path = Path(path)
        self.params.save(path.with_suffix(".unkd"))
        meta = {"config": asdict(self.config), "role": self.role,
                "step_trained_through": self.step_trained_through}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = FieldConfig(**meta["config"])
        params = dc.ParameterSet.load(path.with_suffix(".unkd"), dtype=np.dtype(cfg.dtype))
        return cls(cfg, params, meta["role"], meta["step_trained_through"])


def snapshot_as_teacher(student):
    """Frozen deep copy of a student, tagged as teacher."""
    if student.is_teacher:
        raise UsageError("snapshot_as_teacher expects a student model")
    return FieldModel(student.config, student.params.copy(), "teacher", student.step_trained_through)


def init_student_from_teacher(teacher):
    """Trainable copy of a teacher with a fresh optimizer."""
    if not teacher.is_teacher:
        raise UsageError("init_student_from_teacher expects a teacher model")
    student = FieldModel(copy.deepcopy(teacher.config), teacher.params.copy(), "student",
                         teacher.step_trained_through)
    student.new_optimizer()
    return student
