"""Experiment configuration: JSON in, validated and fully resolved dict out.

Every key has a default listed in :func:`default_config`. A user file may
override any subset; unknown keys and wrongly typed values are rejected with
the dotted key path, and the resolved result (defaults filled in) is what
gets written next to every output.
"""
import copy
import json
from dataclasses import asdict
from pathlib import Path

from .continual import STRATEGIES, FilterConfig, RunConfig, StrategyTag, TrainSchedule
from .errors import ConfigError, UnikdError
from .field import FieldConfig
from .geometry import Intrinsics
from .objectives import LossConfig
from .renderer import SamplingConfig
from .sceneworld import SceneSpec, TrajectorySpec, default_scene

# keys whose default is None and the types they accept otherwise
_NULLABLE = {
    "dataset.path": (str,),
    "dataset.scene": (dict,),
    "field.skip_layer": (int,),
    "field.seed": (int,),
    "filter.beta_thr": (int, float),
}


def default_config():
    field_cfg = asdict(FieldConfig())
    field_cfg["seed"] = None
    return {
        "seed": 0,
        "out": "runs/default",
        "dataset": {
            "path": None,
            "scene": None,
            "trajectory": TrajectorySpec().to_dict(),
            "camera": {"width": 64, "height": 64, "fov_degrees": 45.0},
            "t_near": 0.4,
            "t_far": 2.6,
            "test_fraction": 0.125,
        },
        "strategies": ["naive", "unikd", "batch"],
        "kr_keyframes_per_step": 1,
        "field": field_cfg,
        "sampling": asdict(SamplingConfig()),
        "loss": asdict(LossConfig()),
        "schedule": asdict(TrainSchedule()),
        "filter": asdict(FilterConfig()),
        "eval_train_views": False,
    }


def _type_ok(value, default, path):
    if path in _NULLABLE:
        return value is None or (isinstance(value, _NULLABLE[path]) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, (list, tuple)):
        return isinstance(value, list)
    return True


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(path or "<root>", "expected an object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        kp = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(kp, "unknown key")
        d = defaults[key]
        if isinstance(d, dict):
            out[key] = _merge(d, value, kp)
            continue
        if not _type_ok(value, d, kp):
            raise ConfigError(kp, f"expected {type(d).__name__}, got {type(value).__name__}")
        if isinstance(d, float) and isinstance(value, int):
            value = float(value)
        if isinstance(d, list) and d and not isinstance(d[0], str) and len(value) != len(d):
            raise ConfigError(kp, f"expected {len(d)} values")
        out[key] = value
    return out


def resolve(user=None, seed=None, out=None, strategies=None):
    """Merge ``user`` over the defaults, apply CLI overrides and validate."""
    cfg = _merge(default_config(), user or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    if strategies:
        cfg["strategies"] = list(strategies)
    if cfg["field"]["seed"] is None:
        cfg["field"]["seed"] = cfg["seed"]
    validate(cfg)
    return cfg


def _build(key, factory):
    try:
        return factory()
    except ConfigError as exc:
        if exc.key == key or exc.key.startswith(key + "."):
            raise
        raise ConfigError(f"{key}.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    except (UnikdError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(key, str(exc)) from None


def validate(cfg):
    """Raise :class:`ConfigError` naming the first invalid key."""
    ds = cfg["dataset"]
    if not 0 <= ds["test_fraction"] < 1:
        raise ConfigError("dataset.test_fraction", "must lie in [0, 1)")
    if not 0 < ds["t_near"] < ds["t_far"]:
        raise ConfigError("dataset.t_near", "need 0 < t_near < t_far")
    cam = ds["camera"]
    for key in ("width", "height"):
        if cam[key] < 1:
            raise ConfigError(f"dataset.camera.{key}", "must be >= 1")
    if not 0 < cam["fov_degrees"] < 180:
        raise ConfigError("dataset.camera.fov_degrees", "must lie in (0, 180)")
    _build("dataset.trajectory", lambda: trajectory_of(cfg))
    if ds["scene"] is not None:
        _build("dataset.scene", lambda: SceneSpec.from_dict(ds["scene"]))
    if not cfg["strategies"]:
        raise ConfigError("strategies", "need at least one strategy")
    for i, name in enumerate(cfg["strategies"]):
        if name not in STRATEGIES:
            raise ConfigError(f"strategies[{i}]", f"unknown strategy {name!r} (choose from {', '.join(STRATEGIES)})")
    if len(set(cfg["strategies"])) != len(cfg["strategies"]):
        raise ConfigError("strategies", "duplicate strategy")
    _build("kr_keyframes_per_step", lambda: StrategyTag("keyframe-replay", cfg["kr_keyframes_per_step"]))
    run_config(cfg)
    return cfg


def trajectory_of(cfg):
    t = dict(cfg["dataset"]["trajectory"])
    for key in ("jitter", "sweep_start", "sweep_end", "look_offset"):
        t[key] = tuple(t[key])
    return TrajectorySpec(**t)


def scene_of(cfg):
    s = cfg["dataset"]["scene"]
    return default_scene() if s is None else SceneSpec.from_dict(s)


def intrinsics_of(cfg):
    cam = cfg["dataset"]["camera"]
    return Intrinsics.from_fov(cam["width"], cam["height"], cam["fov_degrees"])


def run_config(cfg):
    return RunConfig(
        field=_build("field", lambda: FieldConfig(**cfg["field"])),
        sampling=_build("sampling", lambda: SamplingConfig(**cfg["sampling"])),
        loss=_build("loss", lambda: LossConfig(**cfg["loss"])),
        schedule=_build("schedule", lambda: TrainSchedule(**cfg["schedule"])),
        filter=_build("filter", lambda: FilterConfig(**cfg["filter"])),
        seed=cfg["seed"],
        eval_train_views=cfg["eval_train_views"],
    )


def load(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON ({exc})") from None


def dumps(cfg):
    return json.dumps(cfg, indent=1, sort_keys=True) + "\n"
