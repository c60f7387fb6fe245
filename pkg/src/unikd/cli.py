"""Command line entry point: ``unikd {gen,train,eval,report,selftest}``.

Output layout under ``--out``::

    config.resolved.json
    data/                      manifest.json + view_XXXX.f32rgb (unless dataset.path is set)
    runs/<strategy>/           record.json, timing.json, ckpt/step_XX/, previews/
    eval/<strategy>.json       re-evaluation of the final checkpoint
    report/                    metrics.csv, summary.json, *.svg, previews.ppm

Errors end the process with one ``unikd: error=<kind> ...`` line on stderr and
exit code 2 (config), 3 (data), 4 (non-finite values) or 5 (selftest failure).
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diffcore as dc
from .continual import (STRATEGIES, StrategyTag, load_state, evaluate_views, public_record,
                        run_experiment)
from .errors import ConfigError, DataError, NonFiniteError, UnikdError
from .evalkit import build_report, format_summary
from .sceneworld import generate_incremental_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFTEST = 0, 2, 3, 4, 5


class SelftestFailure(UnikdError):
    pass


def _diagnostic(kind, exc):
    fields = [f"error={kind}"]
    key = getattr(exc, "key", None) or getattr(exc, "key_path", None)
    if key:
        fields.append(f"key={key}")
    if getattr(exc, "op", None):
        fields.append(f"op={exc.op}")
    msg = " ".join(str(exc).split())
    fields.append(f"message={json.dumps(msg)}")
    return "unikd: " + " ".join(fields)


def _resolved(args):
    user = cfgmod.load(args.config) if args.config else {}
    return cfgmod.resolve(user, seed=args.seed, out=args.out, strategies=args.strategy)


def _dataset_dir(cfg):
    path = cfg["dataset"]["path"]
    return Path(path) if path else Path(cfg["out"]) / "data"


def _generator_section(cfg):
    return {"seed": cfg["seed"], "dataset": {k: v for k, v in cfg["dataset"].items() if k != "path"}}


def _write_config(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfgmod.dumps(cfg))


def _load_steps(cfg, check=True):
    root = _dataset_dir(cfg)
    if not (root / "manifest.json").exists():
        raise DataError(f"no dataset at {root} (run 'unikd gen' first)")
    steps = read_dataset(root)
    if check and cfg["dataset"]["path"] is None:
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("generator") != _generator_section(cfg):
            raise ConfigError("dataset", f"config does not match the dataset generated at {root}")
    return steps


def cmd_gen(cfg, args):
    ds = cfg["dataset"]
    steps = generate_incremental_dataset(cfgmod.scene_of(cfg), cfgmod.trajectory_of(cfg), cfgmod.intrinsics_of(cfg),
                                         ds["t_near"], ds["t_far"], ds["test_fraction"], seed=cfg["seed"])
    root = _dataset_dir(cfg)
    manifest = write_dataset(root, steps, extra=_generator_section(cfg))
    n_train = sum(len(s.train_views) for s in steps)
    n_test = sum(len(s.test_views) for s in steps)
    print(f"wrote {manifest} ({len(steps)} steps, {n_train} train / {n_test} test views)")
    return EXIT_OK


def _strategy(cfg, name):
    return StrategyTag(name, cfg["kr_keyframes_per_step"])


def cmd_train(cfg, args):
    steps = _load_steps(cfg)
    run_cfg = cfgmod.run_config(cfg)
    for name in cfg["strategies"]:
        out = Path(cfg["out"]) / "runs" / name
        rec = run_experiment(steps, _strategy(cfg, name), run_cfg, out_dir=out, resume=args.resume,
                             stop_after=args.stop_after)
        if rec is None:
            print(f"{name}: stopped after step {args.stop_after}; checkpoints in {out / 'ckpt'}")
            continue
        psnrs = " ".join("-" if e["psnr"] is None else f"{e['psnr']:.2f}" for e in rec["per_step"])
        print(f"{name}: avg PSNR {rec['avg_psnr']:.2f} dB  per step [{psnrs}]  -> {out / 'record.json'}")
    return EXIT_OK


def _records(cfg):
    recs = []
    for name in cfg["strategies"]:
        path = Path(cfg["out"]) / "runs" / name / "record.json"
        if not path.exists():
            raise DataError(f"missing record for strategy {name!r}: {path}")
        recs.append(json.loads(path.read_text()))
    return recs


def _final_ckpt(cfg, name):
    root = Path(cfg["out"]) / "runs" / name / "ckpt"
    done = sorted(root.glob("step_*")) if root.exists() else []
    if not done:
        raise DataError(f"no checkpoints for strategy {name!r} under {root}")
    return done[-1]


def cmd_eval(cfg, args):
    """Re-evaluate each final checkpoint on test (and, with --train-views, train) views."""
    steps = _load_steps(cfg)
    run_cfg = cfgmod.run_config(cfg)
    out = Path(cfg["out"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    for name in cfg["strategies"]:
        state = load_state(_final_ckpt(cfg, name), steps)
        result = {"strategy": name, "config": cfg, "per_step": []}
        for s in steps:
            entry = {"step": s.step}
            splits = [("test", s.test_views)] + ([("train", s.train_views)] if args.train_views else [])
            for split, views in splits:
                res = evaluate_views(state.model, views, s.intrinsics, s.t_near, s.t_far, run_cfg.sampling,
                                     run_cfg.loss.beta_min, s.background)
                entry[f"{split}_psnr"] = float(np.mean([r["psnr"] for r in res])) if res else None
                entry[f"{split}_ssim"] = float(np.mean([r["ssim"] for r in res])) if res else None
            result["per_step"].append(entry)
        for split in ("test", "train"):
            vals = [e[f"{split}_psnr"] for e in result["per_step"] if e.get(f"{split}_psnr") is not None]
            if vals:
                result[f"avg_{split}_psnr"] = float(np.mean(vals))
        (out / f"{name}.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        line = f"{name}: test PSNR {result.get('avg_test_psnr', float('nan')):.2f} dB"
        if "avg_train_psnr" in result:
            line += f"  train PSNR {result['avg_train_psnr']:.2f} dB"
        print(line)
    return EXIT_OK


def _previews(cfg):
    out = {}
    for name in cfg["strategies"]:
        pdir = Path(cfg["out"]) / "runs" / name / "previews"
        if not pdir.exists():
            continue
        imgs = []
        for p in sorted(pdir.glob("step_*.f32rgb")):
            h, w = cfg["dataset"]["camera"]["height"], cfg["dataset"]["camera"]["width"]
            imgs.append(np.frombuffer(p.read_bytes(), dtype="<f4").reshape(h, w, 3))
        out[name] = imgs
    return out


def cmd_report(cfg, args):
    records = _records(cfg)
    steps = _load_steps(cfg, check=False)
    gt = [s.test_views[0].image if s.test_views else None for s in steps]
    summary = build_report(records, Path(cfg["out"]) / "report", _previews(cfg), gt)
    print(format_summary(summary))
    return EXIT_OK


def cmd_selftest(cfg, args):
    from .selftest import run_all
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise SelftestFailure(f"{sum(not ok for _, ok, _ in results)} self-test check(s) failed")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--strategy", action="append", choices=STRATEGIES, metavar="NAME",
                        help=f"strategy to run (repeatable; one of {', '.join(STRATEGIES)})")
    common.add_argument("--print-config", action="store_true", help="echo the resolved config to stdout")

    p = argparse.ArgumentParser(prog="unikd", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="render the incremental dataset")
    t = sub.add_parser("train", parents=[common], help="train each strategy and write records")
    t.add_argument("--resume", action="store_true", help="continue from the last step checkpoint")
    t.add_argument("--stop-after", type=int, metavar="STEP", help=argparse.SUPPRESS)
    e = sub.add_parser("eval", parents=[common], help="re-evaluate final checkpoints")
    e.add_argument("--train-views", action="store_true", help="also evaluate on training views")
    sub.add_parser("report", parents=[common], help="write metrics.csv, summary.json, charts, previews")
    sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None):
    args = build_parser().parse_args(argv)
    dc.tune_allocator()
    try:
        cfg = _resolved(args)
        if args.print_config:
            sys.stdout.write(cfgmod.dumps(cfg))
        if args.command != "selftest":
            _write_config(cfg)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(_diagnostic("config", exc), file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(_diagnostic("data", exc), file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(_diagnostic("numeric", exc), file=sys.stderr)
        return EXIT_NUMERIC
    except SelftestFailure as exc:
        print(_diagnostic("selftest", exc), file=sys.stderr)
        return EXIT_SELFTEST
    except UnikdError as exc:
        print(_diagnostic("usage", exc), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
