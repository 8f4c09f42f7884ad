"""Command-line entry point.

Exit codes: 0 ok, 2 config or parse error, 3 I/O error, 4 training
diverged, 5 trajectory length/timestamp mismatch.  The default output root
comes from ``$FLOWVO_OUTPUT_ROOT`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, formats
from .errors import Diverged, FlowVOError, FormatError
from .evaluation import DESK_SEGMENTS, Alignment, evaluate_trajectory
from .losses import Variant
from .model import load_checkpoint, save_checkpoint
from .synthgen import MotionPattern, SceneConfig
from .trainer import (
    EXPERIMENTS,
    EXPERIMENT_DEFAULTS,
    TrainConfig,
    build_dataset,
    make_optimizer,
    new_net,
    run_experiment,
    train,
)

log = logging.getLogger("flowvo")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "FLOWVO_OUTPUT_ROOT"


class Mismatch(FlowVOError):
    pass


# keys accepted in config files, by command
SCENE_KEYS = {"point_count": int, "depth_range": tuple, "translation_range": tuple,
              "rotation_range": tuple, "seed": int}
GENERATE_KEYS = dict(SCENE_KEYS, count=int, pattern=str, environments=tuple)
TRAIN_KEYS = {f.name: {int: int, float: float, str: str, bool: bool}.get(type(f.default), tuple)
              for f in fields(TrainConfig)}
TRAIN_FILE_KEYS = dict(TRAIN_KEYS, dataset=str, test_dataset=str)
EXPERIMENT_KEYS = dict(TRAIN_KEYS, **{f"scene_{k}": v for k, v in SCENE_KEYS.items()},
                       sizes=tuple, test_count=int, train_count=int, pattern=str)


def version_string():
    try:
        root = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command, config, seed, started, outputs):
    """Append one JSON line describing this run to ``out_dir/manifest.jsonl``."""
    record = {"command": command, "config": config, "seed": seed,
              "start_time": started, "end_time": time.time(),
              "version": version_string(),
              "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs)}
    with open(Path(out_dir) / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: getattr(o, "value", str(o))))


def _out_dir(arg):
    path = Path(arg) if arg else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_config(values, args, base=None):
    cfg = replace(base or TrainConfig(), **{k: v for k, v in values.items() if k in TRAIN_KEYS})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
    return cfg


def write_curve(path, curve):
    """Tab-separated step, train terms, then the total of every test split."""
    splits = sorted(curve.tests)
    lines = ["\t".join(["step", "train", "train_translation", "train_rotation"]
                       + [f"test_{s}" for s in splits]
                       + [f"test_{s}_translation" for s in splits]
                       + [f"test_{s}_rotation" for s in splits])]
    for i, step in enumerate(curve.steps):
        tr = curve.train[i]
        row = [str(step), repr(tr.total), repr(tr.translation_term), repr(tr.rotation_term)]
        row += [repr(curve.tests[s][i].total) for s in splits]
        row += [repr(curve.tests[s][i].translation_term) for s in splits]
        row += [repr(curve.tests[s][i].rotation_term) for s in splits]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_table(path, header, rows):
    out = ["\t".join(header)]
    for row in rows:
        out.append("\t".join(v if isinstance(v, str) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    started = time.time()
    values = formats.read_config(args.config, GENERATE_KEYS)
    count = values.pop("count", 1000)
    pattern = MotionPattern(values.pop("pattern", "full_6dof"))
    envs = values.pop("environments", (0, 16))
    if len(envs) != 2 or envs[1] < 1:
        raise FormatError(f"{args.config}: environments must be 'first count'")
    if args.seed is not None:
        values["seed"] = args.seed
    scene = SceneConfig(**values)
    out = _out_dir(args.out)
    env_ids = range(int(envs[0]), int(envs[0]) + int(envs[1]))
    ds = build_dataset(scene, env_ids, count, pattern)
    meta = dict(asdict(scene), pattern=pattern.value, environments=(int(envs[0]), int(envs[1])))
    meta.pop("environment_id")
    files = formats.write_dataset(out, ds, meta)
    write_manifest(out, "generate", _jsonable(meta | {"count": count}), scene.seed, started, files)
    print(f"wrote {count} samples to {out}")
    return EXIT_OK


def _checkpointer(path, cfg):
    def save(step, net, optimizer):
        save_checkpoint(path, net, {"step": step, "optimizer_t": optimizer.t,
                                    "train_config": _jsonable(asdict(cfg))},
                        optimizer.state_arrays())
    return save


def cmd_train(args):
    started = time.time()
    values = formats.read_config(args.config, TRAIN_FILE_KEYS)
    if "dataset" not in values:
        raise FormatError(f"{args.config}: 'dataset' is required")
    cfg = _train_config(values, args)
    base = Path(args.config).parent
    train_set, _ = formats.read_dataset(base / values["dataset"])
    tests = {}
    if "test_dataset" in values:
        tests["test"], _ = formats.read_dataset(base / values["test_dataset"])
    out = _out_dir(args.out)
    ckpt = out / "checkpoint.bin"
    net, optimizer, start = new_net(cfg, train_set.intrinsics), None, 0
    if args.resume:
        net, extra, state = load_checkpoint(ckpt)
        if extra.get("train_config") != _jsonable(asdict(cfg)):
            raise FormatError(f"{ckpt}: checkpoint was written with a different config")
        optimizer = make_optimizer(cfg, net)
        optimizer.load_state(state, extra["optimizer_t"])
        start = extra["step"]
    _, curve = train(net, train_set, tests, cfg, start_step=start, optimizer=optimizer,
                     checkpoint=_checkpointer(ckpt, cfg))
    name = "curve.tsv" if start == 0 else f"curve_from_{start}.tsv"
    write_curve(out / name, curve)
    write_manifest(out, "train", _jsonable(asdict(cfg) | values), cfg.seed, started,
                   [out / name, ckpt])
    if len(curve):
        print(f"final train loss {curve.train[-1].total:.6g}")
    return EXIT_OK


def cmd_experiment(args):
    if args.name not in EXPERIMENTS:
        raise FormatError(f"unknown experiment {args.name!r}; expected one of "
                          f"{', '.join(EXPERIMENTS)}")
    started = time.time()
    values = formats.read_config(args.config, EXPERIMENT_KEYS) if args.config else {}
    # config values override the per-experiment defaults
    defaults = dict(EXPERIMENT_DEFAULTS[args.name])
    base = defaults.pop("cfg")
    cfg = _train_config(values, args, base)
    scene = {**defaults.pop("scene", {}),
             **{k[len("scene_"):]: v for k, v in values.items() if k.startswith("scene_")}}
    extra = {**defaults, **{k: values[k] for k in ("sizes", "test_count", "train_count", "pattern")
                            if k in values}}
    if "sizes" in extra:
        extra["sizes"] = tuple(int(s) for s in extra["sizes"])
    out = _out_dir(args.out)
    report = run_experiment(args.name, cfg, scene=scene, **extra)
    files = []
    (out / "curves").mkdir(exist_ok=True)
    for name, res in report.results.items():
        f = out / "curves" / f"{name}.tsv"
        write_curve(f, res.curve)
        ck = out / "curves" / f"{name}.ckpt"
        save_checkpoint(ck, res.net, {"train_config": _jsonable(asdict(res.config))})
        files += [f, ck]
    table = out / "table.tsv"
    write_table(table, report.header, report.rows)
    files.append(table)
    print(table.read_text(), end="")
    write_manifest(out, f"experiment {args.name}", _jsonable(report.config), cfg.seed,
                   started, files)
    return EXIT_OK


def cmd_eval(args):
    est, est_fmt = formats.read_trajectory(args.estimate)
    gt, gt_fmt = formats.read_trajectory(args.ground_truth)
    # KITTI files carry no timestamps, so only two TUM files are matched by time
    matched = formats.match_trajectories(est, gt, by_time=est_fmt == gt_fmt == formats.TUM)
    if matched is None:
        raise Mismatch(f"{len(est)} estimated poses cannot be matched to {len(gt)} "
                       "ground-truth poses by order or timestamp")
    est, gt = matched
    lengths = tuple(args.segments) if args.segments else DESK_SEGMENTS
    report = evaluate_trajectory(est, gt, args.align, lengths)
    text = report.to_text()
    print(f"# estimate {est_fmt}, ground truth {gt_fmt}, {len(est)} poses")
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return EXIT_OK


def cmd_plotdata(args):
    run = Path(args.run_dir)
    curves = sorted((run / "curves").glob("*.tsv")) if (run / "curves").is_dir() else []
    curves += sorted(run.glob("curve*.tsv"))
    if not curves:
        raise FileNotFoundError(f"no loss curves under {run}")
    out = run / "plot"
    out.mkdir(exist_ok=True)
    for path in curves:
        lines = path.read_text().splitlines()
        header = lines[0].split("\t")
        rows = [line.split("\t") for line in lines[1:]]
        splits = [h for h in header if h.startswith("test_")
                  and not h.endswith(("_translation", "_rotation"))]
        for split in splits or [None]:
            cols = ["step", "train"] + ([split] if split else [])
            idx = [header.index(c) for c in cols]
            suffix = f"_{split[5:]}" if split and len(splits) > 1 else ""
            body = ["\t".join(["step", "train_loss", "test_loss"][:len(cols)])]
            body += ["\t".join(r[i] for i in idx) for r in rows]
            (out / f"{path.stem}{suffix}.tsv").write_text("\n".join(body) + "\n")
    print(f"wrote plot data to {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="flowvo", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("--variant", choices=[v.value for v in Variant], help="motion loss variant")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic flow dataset")
    g.add_argument("config")
    g.add_argument("out", nargs="?")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a pose network on a dataset directory")
    t.add_argument("config")
    t.add_argument("out", nargs="?")
    t.add_argument("--resume", action="store_true", help="continue from out/checkpoint.bin")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="run one of the generalisation experiments")
    e.add_argument("name")
    e.add_argument("config", nargs="?")
    e.add_argument("--out")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("eval", help="ATE and segment drift of a trajectory")
    v.add_argument("estimate")
    v.add_argument("ground_truth")
    v.add_argument("--align", choices=[a.value for a in Alignment], default="similarity")
    v.add_argument("--segments", type=float, nargs="+", help="segment lengths in scene units")
    v.add_argument("--output", help="also write the report here")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("plotdata", help="export curves as per-panel delimited files")
    d.add_argument("run_dir")
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except Diverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Mismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, FlowVOError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
