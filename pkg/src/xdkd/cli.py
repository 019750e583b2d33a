"""Command-line driver binding the modules into a reproducible pipeline.

Commands: gen-data, train-teacher, train-student, distill, eval,
dump-saliency, gradcheck, ablate. Exit codes: 0 success, 1 configuration
error, 2 I/O error, 3 numerical failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .gradcheck import run_gradcheck
from .harness import (
    DEFAULT_CAPS,
    DistillConfig,
    NumericalError,
    TrainingDiverged,
    ablate_fusion,
    evaluate,
    train,
)
from .io_formats import (
    FormatError,
    load_checkpoint,
    load_scene,
    load_scene_dir,
    save_checkpoint,
    save_scene_dir,
    write_pgm,
    write_xtd,
)
from .model import DepthNet
from .saliency import render_saliency_maps
from .scenes import dataset
from .tensor import Tensor, new_tape, reduce_mean

EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg.apply_overrides(args.set)
    for flag, key in (("bins", "count"), ("tau", "tau"), ("dmin", "dmin"), ("dmax", "dmax")):
        v = getattr(args, flag.replace("-", "_"), None)
        if v is not None:
            cfg._set("bins", key, str(v))
    return cfg


def _load_splits(data_dir: str) -> tuple[list, list]:
    root = Path(data_dir)
    train_dir, eval_dir = root / "train", root / "eval"
    if not train_dir.exists() or not eval_dir.exists():
        raise FormatError(f"{data_dir}: expected train/ and eval/ scene directories")
    return load_scene_dir(train_dir), load_scene_dir(eval_dir)


def _load_model(ckpt_dir: str) -> tuple[DepthNet, RunConfig]:
    params, cfg_text = load_checkpoint(ckpt_dir)
    if cfg_text is None:
        raise FormatError(f"{ckpt_dir}: checkpoint has no config echo")
    tmp = Path(ckpt_dir) / "config.ini"
    cfg = RunConfig.load(tmp)
    model = DepthNet(cfg.model_spec(), seed=cfg.values["train"]["seed"])
    model.load_state(params)
    return model, cfg


def _write_outputs(out_dir: str, cfg: RunConfig, model: DepthNet, report) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model.state_dict(), config_text=cfg.render())
    (out / "report.txt").write_text(report.summary_text())
    (out / "losses.csv").write_text(report.loss_csv())
    (out / "fingerprint.txt").write_text(report.fingerprint() + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    scenes = list(dataset(args.seed, args.count, args.height, args.width))
    save_scene_dir(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _run_training(args, teacher=None) -> int:
    cfg = _load_config(args)
    train_scenes, eval_scenes = _load_splits(args.data)
    dc = cfg.distill_config()
    model = DepthNet(cfg.model_spec(), seed=dc.seed)
    report = train(model, train_scenes, dc, teacher=teacher, eval_data=eval_scenes)
    _write_outputs(args.out, cfg, model, report)
    for cap in sorted(report.metrics):
        print(f"cap {cap:g} m: mae {report.metrics[cap].mae:.4f} "
              f"rmse {report.metrics[cap].rmse:.4f}")
    print(f"done in {report.wall_time:.1f}s, params {report.param_count}, out {args.out}")
    return 0


def cmd_train_teacher(args) -> int:
    return _run_training(args)


def cmd_train_student(args) -> int:
    return _run_training(args)


def cmd_distill(args) -> int:
    teacher, _ = _load_model(args.teacher)
    return _run_training(args, teacher=teacher)


def cmd_eval(args) -> int:
    model, _ = _load_model(args.model)
    root = Path(args.data)
    scenes = load_scene_dir(root if (root / "manifest.txt").exists() else root / "eval")
    caps = [float(c) for c in args.caps.split(",")]
    reports = evaluate(model, scenes, caps)
    for cap in caps:
        print(f"--- cap {cap:g} m ---")
        for line in reports[cap].as_lines():
            print(line)
        print("kv: " + " ".join(line.replace(" ", "=") for line in reports[cap].as_lines()))
    return 0


def cmd_dump_saliency(args) -> int:
    student, scfg = _load_model(args.model)
    teacher, _ = _load_model(args.teacher)
    scene = load_scene(args.scene)
    layers = tuple(scfg.values["distill"]["layers"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, net in (("student", student), ("teacher", teacher)):
        new_tape()
        pred, feats = net.forward(scene.image, scene.radar_depth)
        maps = render_saliency_maps(reduce_mean(pred), feats, layers, source=name)
        for layer, smap in maps.items():
            write_pgm(out / f"{name}_{layer}.pgm", smap.values)
            write_xtd(out / f"{name}_{layer}.xtd", smap.values)
            print(f"{name} {layer}: shape {smap.values.shape}, "
                  f"max {smap.values.max():.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(module=args.module)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:24s} [{r.module:9s}] max_err {r.max_err:.3e}  {status}")
        failed |= not r.passed
    print(f"gradcheck: {len(results)} checks in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_VERIFY
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    train_scenes, eval_scenes = _load_splits(args.data)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    rows = ablate_fusion(kinds, train_scenes, eval_scenes, cfg.distill_config(),
                         base=cfg.model_spec())
    print(f"{'fusion':16s} {'params':>10s} {'mae@80':>10s} {'rmse@80':>10s}")
    for row in rows:
        m = row.metrics[80.0] if 80.0 in row.metrics else row.metrics[max(row.metrics)]
        print(f"{row.kind:16s} {row.param_count:10d} {m.mae:10.4f} {m.rmse:10.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_bins_flags(p):
    p.add_argument("--bins", type=int, help="number of depth bins")
    p.add_argument("--tau", type=float, help="distillation temperature")
    p.add_argument("--dmin", type=float, help="minimum depth (m)")
    p.add_argument("--dmax", type=float, help="maximum depth (m)")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                   help="override a config entry")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xdkd",
                                 description="radar-camera depth distillation workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes as XTD bundles")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    for name, fn in (("train-teacher", cmd_train_teacher),
                     ("train-student", cmd_train_student)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} without distillation")
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        _add_bins_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_bins_flags(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--caps", default="50,70,80")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-saliency", help="export saliency maps as PGM + XTD")
    p.add_argument("--model", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_saliency)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--module", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train one student per fusion kind")
    p.add_argument("--kinds", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    _add_bins_flags(p)
    p.set_defaults(fn=cmd_ablate)

    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
