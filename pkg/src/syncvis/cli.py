"""Command line: gen-data, train, eval, ablate, visualize.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import load_config
from .data import DatasetError, generate_video, iter_scenarios, load_dataset, write_dataset

log = logging.getLogger("syncvis")

DEFAULT_SIZE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("SYNCVIS_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty (use --force)")
    partial = path.with_name(path.name + ".partial")
    if partial.exists():
        shutil.rmtree(partial)
    return partial


def _publish(partial: Path, path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    partial.rename(path)


def cmd_gen_data(args) -> None:
    if args.videos < 0:
        raise UsageError("--videos must be non-negative")
    if args.frames < 1:
        raise UsageError("--frames must be positive")
    if not 1 <= args.max_instances <= 8:
        raise UsageError("--max-instances must lie in [1, 8]")
    if not 0.0 <= args.occlusion_rate <= 1.0:
        raise UsageError("--occlusion-rate must lie in [0, 1]")
    out = Path(args.out)
    partial = _fresh_dir(out, args.force)
    specs = iter_scenarios(args.seed, args.videos, T=args.frames, H=DEFAULT_SIZE, W=DEFAULT_SIZE,
                           max_instances=args.max_instances, occlusion_rate=args.occlusion_rate)
    samples = [generate_video(spec, f"video_{i:05d}") for i, spec in enumerate(specs)]
    manifest = write_dataset(samples, partial)
    manifest["generation"] = {
        "videos": args.videos, "frames": args.frames, "max_instances": args.max_instances,
        "seed": args.seed, "occlusion_rate": args.occlusion_rate,
        "height": DEFAULT_SIZE, "width": DEFAULT_SIZE,
    }
    (partial / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _publish(partial, out)
    print(f"wrote {len(samples)} videos ({sum(len(s.tracks) for s in samples)} tracks) to {out}")


def cmd_train(args) -> None:
    from .trainer import train_from_dir

    tcfg = load_config(args.config)
    res = train_from_dir(tcfg, args.data, args.out)
    print(f"trained {tcfg.iterations} iterations in {res.seconds:.0f}s; checkpoint {res.checkpoint}")
    if res.eval is not None:
        print(f"held-out AP {res.eval.AP:.2f}  AP50 {res.eval.AP50:.2f}  mean IoU {res.quality.mean_iou:.3f}")


def cmd_eval(args) -> None:
    from .evaluator import (compute_ap, infer, predictions_from_json, predictions_to_json,
                            track_quality, write_json)
    from .trainer import load_checkpoint

    samples = load_dataset(args.data)
    ckpt = Path(args.ckpt)
    if ckpt.suffix == ".json":
        preds = predictions_from_json(json.loads(ckpt.read_text()), samples)
    else:
        model = load_checkpoint(ckpt)
        preds = [p for s in samples for p in infer(model, s)]
    result = compute_ap(preds, samples)
    quality = track_quality(preds, samples)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_json(report, {**result.to_dict(), "mean_iou": quality.mean_iou,
                        "category_rate": quality.category_rate})
    if ckpt.suffix != ".json":
        write_json(report.with_name(report.stem + ".predictions.json"), predictions_to_json(preds))
    print(f"AP {result.AP:.2f}  AP50 {result.AP50:.2f}  AP75 {result.AP75:.2f}  "
          f"AR1 {result.AR1:.2f}  AR10 {result.AR10:.2f}")


def _ablate_one(payload):
    from .trainer import train

    cfg, train_set, held_out, out_dir = payload
    res = train(cfg, train_set, out_dir, held_out)
    return res.eval, res.quality


def cmd_ablate(args) -> None:
    from .trainer import ABLATION_PARAMS, ablate, split_dataset, with_param, write_ablation_csv

    if args.param not in ABLATION_PARAMS:
        raise UsageError(f"unknown ablation parameter {args.param!r}; expected one of {ABLATION_PARAMS}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    tcfg = load_config(args.config)
    try:
        configs = [with_param(tcfg, args.param, v) for v in values]
    except ValueError as err:
        raise UsageError(str(err)) from None
    train_set, held_out = split_dataset(load_dataset(args.data), tcfg.holdout_videos)
    if not held_out:
        raise UsageError("config must set holdout_videos > 0 for ablations")
    out = Path(args.out)
    if args.parallel:
        payloads = [(c, train_set, held_out, out / f"{args.param}={v}") for v, c in zip(values, configs)]
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_ablate_one, payloads))
        rows = [{"value": v, **{k: getattr(e, k) for k in ("AP", "AP50", "AP75", "AR1", "AR10")},
                 "mean_iou": q.mean_iou, "category_rate": q.category_rate}
                for v, (e, q) in zip(values, results)]
        write_ablation_csv(rows, out / f"ablation_{args.param}.csv")
    else:
        rows = ablate(args.param, values, tcfg, train_set, held_out, out)
    for row in rows:
        print(f"{args.param}={row['value']}: AP {row['AP']:.2f}")


def cmd_visualize(args) -> None:
    from .evaluator import infer
    from .trainer import load_checkpoint
    from .visualize import render_overlays

    samples = {s.video_id: s for s in load_dataset(args.data)}
    if args.video not in samples:
        raise UsageError(f"unknown video {args.video!r}")
    model = load_checkpoint(args.ckpt)
    tracks = infer(model, samples[args.video])
    out = Path(args.out)
    partial = _fresh_dir(out, force=True)
    paths = render_overlays(samples[args.video], tracks, partial)
    _publish(partial, out)
    print(f"wrote {len(paths)} overlay frames with {len(tracks)} tracks to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="syncvis", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--max-instances", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--occlusion-rate", type=float, default=0.3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one model per parameter value")
    a.add_argument("--param", required=True)
    a.add_argument("--values", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--parallel", type=int, default=0, metavar="WORKERS")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("visualize", help="write mask overlays for one video")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--video", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except UsageError as err:
        print(f"syncvis {args.command}: error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError, DatasetError) as err:
        print(f"syncvis {args.command}: failed: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
