"""Desk-scale benchmark runs: the learning check and the T / lambda / N_k trend sweeps.

Every run trains on the same 200 synthetic videos with the same seed and is
evaluated on the same 50 held-out videos. Results are written as JSON so that
the acceptance tests can read them without retraining.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

from .config import ModelConfig, TrainConfig, model_config_to_dict
from .data import VideoSample, generate_video, iter_scenarios
from .trainer import train

log = logging.getLogger(__name__)

BENCHMARK = dict(seed=0, videos=250, held_out=50, T=8, H=64, W=64, max_instances=3)

# name -> model-config overrides on top of the defaults
TREND_RUNS = {
    "full_T8": {},
    "full_T2": {"T": 2, "T_s": 2},
    "baseline_T8": {"variant": "video_only", "lam": 0.0, "T_s": None},
    "baseline_T2": {"variant": "video_only", "lam": 0.0, "T": 2, "T_s": None},
    "lambda_0": {"lam": 0.0},
    "lambda_0.5": {"lam": 0.5},
    "N_k_20": {"N_k": 20},
}


def benchmark() -> tuple[list[VideoSample], list[VideoSample]]:
    b = BENCHMARK
    specs = iter_scenarios(b["seed"], b["videos"], T=b["T"], H=b["H"], W=b["W"],
                           max_instances=b["max_instances"])
    videos = [generate_video(spec, f"video_{i:05d}") for i, spec in enumerate(specs)]
    return videos[: -b["held_out"]], videos[-b["held_out"]:]


def desk_train_config(**model_changes) -> TrainConfig:
    return TrainConfig(model=ModelConfig().replace(**model_changes), eval_interval=0)


def _train_fields(tcfg: TrainConfig) -> dict:
    return {k: v for k, v in dataclasses.asdict(tcfg).items() if k != "model"}


def run(name: str, tcfg: TrainConfig, data, out_dir: str | Path) -> dict:
    train_set, held_out = data
    res = train(tcfg, train_set, Path(out_dir) / name, held_out)
    record = {
        "name": name,
        "model": model_config_to_dict(tcfg.model),
        "train": _train_fields(tcfg),
        "benchmark": BENCHMARK,
        **res.eval.to_dict(),
        "mean_iou": res.quality.mean_iou,
        "category_rate": res.quality.category_rate,
        "seconds": res.seconds,
        "final_loss": sum(res.losses[-50:]) / min(50, len(res.losses)),
    }
    log.info("%s: AP %.2f  mean IoU %.3f  category rate %.3f  (%.0fs)", name, res.eval.AP,
             res.quality.mean_iou, res.quality.category_rate, res.seconds)
    return record


def _write(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)


def run_desk(results_dir: str | Path, work_dir: str | Path, tcfg: TrainConfig | None = None) -> dict:
    record = run("desk", tcfg or desk_train_config(), benchmark(), work_dir)
    _write(Path(results_dir) / "desk_run.json", record)
    return record


def run_trends(results_dir: str | Path, work_dir: str | Path, names=None,
               base: TrainConfig | None = None, filename: str = "trends.json") -> dict:
    """Runs the named trend configurations, reusing any already stored in ``filename``."""
    path = Path(results_dir) / filename
    done = json.loads(path.read_text()) if path.is_file() else {}
    base = base or desk_train_config()
    desk_path = Path(results_dir) / "desk_run.json"
    desk = json.loads(desk_path.read_text()) if desk_path.is_file() else None
    data = None
    for name in names or TREND_RUNS:
        if name in done:
            continue
        tcfg = base.replace(model=base.model.replace(**TREND_RUNS[name]))
        if desk is not None and desk["model"] == model_config_to_dict(tcfg.model) \
                and desk["train"] == _train_fields(tcfg):
            done[name] = {**desk, "name": name}      # identical configuration already trained
        else:
            data = data or benchmark()
            done[name] = run(name, tcfg, data, Path(work_dir) / f"seed{tcfg.seed}")
        _write(path, done)
    return done
