"""Desk-scale training loop, checkpoints and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, model_config_from_dict, model_config_to_dict
from .data import VideoSample, load_dataset
from .evaluator import EvalResult, TrackQuality, evaluate_model
from .matching import Targets, total_loss
from .model import SyncVIS, frames_to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
ABLATION_PARAMS = ("T", "T_s", "N_k", "lambda", "sync_mode")


class CheckpointError(ValueError):
    pass


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> SyncVIS:
    torch.manual_seed(seed)
    return SyncVIS(cfg).to(dtype)


def save_checkpoint(model: SyncVIS, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    torch.save({
        "format_version": CHECKPOINT_FORMAT,
        "model_config": model_config_to_dict(model.config),
        "state_dict": model.state_dict(),
        **(extra or {}),
    }, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> SyncVIS:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
    cfg = model_config_from_dict(blob["model_config"])
    if expected is not None:
        arch = ("N", "C", "L", "K", "num_heads", "variant")
        diff = [k for k in arch if getattr(cfg, k) != getattr(expected, k)]
        if diff:
            raise CheckpointError(f"{path}: checkpoint/config mismatch in {', '.join(diff)}")
    model = SyncVIS(cfg)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as err:
        raise CheckpointError(f"{path}: {err}") from None
    return model


def split_dataset(samples: Sequence[VideoSample], holdout: int):
    if holdout <= 0:
        return list(samples), []
    if holdout >= len(samples):
        raise ValueError(f"holdout {holdout} leaves no training videos out of {len(samples)}")
    return list(samples[:-holdout]), list(samples[-holdout:])


def sample_batch(rng: np.random.Generator, samples: Sequence[VideoSample], batch: int, T: int):
    out = []
    for _ in range(batch):
        s = samples[int(rng.integers(len(samples)))]
        length = min(T, s.num_frames)
        start = int(rng.integers(0, s.num_frames - length + 1))
        out.append(s.clip(start, length))
    return out


def training_step(model: SyncVIS, clips: Sequence[VideoSample]):
    cfg = model.config
    dtype = next(model.parameters()).dtype
    parts = []
    for clip in clips:
        out = model(frames_to_tensor(clip.frames, dtype))
        X_f = out.states[-1].X_f
        parts.append(total_loss(out.predictions, Targets.from_sample(clip), cfg, X_f))
    return parts


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    eval: EvalResult | None = None
    quality: TrackQuality | None = None
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(tcfg: TrainConfig, samples: Sequence[VideoSample], out_dir: str | Path,
          eval_samples: Sequence[VideoSample] = ()) -> TrainResult:
    """Train on ``samples``; evaluates ``eval_samples`` at every evaluation interval and at the end."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = tcfg.model
    ckpt_path = out_dir / tcfg.checkpoint_path
    log_path = out_dir / tcfg.log_path
    model = build_model(cfg, tcfg.seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    schedule = None
    if tcfg.lr_schedule == "cosine":
        schedule = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda step: 0.5 * (1 + math.cos(math.pi * step / tcfg.iterations)))
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult(ckpt_path, log_path)
    start = time.time()
    with open(log_path, "w") as logf:
        for it in range(1, tcfg.iterations + 1):
            clips = sample_batch(rng, samples, tcfg.batch_size, cfg.T)
            parts = training_step(model, clips)
            loss = sum(p.total for p in parts) / len(parts)
            record = {"iter": it}
            for name in ("ce_f", "ce_v", "bce_f", "bce_v", "dice_f", "dice_v", "contras"):
                value = float(sum(getattr(p, name).detach() for p in parts) / len(parts))
                if not math.isfinite(value):
                    raise FloatingPointError(f"iteration {it}: non-finite loss component {name}")
                record[name] = value
            if not torch.isfinite(loss):
                raise FloatingPointError(f"iteration {it}: non-finite total loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            opt.step()
            if schedule is not None:
                schedule.step()
            record["total"] = float(loss.detach())
            record["grad_norm"] = float(grad_norm)
            logf.write(json.dumps(record) + "\n")
            result.losses.append(record["total"])
            if it % 50 == 0:
                log.info("iter %d  loss %.4f  (%.1fs)", it, record["total"], time.time() - start)
            if tcfg.eval_interval and it % tcfg.eval_interval == 0 and it < tcfg.iterations:
                save_checkpoint(model, ckpt_path, {"iteration": it})
                if eval_samples:
                    res, q, _ = evaluate_model(model, eval_samples)
                    log.info("iter %d  AP %.2f  mean IoU %.3f", it, res.AP, q.mean_iou)
    save_checkpoint(model, ckpt_path, {"iteration": tcfg.iterations})
    if eval_samples:
        result.eval, result.quality, _ = evaluate_model(model, eval_samples)
        with open(out_dir / "eval.json", "w") as f:
            json.dump({**result.eval.to_dict(), "mean_iou": result.quality.mean_iou,
                       "category_rate": result.quality.category_rate}, f, indent=2)
    result.seconds = time.time() - start
    return result


def train_from_dir(tcfg: TrainConfig, dataset_dir: str | Path, out_dir: str | Path) -> TrainResult:
    train_set, held_out = split_dataset(load_dataset(dataset_dir), tcfg.holdout_videos)
    return train(tcfg, train_set, out_dir, held_out)


def with_param(tcfg: TrainConfig, param: str, value: str) -> TrainConfig:
    """Configuration for one ablation point; T_s is clipped to T when sweeping T."""
    m = tcfg.model
    if param == "T":
        T = int(value)
        T_s = None if m.T_s is None else min(m.T_s, T)
        model = m.replace(T=T, T_s=T_s)
    elif param == "T_s":
        model = m.replace(T_s=None if value in ("full", "none") else int(value))
    elif param == "N_k":
        model = m.replace(N_k=int(value))
    elif param == "lambda":
        model = m.replace(lam=float(value))
    elif param == "sync_mode":
        model = m.replace(sync_mode=value)
    else:
        raise ValueError(f"unknown ablation parameter {param!r}; expected one of {ABLATION_PARAMS}")
    return tcfg.replace(model=model)


ABLATION_COLUMNS = ("value", "AP", "AP50", "AP75", "AR1", "AR10", "mean_iou", "category_rate")


def ablate(param: str, values: Sequence[str], tcfg: TrainConfig, samples: Sequence[VideoSample],
           eval_samples: Sequence[VideoSample], out_dir: str | Path) -> list[dict]:
    """One model per value, identical seeds, evaluated on ``eval_samples``."""
    out_dir = Path(out_dir)
    configs = [with_param(tcfg, param, str(v)) for v in values]   # validate all before training
    rows = []
    for value, cfg in zip(values, configs):
        log.info("ablation %s=%s", param, value)
        res = train(cfg, samples, out_dir / f"{param}={value}", eval_samples)
        row = {"value": str(value), **{k: getattr(res.eval, k) for k in ("AP", "AP50", "AP75", "AR1", "AR10")},
               "mean_iou": res.quality.mean_iou, "category_rate": res.quality.category_rate}
        rows.append(row)
    write_ablation_csv(rows, out_dir / f"ablation_{param}.csv")
    return rows


def write_ablation_csv(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.4f}" if isinstance(row[k], float) else row[k])
                             for k in ABLATION_COLUMNS})
    tmp.replace(path)
