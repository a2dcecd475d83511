"""Track inference and YouTube-VIS style metrics (spatio-temporal IoU, AP, AR)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import InstanceTrack, VideoSample, rle_decode, rle_encode
from .model import SyncVIS, frames_to_tensor, full_resolution

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SCORE_THRESHOLD = 0.05
MAX_TRACKS = 10
MAX_DETS = 100


@dataclass
class TrackPrediction:
    video_id: str
    category_id: int
    confidence: float
    masks: np.ndarray          # T x H x W bool


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    per_category: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        return d


# ── inference ─────────────────────────────────────────────────────────────

@torch.no_grad()
def infer(model: SyncVIS, sample: VideoSample, score_threshold: float = SCORE_THRESHOLD,
          max_tracks: int = MAX_TRACKS) -> list[TrackPrediction]:
    """Tracks from the final layer's video-level class and mask outputs."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(frames_to_tensor(sample.frames, dtype))
    model.train(was_training)
    final = out.predictions[-1]
    K = model.config.K
    probs = final.video_class.softmax(-1)[:, :K]
    scores, labels = probs.max(-1)
    order = torch.argsort(-scores, stable=True)
    keep = [int(q) for q in order if scores[q] >= score_threshold][:max_tracks]
    if not keep:
        return []
    masks = full_resolution(final.video_mask[keep], out.image_size) > 0
    return [
        TrackPrediction(sample.video_id, int(labels[q]) + 1, float(scores[q]), masks[i].numpy())
        for i, q in enumerate(keep)
    ]


# ── IoU ───────────────────────────────────────────────────────────────────

def track_masks(track: InstanceTrack | TrackPrediction | np.ndarray,
                shape: tuple[int, int] | None = None) -> np.ndarray:
    if isinstance(track, TrackPrediction):
        return np.asarray(track.masks, dtype=bool)
    if isinstance(track, InstanceTrack):
        if shape is None:
            shape = next(m.shape for m in track.masks if m is not None)
        return track.mask_array(shape)
    return np.asarray(track, dtype=bool)


def spatiotemporal_iou(pred, gt) -> float:
    """Sum over frames of intersections divided by sum over frames of unions."""
    p = track_masks(pred)
    g = track_masks(gt, p.shape[1:] if p.ndim == 3 else None)
    if p.shape[0] != g.shape[0]:
        raise ValueError(f"track lengths differ: {p.shape[0]} vs {g.shape[0]}")
    inter = np.logical_and(p, g).sum()
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


# ── AP / AR ───────────────────────────────────────────────────────────────

def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(~tp)
    recall = tp_sum / num_gt
    precision = tp_sum / (tp_sum + fp_sum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _match_video(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy: predictions in confidence order take the best free gt with IoU >= threshold."""
    D, G = ious.shape
    taken = np.zeros(G, dtype=bool)
    tp = np.zeros(D, dtype=bool)
    for d in range(D):
        best, best_g = -1.0, -1
        for g in range(G):
            if not taken[g] and ious[d, g] >= threshold and ious[d, g] > best:
                best, best_g = ious[d, g], g
        if best_g >= 0:
            taken[best_g] = True
            tp[d] = True
    return tp


def compute_ap(predictions: Iterable[TrackPrediction], samples: Sequence[VideoSample]) -> EvalResult:
    by_video = {s.video_id: s for s in samples}
    preds: dict[tuple[str, int], list[TrackPrediction]] = {}
    for p in predictions:
        if p.video_id not in by_video:
            raise KeyError(f"prediction references unknown video {p.video_id!r}")
        preds.setdefault((p.video_id, p.category_id), []).append(p)

    categories = sorted({tr.category_id for s in samples for tr in s.tracks})
    # per category, per video: (scores sorted desc, IoU matrix)
    ap = np.zeros((len(IOU_THRESHOLDS), len(categories)))
    recall = {k: np.zeros((len(IOU_THRESHOLDS), len(categories))) for k in (1, 10)}
    for ci, cat in enumerate(categories):
        per_video = []
        num_gt = 0
        for vid in sorted(by_video):
            sample = by_video[vid]
            gts = [tr for tr in sample.tracks if tr.category_id == cat]
            num_gt += len(gts)
            dts = preds.get((vid, cat), [])
            order = sorted(range(len(dts)), key=lambda i: -dts[i].confidence)[:MAX_DETS]
            dts = [dts[i] for i in order]
            ious = np.array([[spatiotemporal_iou(d, track_masks(g, sample.size)) for g in gts]
                             for d in dts]).reshape(len(dts), len(gts))
            per_video.append((np.array([d.confidence for d in dts]), ious))
        for ti, thr in enumerate(IOU_THRESHOLDS):
            scores, flags = [], []
            for sc, ious in per_video:
                scores.append(sc)
                flags.append(_match_video(ious, thr))
            sc = np.concatenate(scores) if scores else np.zeros(0)
            fl = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
            order = np.argsort(-sc, kind="mergesort")
            ap[ti, ci] = _interpolated_ap(fl[order], num_gt)
            for k in recall:
                hits = sum(int(_match_video(ious[:k], thr).sum()) for _, ious in per_video)
                recall[k][ti, ci] = hits / num_gt

    if not categories:
        return EvalResult(0.0, 0.0, 0.0, 0.0, 0.0, {})
    return EvalResult(
        AP=100.0 * float(ap.mean()),
        AP50=100.0 * float(ap[0].mean()),
        AP75=100.0 * float(ap[IOU_THRESHOLDS.index(0.75)].mean()),
        AR1=100.0 * float(recall[1].mean()),
        AR10=100.0 * float(recall[10].mean()),
        per_category={cat: 100.0 * float(ap[:, ci].mean()) for ci, cat in enumerate(categories)},
    )


@dataclass
class TrackQuality:
    mean_iou: float          # mean over gt tracks of the best IoU among predictions
    category_rate: float     # fraction of gt tracks whose best-IoU prediction has the right class
    num_tracks: int


def track_quality(predictions: Iterable[TrackPrediction], samples: Sequence[VideoSample]) -> TrackQuality:
    by_video: dict[str, list[TrackPrediction]] = {}
    for p in predictions:
        by_video.setdefault(p.video_id, []).append(p)
    ious, correct = [], []
    for s in samples:
        dts = by_video.get(s.video_id, [])
        for tr in s.tracks:
            g = track_masks(tr, s.size)
            scored = [(spatiotemporal_iou(d, g), d) for d in dts]
            if not scored:
                ious.append(0.0)
                correct.append(False)
                continue
            best_iou, best = max(scored, key=lambda x: x[0])
            ious.append(best_iou)
            correct.append(best.category_id == tr.category_id)
    if not ious:
        return TrackQuality(1.0, 1.0, 0)
    return TrackQuality(float(np.mean(ious)), float(np.mean(correct)), len(ious))


def evaluate_model(model: SyncVIS, samples: Sequence[VideoSample]):
    preds = [p for s in samples for p in infer(model, s)]
    return compute_ap(preds, samples), track_quality(preds, samples), preds


# ── prediction dump ───────────────────────────────────────────────────────

def predictions_to_json(predictions: Iterable[TrackPrediction]) -> list[dict]:
    return [
        {
            "video_id": p.video_id,
            "category_id": p.category_id,
            "score": p.confidence,
            "segmentations": [rle_encode(m) if m.any() else None for m in p.masks],
        }
        for p in predictions
    ]


def predictions_from_json(doc: list[dict], samples: Sequence[VideoSample]) -> list[TrackPrediction]:
    by_video = {s.video_id: s for s in samples}
    out = []
    for k, entry in enumerate(doc):
        vid = entry["video_id"]
        if vid not in by_video:
            raise KeyError(f"prediction {k} references unknown video {vid!r}")
        H, W = by_video[vid].size
        masks = np.stack([
            np.zeros((H, W), dtype=bool) if seg is None else rle_decode(seg, name=f"prediction {k}")
            for seg in entry["segmentations"]
        ])
        out.append(TrackPrediction(vid, int(entry["category_id"]), float(entry["score"]), masks))
    return out


def write_json(path: str | Path, doc) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)
