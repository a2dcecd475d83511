"""Synthetic moving-shape videos with exact instance tracks, and their on-disk format.

Layout of a dataset directory::

    videos/<video_id>/frame_00000.png   8-bit RGB
    annotations.json                    videos / categories / annotations

Segmentations are uncompressed row-major run-length encodings whose first run
counts zeros (possibly zero of them). Absent frames are stored as ``null``.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SHAPE_KINDS = ("disk", "rectangle", "triangle")
CATEGORY_OF = {kind: i + 1 for i, kind in enumerate(SHAPE_KINDS)}
BACKGROUND = 0.5
NOISE_AMPLITUDE = 0.05
MAX_INSTANCES = 8


class DatasetError(ValueError):
    """A dataset directory does not conform to the expected layout."""


class RLEError(DatasetError):
    pass


@dataclass
class InstanceSpec:
    kind: str
    size: float                       # disk radius / half-extent of the bounding box
    position: tuple[float, float]     # (y, x) center at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels per frame
    reverse_at: int | None = None     # frame from which the velocity is negated


@dataclass
class OcclusionEvent:
    pair: tuple[int, int]
    start: int
    end: int                          # inclusive


@dataclass
class ScenarioSpec:
    T: int
    H: int
    W: int
    seed: int
    instances: list[InstanceSpec] = field(default_factory=list)
    occlusion_events: list[OcclusionEvent] = field(default_factory=list)
    # instance index -> inclusive (start, end) frame intervals off-canvas
    absence_intervals: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def num_instances(self) -> int:
        return len(self.instances)

    def validate(self) -> None:
        if self.T <= 0 or self.H <= 0 or self.W <= 0:
            raise ValueError(f"T, H, W must be positive, got {self.T}, {self.H}, {self.W}")
        if len(self.instances) > MAX_INSTANCES:
            raise ValueError(f"at most {MAX_INSTANCES} instances, got {len(self.instances)}")
        for i, inst in enumerate(self.instances):
            if inst.kind not in SHAPE_KINDS:
                raise ValueError(f"instance {i}: unknown shape kind {inst.kind!r}")
            if inst.size < 1.0 or 2 * inst.size + 1 > min(self.H, self.W):
                raise ValueError(
                    f"instance {i}: size {inst.size} does not fit a {self.H}x{self.W} canvas")
        for ev in self.occlusion_events:
            a, b = ev.pair
            if a == b or not (0 <= a < len(self.instances) and 0 <= b < len(self.instances)):
                raise ValueError(f"bad occlusion pair {ev.pair}")
            if not 0 <= ev.start <= ev.end < self.T:
                raise ValueError(f"bad occlusion interval [{ev.start}, {ev.end}]")
        for i, intervals in self.absence_intervals.items():
            if not 0 <= i < len(self.instances):
                raise ValueError(f"absence interval for unknown instance {i}")
            for s, e in intervals:
                if not 0 <= s <= e < self.T:
                    raise ValueError(f"bad absence interval [{s}, {e}] for instance {i}")


@dataclass
class InstanceTrack:
    track_id: int
    category_id: int
    masks: list[np.ndarray | None]    # length T; bool H x W or None when absent

    @property
    def presence(self) -> list[bool]:
        return [m is not None for m in self.masks]

    def mask_array(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros((len(self.masks), *shape), dtype=bool)
        for t, m in enumerate(self.masks):
            if m is not None:
                out[t] = m
        return out


@dataclass
class VideoSample:
    video_id: str
    frames: np.ndarray                # T x H x W x 3 float32 in [0, 1]
    tracks: list[InstanceTrack]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def clip(self, start: int, length: int) -> "VideoSample":
        """Frames ``start .. start+length-1``; tracks absent throughout are dropped."""
        sl = slice(start, start + length)
        tracks = [InstanceTrack(tr.track_id, tr.category_id, tr.masks[sl]) for tr in self.tracks]
        tracks = [tr for tr in tracks if any(tr.presence)]
        return VideoSample(self.video_id, self.frames[sl], tracks)


# ── rasterization ─────────────────────────────────────────────────────────

def rasterize(kind: str, center: tuple[float, float], size: float, H: int, W: int) -> np.ndarray:
    cy, cx = center
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == "rectangle":
        return (np.abs(yy - cy) <= 0.7 * size) & (np.abs(xx - cx) <= size)
    if kind == "triangle":
        # apex up; base at cy + size spanning cx - size .. cx + size
        top, bottom = cy - size, cy + size
        frac = (yy - top) / (bottom - top)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * size)
    raise ValueError(f"unknown shape kind {kind!r}")


def _fold(value: float, lo: float, hi: float) -> float:
    """Reflect ``value`` into [lo, hi] (bouncing off the walls)."""
    if hi <= lo:
        return lo
    span = hi - lo
    r = (value - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


def _trajectory(inst: InstanceSpec, T: int, H: int, W: int) -> list[tuple[float, float]]:
    out = []
    for t in range(T):
        if inst.reverse_at is not None and t > inst.reverse_at:
            steps = inst.reverse_at - (t - inst.reverse_at)
        else:
            steps = t
        y = inst.position[0] + inst.velocity[0] * steps
        x = inst.position[1] + inst.velocity[1] * steps
        out.append((_fold(y, inst.size, H - 1 - inst.size), _fold(x, inst.size, W - 1 - inst.size)))
    return out


def _instance_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.uniform(0.0, 1.0)
    value = rng.choice([0.15, 0.95])
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, value), dtype=np.float64)


def instance_centers(spec: ScenarioSpec) -> list[list[tuple[float, float]]]:
    """Per instance, per frame (y, x) centers after bouncing and occlusion placement."""
    T, H, W = spec.T, spec.H, spec.W
    centers = [_trajectory(inst, T, H, W) for inst in spec.instances]
    for ev in spec.occlusion_events:
        front, rear = sorted(ev.pair)
        fs, rs = spec.instances[front].size, spec.instances[rear].size
        # partial overlap: rear stays visible beside the front shape
        d = 0.75 * (fs + rs)
        for t in range(ev.start, ev.end + 1):
            fy, fx = centers[front][t]
            sign = 1.0 if fx + d <= W - 1 - rs else -1.0
            x = min(max(fx + sign * d, rs), W - 1 - rs)
            y = min(max(fy, rs), H - 1 - rs)
            centers[rear][t] = (y, x)
    return centers


def generate_video(spec: ScenarioSpec, video_id: str = "video_00000") -> VideoSample:
    """Render ``spec``; bit-identical output for identical specs."""
    spec.validate()
    T, H, W = spec.T, spec.H, spec.W
    rng = np.random.default_rng(spec.seed)
    colors = [_instance_color(rng) for _ in spec.instances]
    centers = instance_centers(spec)

    absent = {i: set() for i in range(spec.num_instances)}
    for i, intervals in spec.absence_intervals.items():
        for s, e in intervals:
            absent[i].update(range(s, e + 1))

    frames = np.empty((T, H, W, 3), dtype=np.float32)
    masks: list[list[np.ndarray | None]] = [[None] * T for _ in spec.instances]
    for t in range(T):
        img = np.full((H, W, 3), BACKGROUND, dtype=np.float64)
        covered = np.zeros((H, W), dtype=bool)
        # lower index is in front
        for i, inst in enumerate(spec.instances):
            if t in absent[i]:
                continue
            shape = rasterize(inst.kind, centers[i][t], inst.size, H, W)
            visible = shape & ~covered
            covered |= shape
            img[visible] = colors[i]
            if visible.any():
                masks[i][t] = visible
        img += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    tracks = [
        InstanceTrack(track_id=i, category_id=CATEGORY_OF[inst.kind], masks=masks[i])
        for i, inst in enumerate(spec.instances)
    ]
    return VideoSample(video_id, frames, tracks)


def random_scenario(seed: int, T: int = 12, H: int = 64, W: int = 64, max_instances: int = 3,
                    occlusion_rate: float = 0.3, absence_rate: float = 0.15,
                    min_instances: int = 1) -> ScenarioSpec:
    """Sample a scenario; everything downstream is a function of ``seed``."""
    if max_instances < min_instances or max_instances > MAX_INSTANCES:
        raise ValueError(f"max_instances must lie in [{min_instances}, {MAX_INSTANCES}]")
    rng = np.random.default_rng([seed, 0x5EED])
    n = int(rng.integers(min_instances, max_instances + 1))
    scale = min(H, W) / 64.0
    instances = []
    for _ in range(n):
        size = float(rng.uniform(6.0, 11.0) * scale)
        pos = (float(rng.uniform(size, H - 1 - size)), float(rng.uniform(size, W - 1 - size)))
        vel = (float(rng.uniform(-2.5, 2.5) * scale), float(rng.uniform(-2.5, 2.5) * scale))
        reverse_at = int(rng.integers(1, T)) if T > 2 and rng.uniform() < 0.3 else None
        instances.append(InstanceSpec(str(rng.choice(SHAPE_KINDS)), size, pos, vel, reverse_at))
    occlusions = []
    if n >= 2 and rng.uniform() < occlusion_rate:
        a, b = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        start = int(rng.integers(0, T))
        occlusions.append(OcclusionEvent((a, b), start, min(T - 1, start + int(rng.integers(1, 4)))))
    absences: dict[int, list[tuple[int, int]]] = {}
    for i in range(n):
        if T > 2 and rng.uniform() < absence_rate:
            start = int(rng.integers(1, T - 1))
            absences[i] = [(start, min(T - 2, start + int(rng.integers(0, 3))))]
    return ScenarioSpec(T, H, W, int(rng.integers(0, 2**63 - 1)), instances, occlusions, absences)


# ── run-length encoding ──────────────────────────────────────────────────

def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"counts": [int(c) for c in counts], "size": [int(mask.shape[0]), int(mask.shape[1])]}


def rle_decode(rle: dict, name: str = "mask") -> np.ndarray:
    H, W = (int(v) for v in rle["size"])
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if (counts < 0).any():
        raise RLEError(f"{name}: negative run length")
    if counts.sum() != H * W:
        raise RLEError(f"{name}: runs sum to {int(counts.sum())}, expected {H}*{W}={H * W}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(H, W)


# ── dataset I/O ──────────────────────────────────────────────────────────

def _frame_path(directory: Path, video_id: str, t: int) -> Path:
    return directory / "videos" / video_id / f"frame_{t:05d}.png"


def write_png(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb).save(path, format="PNG", compress_level=6)


def write_dataset(samples: Sequence[VideoSample], directory: str | os.PathLike) -> dict:
    directory = Path(directory)
    (directory / "videos").mkdir(parents=True, exist_ok=True)
    videos, annotations = [], []
    for sample in samples:
        T, (H, W) = sample.num_frames, sample.size
        vdir = directory / "videos" / sample.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        for t in range(T):
            write_png(_frame_path(directory, sample.video_id, t),
                      np.round(sample.frames[t] * 255.0).astype(np.uint8))
        videos.append({"id": sample.video_id, "width": W, "height": H, "length": T})
        for tr in sample.tracks:
            annotations.append({
                "video_id": sample.video_id,
                "track_id": tr.track_id,
                "category_id": tr.category_id,
                "segmentations": [None if m is None else rle_encode(m) for m in tr.masks],
            })
    doc = {
        "videos": videos,
        "categories": [{"id": CATEGORY_OF[k], "name": k} for k in SHAPE_KINDS],
        "annotations": annotations,
    }
    tmp = directory / "annotations.json.partial"
    tmp.write_text(json.dumps(doc, separators=(",", ":")))
    tmp.replace(directory / "annotations.json")
    return {
        "num_videos": len(videos),
        "num_annotations": len(annotations),
        "video_ids": [v["id"] for v in videos],
    }


def load_dataset(directory: str | os.PathLike) -> list[VideoSample]:
    directory = Path(directory)
    ann_path = directory / "annotations.json"
    if not ann_path.is_file():
        raise DatasetError(f"missing {ann_path}")
    doc = json.loads(ann_path.read_text())
    samples: dict[str, VideoSample] = {}
    for v in doc["videos"]:
        vid, T, H, W = v["id"], int(v["length"]), int(v["height"]), int(v["width"])
        frames = np.empty((T, H, W, 3), dtype=np.float32)
        for t in range(T):
            path = _frame_path(directory, vid, t)
            if not path.is_file():
                raise DatasetError(f"video {vid}: missing frame image {path}")
            with Image.open(path) as im:
                rgb = np.asarray(im.convert("RGB"))
            if rgb.shape != (H, W, 3):
                raise DatasetError(f"video {vid}: frame {t} has shape {rgb.shape}")
            frames[t] = rgb.astype(np.float32) / 255.0
        samples[vid] = VideoSample(vid, frames, [])
    for k, ann in enumerate(doc["annotations"]):
        vid = ann["video_id"]
        if vid not in samples:
            raise DatasetError(f"annotation {k} (track {ann.get('track_id')}) references unknown video {vid!r}")
        sample = samples[vid]
        T, (H, W) = sample.num_frames, sample.size
        segs = ann["segmentations"]
        if len(segs) != T:
            raise DatasetError(f"annotation {k}: {len(segs)} segmentations for a {T}-frame video")
        masks = []
        for t, seg in enumerate(segs):
            if seg is None:
                masks.append(None)
                continue
            if [int(s) for s in seg["size"]] != [H, W]:
                raise RLEError(f"annotation {k} frame {t}: size {seg['size']} != {[H, W]}")
            m = rle_decode(seg, name=f"annotation {k} (video {vid}, track {ann['track_id']}) frame {t}")
            masks.append(m if m.any() else None)
        sample.tracks.append(InstanceTrack(int(ann["track_id"]), int(ann["category_id"]), masks))
    return list(samples.values())


def iter_scenarios(seed: int, count: int, **kwargs) -> Iterable[ScenarioSpec]:
    for i in range(count):
        yield random_scenario(seed * 1_000_003 + i, **kwargs)
