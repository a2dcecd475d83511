"""Static mask overlays: one PNG per frame, colour fixed per track."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .data import SHAPE_KINDS, VideoSample, write_png
from .evaluator import TrackPrediction

SCALE = 4
ALPHA = 0.5


def track_color(index: int) -> np.ndarray:
    # golden-ratio hue steps keep neighbouring ids distinguishable
    hue = (index * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 1.0))


def render_overlays(sample: VideoSample, tracks: Sequence[TrackPrediction],
                    out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(sample.num_frames):
        img = sample.frames[t].astype(np.float64).copy()
        labels = []
        for k, tr in enumerate(tracks):
            m = tr.masks[t]
            if not m.any():
                continue
            img[m] = (1 - ALPHA) * img[m] + ALPHA * track_color(k)
            ys, xs = np.nonzero(m)
            labels.append((k, tr, int(ys.min()), int(xs.min())))
        rgb = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        big = Image.fromarray(rgb).resize((rgb.shape[1] * SCALE, rgb.shape[0] * SCALE), Image.NEAREST)
        draw = ImageDraw.Draw(big)
        for k, tr, y, x in labels:
            name = SHAPE_KINDS[tr.category_id - 1] if 1 <= tr.category_id <= len(SHAPE_KINDS) else "?"
            color = tuple(int(c * 255) for c in track_color(k))
            draw.text((x * SCALE, max(0, y * SCALE - 10)), f"#{k} {name} {tr.confidence:.2f}", fill=color)
        path = out_dir / f"frame_{t:05d}.png"
        write_png(path, np.asarray(big))
        paths.append(path)
    return paths
