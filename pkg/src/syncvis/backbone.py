"""Small convolutional backbone producing stride-8/16/32 features and a stride-4 pixel embedding."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

STRIDES = (8, 16, 32)


@dataclass
class PyramidFeatures:
    # levels[i]: T x C x H/s x W/s, ordered by stride 8, 16, 32
    levels: list[torch.Tensor]
    pixel_embed: torch.Tensor  # T x C x H/4 x W/4

    @property
    def num_frames(self) -> int:
        return self.pixel_embed.shape[0]


def _stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.GELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.GELU(),
    )


class Backbone(nn.Module):
    """Stem (stride 2) then four stride-2 stages with widths 32, 64, C, C.

    Each frame is processed independently. The stride-4 pixel embedding fuses all
    levels top-down (upsample and add) followed by a 1x1 projection.
    """

    def __init__(self, C: int = 64, stem: int = 16):
        super().__init__()
        self.C = C
        self.stem = nn.Sequential(nn.Conv2d(3, stem, 3, stride=2, padding=1), nn.GELU())
        widths = (32, 64, C, C)
        self.stages = nn.ModuleList()
        cin = stem
        for w in widths:
            self.stages.append(_stage(cin, w))
            cin = w
        # lateral projections for strides 4, 8, 16, 32
        self.lateral = nn.ModuleList(nn.Conv2d(w, C, 1) for w in widths)
        self.output = nn.Sequential(nn.Conv2d(C, C, 3, padding=1), nn.GELU(), nn.Conv2d(C, C, 1))

    def forward(self, frames: torch.Tensor) -> PyramidFeatures:
        """``frames``: T x 3 x H x W with H, W multiples of 32."""
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected T x 3 x H x W frames, got {tuple(frames.shape)}")
        H, W = frames.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"frame size {H}x{W} is not padded to a multiple of 32")
        x = self.stem(frames)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        lat = [proj(f) for proj, f in zip(self.lateral, feats)]
        levels = lat[1:]
        fused = lat[-1]
        for f in reversed(lat[:-1]):
            fused = f + F.interpolate(fused, size=f.shape[-2:], mode="nearest")
        return PyramidFeatures(levels=levels, pixel_embed=self.output(fused))


def pad_to_multiple(frames: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    H, W = frames.shape[-2:]
    ph, pw = -H % multiple, -W % multiple
    if ph == 0 and pw == 0:
        return frames
    return F.pad(frames, (0, pw, 0, ph), value=0.5)


def extract_pyramid(frames: torch.Tensor, backbone: Backbone) -> PyramidFeatures:
    """T x H x W x 3 frames (already padded) -> pyramid features."""
    if frames.dim() != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected T x H x W x 3 frames, got {tuple(frames.shape)}")
    return backbone(frames.permute(0, 3, 1, 2))
