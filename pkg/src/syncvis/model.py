"""Backbone + synchronized decoder + heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import Backbone, PyramidFeatures, pad_to_multiple
from .config import ModelConfig
from .decoder import EmbeddingState, SyncDecoder
from .heads import Heads, PredictionSet


@dataclass
class ModelOutput:
    states: list[EmbeddingState]
    predictions: list[PredictionSet]
    features: PyramidFeatures
    image_size: tuple[int, int]   # unpadded H, W


class SyncVIS(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.C)
        self.decoder = SyncDecoder(config)
        self.heads = Heads(config.C, config.K)

    def forward(self, frames: torch.Tensor) -> ModelOutput:
        """``frames``: T x 3 x H x W in [0, 1]; padded internally to multiples of 32."""
        H, W = frames.shape[-2:]
        x = pad_to_multiple(frames) - 0.5
        features = self.backbone(x)
        states, preds = self.decoder(features, self.heads)
        return ModelOutput(states, preds, features, (H, W))


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """T x H x W x 3 array -> T x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames)).to(dtype).permute(0, 3, 1, 2).contiguous()


def full_resolution(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Upsample stride-4 logits (... x h x w) to the padded frame and crop to ``size``."""
    h, w = mask_logits.shape[-2:]
    lead = mask_logits.shape[:-2]
    up = F.interpolate(mask_logits.reshape(1, -1, h, w), size=(4 * h, 4 * w),
                       mode="bilinear", align_corners=False)
    return up[..., : size[0], : size[1]].reshape(*lead, size[0], size[1])
