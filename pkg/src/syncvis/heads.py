"""Class and mask heads shared by every decoder layer."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import MLP


@dataclass
class PredictionSet:
    # frame-level fields are None for the video-only variant
    frame_class: torch.Tensor | None   # T x N x (K+1)
    frame_mask: torch.Tensor | None    # T x N x h x w
    video_class: torch.Tensor          # N x (K+1)
    video_mask: torch.Tensor           # N x T x h x w
    layer: int


class Heads(nn.Module):
    """A LayerNorm shared by both levels, one class head per level and one mask MLP.

    Mask logits are dot products between the mask embedding of a query and the
    per-pixel embedding. At video level the same query embedding is used for
    every frame.
    """

    def __init__(self, C: int, K: int):
        super().__init__()
        self.K = K
        self.norm = nn.LayerNorm(C)
        self.class_frame = nn.Linear(C, K + 1)
        self.class_video = nn.Linear(C, K + 1)
        self.mask_embed = MLP(C, C, C)

    def classify(self, embeddings: torch.Tensor, level: str) -> torch.Tensor:
        head = self.class_frame if level == "frame" else self.class_video
        return head(self.norm(embeddings))

    def predict_masks(self, embeddings: torch.Tensor, pixel_embed: torch.Tensor,
                      level: str) -> torch.Tensor:
        """frame: T x N x C -> T x N x h x w;  video: N x C (or 1 x N x C) -> N x T x h x w."""
        if embeddings.shape[-1] != pixel_embed.shape[1]:
            raise ValueError(
                f"embedding width {embeddings.shape[-1]} != pixel embedding width {pixel_embed.shape[1]}")
        m = self.mask_embed(self.norm(embeddings))
        if level == "frame":
            if m.shape[0] != pixel_embed.shape[0]:
                raise ValueError("frame-level embeddings need one slice per frame")
            return torch.einsum("tnc,tchw->tnhw", m, pixel_embed)
        if m.dim() == 3:
            m = m.squeeze(0)
        return torch.einsum("nc,tchw->nthw", m, pixel_embed)

    def class_scores(self, logits: torch.Tensor) -> torch.Tensor:
        """Max foreground probability per query."""
        return logits.softmax(-1)[..., : self.K].max(-1).values
