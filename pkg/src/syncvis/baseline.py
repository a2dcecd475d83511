"""Video-query-only decoder loop (Mask2Former-VIS style) over a SyncVIS decoder's video parameters.

Written separately from ``SyncDecoder.forward`` so the two can be compared: with
the exchange switched off, the video-level trajectory of the synchronized decoder
must coincide with this loop.
"""

from __future__ import annotations

import torch

from .backbone import PyramidFeatures
from .decoder import SyncDecoder, attention_mask
from .heads import Heads


def video_only_trajectory(decoder: SyncDecoder, heads: Heads, features: PyramidFeatures) -> list[torch.Tensor]:
    X = decoder.video_query
    trajectory = [X]
    mask = heads.predict_masks(X, features.pixel_embed, "video")
    for layer in range(decoder.config.L):
        memory, pos, hw = decoder.memory(features, layer)
        C = memory.shape[-1]
        allowed = attention_mask(mask.unsqueeze(0), hw)
        X = decoder.layers_v[layer](X.unsqueeze(0), memory.reshape(1, -1, C),
                                    pos.reshape(1, -1, C), allowed).squeeze(0)
        trajectory.append(X)
        mask = heads.predict_masks(X, features.pixel_embed, "video")
    return trajectory
