"""Synchronized frame/video query decoder.

Every layer refines frame-level embeddings (one query set per frame, attending to
that frame's features) and video-level embeddings (one query set attending to the
features of all frames) with masked cross-attention, self-attention and an FFN.
The two levels then exchange information: each level cross-attends to the
``N_k`` most confident embeddings of the other, and the result is blended in with
momentum ``lam``. Both directions read the pre-exchange embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
from torch import nn
from torch.nn import functional as F

from .attention import MLP, CrossAttentionBlock, FFNBlock, SelfAttentionBlock
from .backbone import PyramidFeatures
from .config import ModelConfig
from .heads import Heads, PredictionSet


@dataclass
class EmbeddingState:
    X_f: torch.Tensor | None  # T x N x C
    X_v: torch.Tensor         # N x C
    layer: int

    def check_finite(self) -> None:
        for name, x in (("X_f", self.X_f), ("X_v", self.X_v)):
            if x is not None and not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite {name} at decoder layer {self.layer}")


def init_state(config: ModelConfig, frame_query: torch.Tensor | None,
               video_query: torch.Tensor, T: int) -> EmbeddingState:
    """Frame queries are replicated once per frame, video queries once."""
    expected = (config.N, config.C)
    if tuple(video_query.shape) != expected:
        raise ValueError(f"video query shape {tuple(video_query.shape)} != {expected}")
    X_f = None
    if frame_query is not None:
        if tuple(frame_query.shape) != expected:
            raise ValueError(f"frame query shape {tuple(frame_query.shape)} != {expected}")
        X_f = frame_query.unsqueeze(0).expand(T, -1, -1)
    return EmbeddingState(X_f=X_f, X_v=video_query, layer=0)


def select_top_k(embeddings: torch.Tensor, scores: torch.Tensor, k: int):
    """Per slice, the ``k`` highest-scoring embeddings in descending score order.

    Ties go to the lower query index. Scores only route; no gradient flows
    through them.
    """
    M, N, C = embeddings.shape
    if k > N:
        raise ValueError(f"N_k={k} exceeds the {N} available embeddings")
    order = torch.argsort(-scores.detach(), dim=-1, stable=True)[:, :k]
    picked = torch.gather(embeddings, 1, order.unsqueeze(-1).expand(M, k, C))
    return picked, order


@lru_cache(maxsize=64)
def sine_position(T: int, h: int, w: int, C: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed (t, y, x) sine embedding, T x (h*w) x C. Cached; do not modify in place."""
    n_yx = 2 * (C // 6)
    n_t = C - 2 * n_yx

    def enc(pos: torch.Tensor, n: int) -> torch.Tensor:
        if n == 0:
            return pos.new_zeros(pos.shape + (0,))
        freq = 10000.0 ** (torch.arange(n // 2, dtype=torch.float64) * 2 / n)
        ang = pos.unsqueeze(-1) / freq
        out = torch.cat([ang.sin(), ang.cos()], dim=-1)
        return F.pad(out, (0, n - out.shape[-1]))

    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ts = torch.arange(T, dtype=torch.float64)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pyx = torch.cat([enc(gy.reshape(-1), n_yx), enc(gx.reshape(-1), n_yx)], dim=-1)  # S x 2n
    pt = enc(ts, n_t)                                                                # T x n_t
    pos = torch.cat([pt.unsqueeze(1).expand(T, h * w, n_t), pyx.unsqueeze(0).expand(T, -1, -1)], -1)
    return pos.to(dtype)


def attention_mask(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Foreground of the current mask prediction at feature resolution; B x N x T x h x w -> B x N x (T*h*w)."""
    B, N, T = mask_logits.shape[:3]
    resized = F.interpolate(mask_logits.detach().flatten(0, 1), size=size,
                            mode="bilinear", align_corners=False)
    return (resized >= 0).reshape(B, N, -1)


class DecoderLayer(nn.Module):
    """Masked cross-attention, then self-attention, then FFN; pre-norm residual blocks."""

    def __init__(self, C: int, num_heads: int):
        super().__init__()
        self.cross = CrossAttentionBlock(C, num_heads)
        self.self_attn = SelfAttentionBlock(C, num_heads)
        self.ffn = FFNBlock(C, 4 * C)

    def forward(self, X, memory, pos=None, allowed=None):
        """X: M x N x C;  memory, pos: M x S x C;  allowed: M x N x S."""
        out = self.ffn(self.self_attn(self.cross(X, memory, pos, allowed)))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in decoder layer")
        return out


class SyncExchange(nn.Module):
    def __init__(self, C: int, num_heads: int):
        super().__init__()
        self.ca_f = CrossAttentionBlock(C, num_heads)
        self.ca_v = CrossAttentionBlock(C, num_heads)
        self.ffn_vf = MLP(C, 2 * C)
        self.ffn_fv = MLP(C, 2 * C)

    def frame_update(self, X_f, X_v, video_scores, N_k, lam):
        T = X_f.shape[0]
        sel_v, _ = select_top_k(X_v.unsqueeze(0), video_scores.unsqueeze(0), N_k)
        kv = self.ffn_vf(sel_v).expand(T, -1, -1)
        return lam * self.ca_f(X_f, kv) + (1 - lam) * X_f

    def video_update(self, X_f, X_v, frame_scores, N_k, lam):
        sel_f, _ = select_top_k(X_f, frame_scores, N_k)
        kv = self.ffn_fv(sel_f).reshape(1, -1, X_f.shape[-1])   # 1 x T*N_k x C
        return (lam * self.ca_v(X_v.unsqueeze(0), kv) + (1 - lam) * X_v.unsqueeze(0)).squeeze(0)

    def forward(self, state: EmbeddingState, frame_scores, video_scores, N_k: int, lam: float,
                sync_mode: str = "both", video_first: bool = False) -> EmbeddingState:
        X_f, X_v = state.X_f, state.X_v
        new_f, new_v = X_f, X_v
        do_f = sync_mode in ("both", "video_to_frame")
        do_v = sync_mode in ("both", "frame_to_video")
        # both directions read the pre-exchange X_f / X_v, so order is irrelevant
        if video_first:
            if do_v:
                new_v = self.video_update(X_f, X_v, frame_scores, N_k, lam)
            if do_f:
                new_f = self.frame_update(X_f, X_v, video_scores, N_k, lam)
        else:
            if do_f:
                new_f = self.frame_update(X_f, X_v, video_scores, N_k, lam)
            if do_v:
                new_v = self.video_update(X_f, X_v, frame_scores, N_k, lam)
        out = EmbeddingState(new_f, new_v, state.layer)
        out.check_finite()
        return out


class SyncDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        C, N, L, h = config.C, config.N, config.L, config.num_heads
        self.frame_query = nn.Parameter(torch.randn(N, C) * 0.5)
        self.video_query = nn.Parameter(torch.randn(N, C) * 0.5)
        self.level_embed = nn.Parameter(torch.randn(3, C) * 0.1)
        self.layers_f = nn.ModuleList(DecoderLayer(C, h) for _ in range(L))
        self.layers_v = nn.ModuleList(DecoderLayer(C, h) for _ in range(L))
        self.sync = nn.ModuleList(SyncExchange(C, h) for _ in range(L))

    @property
    def uses_frames(self) -> bool:
        return self.config.variant == "syncvis"

    @property
    def sync_active(self) -> bool:
        return self.uses_frames and self.config.sync_mode != "none" and self.config.lam != 0.0

    def init_state(self, T: int) -> EmbeddingState:
        return init_state(self.config, self.frame_query if self.uses_frames else None,
                          self.video_query, T)

    def memory(self, features: PyramidFeatures, layer: int):
        """Key/value tokens for ``layer``: levels cycle coarse to fine."""
        level_index = 2 - layer % 3
        feat = features.levels[level_index]
        T, C, h, w = feat.shape
        mem = feat.flatten(2).transpose(1, 2) + self.level_embed[level_index]
        pos = sine_position(T, h, w, C, dtype=feat.dtype)
        return mem, pos, (h, w)

    def predict(self, state: EmbeddingState, pixel_embed: torch.Tensor, heads: Heads) -> PredictionSet:
        frame_class = frame_mask = None
        if state.X_f is not None:
            frame_class = heads.classify(state.X_f, "frame")
            frame_mask = heads.predict_masks(state.X_f, pixel_embed, "frame")
        return PredictionSet(
            frame_class=frame_class,
            frame_mask=frame_mask,
            video_class=heads.classify(state.X_v, "video"),
            video_mask=heads.predict_masks(state.X_v, pixel_embed, "video"),
            layer=state.layer,
        )

    def layer_update(self, state: EmbeddingState, preds: PredictionSet,
                     features: PyramidFeatures, layer: int) -> EmbeddingState:
        mem, pos, hw = self.memory(features, layer)
        T = mem.shape[0]
        X_f = None
        if state.X_f is not None:
            allowed_f = attention_mask(preds.frame_mask.unsqueeze(2), hw)       # T x N x S
            X_f = self.layers_f[layer](state.X_f, mem, pos, allowed_f)
        allowed_v = attention_mask(preds.video_mask.unsqueeze(0), hw)           # 1 x N x T*S
        X_v = self.layers_v[layer](state.X_v.unsqueeze(0), mem.reshape(1, -1, mem.shape[-1]),
                                   pos.reshape(1, -1, pos.shape[-1]), allowed_v).squeeze(0)
        return EmbeddingState(X_f, X_v, layer + 1)

    def forward(self, features: PyramidFeatures, heads: Heads):
        """Run all layers; returns per-layer states and predictions (index 0 = initial queries)."""
        cfg = self.config
        state = self.init_state(features.num_frames)
        states = [state]
        preds = [self.predict(state, features.pixel_embed, heads)]
        for layer in range(cfg.L):
            state = self.layer_update(state, preds[-1], features, layer)
            if self.sync_active:
                frame_scores = heads.class_scores(heads.classify(state.X_f, "frame")).detach()
                video_scores = heads.class_scores(heads.classify(state.X_v, "video")).detach()
                state = self.sync[layer](state, frame_scores, video_scores, cfg.N_k, cfg.lam,
                                         cfg.sync_mode)
            state.check_finite()
            states.append(state)
            preds.append(self.predict(state, features.pixel_embed, heads))
        return states, preds


def sync_exchange(state: EmbeddingState, frame_scores: torch.Tensor, video_scores: torch.Tensor,
                  config: ModelConfig, exchange: SyncExchange) -> EmbeddingState:
    """One bidirectional exchange with the momentum, N_k and direction of ``config``."""
    return exchange(state, frame_scores, video_scores, config.N_k, config.lam, config.sync_mode)


def run_decoder(features: PyramidFeatures, decoder: SyncDecoder, heads: Heads) -> list[EmbeddingState]:
    """States after every layer, preceded by the initial state (L + 1 entries)."""
    states, _ = decoder(features, heads)
    return states
