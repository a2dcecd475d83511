"""Set-prediction objective: bipartite matching, mask/class losses and the sub-clip video loss.

Frame-level predictions are matched to the instances visible in each frame. The
video-level loss is split into contiguous sub-clips of ``T_s`` frames; every
sub-clip runs its own bipartite matching and the clip losses are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .config import ModelConfig
from .data import VideoSample
from .heads import PredictionSet

DICE_EPS = 1e-6


# ── assignment ────────────────────────────────────────────────────────────

@dataclass
class MatchAssignment:
    pairs: dict[int, int]   # gt index -> query index
    total_cost: float

    @property
    def gt_indices(self) -> list[int]:
        return sorted(self.pairs)

    @property
    def query_indices(self) -> list[int]:
        return [self.pairs[g] for g in self.gt_indices]


def _shortest_augmenting_path(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row to a distinct column (rows <= columns).

    Hungarian method with row/column potentials, one Dijkstra-like augmentation
    per row. O(n^2 m).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)   # owner[j]: 1-based row holding column j, 0 if free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            cols = np.flatnonzero(used)
            u[owner[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    rows_to_cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            rows_to_cols[owner[j] - 1] = j - 1
    return rows_to_cols


def _assignment_cost(cost: np.ndarray, cols: Sequence[int]) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += float(cost[i, j])
    return total


def hungarian_match(cost_matrix) -> MatchAssignment:
    """Exact minimum-cost injective map from rows (ground truth) to columns (queries).

    Among optimal assignments the lexicographically smallest column vector wins.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    G, N = cost.shape
    if G > N:
        raise ValueError(f"{G} ground-truth instances but only {N} queries")
    if G == 0:
        return MatchAssignment({}, 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    sol = _shortest_augmenting_path(cost)
    best = _assignment_cost(cost, sol)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max())) * G

    # lexicographic tie-break: fix rows in order to the smallest column that keeps optimality
    prefix = 0.0
    taken: list[int] = []
    for i in range(G):
        for j in range(int(sol[i])):
            if j in taken:
                continue
            rest_cols = [c for c in range(N) if c not in taken and c != j]
            rest = cost[i + 1:][:, rest_cols]
            bound = prefix + cost[i, j] + (rest.min(axis=1).sum() if rest.size else 0.0)
            if bound > best + tol:
                continue
            sub = _shortest_augmenting_path(rest) if i + 1 < G else np.empty(0, dtype=np.int64)
            value = prefix + cost[i, j] + sum(rest[r, c] for r, c in enumerate(sub))
            if value <= best + tol:
                sol = np.array(taken + [j] + [rest_cols[c] for c in sub], dtype=np.int64)
                break
        taken.append(int(sol[i]))
        prefix += cost[i, sol[i]]

    cols = [int(c) for c in sol]
    return MatchAssignment({i: c for i, c in enumerate(cols)}, _assignment_cost(cost, cols))


# ── per-term losses ───────────────────────────────────────────────────────

def dice_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over instances of 1 - 2<p, g> / (|p| + |g| + eps); inputs G x P."""
    if pred_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    p = pred_logits.sigmoid().flatten(1)
    g = gt.to(p.dtype).flatten(1)
    return (1 - 2 * (p * g).sum(-1) / (p.sum(-1) + g.sum(-1) + DICE_EPS)).mean()


def bce_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean binary cross-entropy, averaged over instances; inputs G x P."""
    if pred_logits.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    per_pixel = F.binary_cross_entropy_with_logits(pred_logits, gt.to(pred_logits.dtype), reduction="none")
    return per_pixel.flatten(1).mean(-1).mean()


def ce_loss(class_logits: torch.Tensor, gt_class: torch.Tensor,
            no_object_weight: float = 0.1) -> torch.Tensor:
    """Cross-entropy over N queries; class K (last) is no-object and is down-weighted."""
    num_classes = class_logits.shape[-1]
    if gt_class.numel() and (gt_class.min() < 0 or gt_class.max() >= num_classes):
        raise ValueError(f"class targets must lie in [0, {num_classes - 1}]")
    weight = class_logits.new_ones(num_classes)
    weight[-1] = no_object_weight
    return F.cross_entropy(class_logits, gt_class, weight=weight)


def cost_matrix(class_logits: torch.Tensor, mask_logits: torch.Tensor, gt_classes: torch.Tensor,
                gt_masks: torch.Tensor, w_ce: float, w_bce: float, w_dice: float) -> np.ndarray:
    """G x N matching costs.

    class_logits: N x (K+1); mask_logits: N x P; gt_classes: G (0-based); gt_masks: G x P.
    """
    with torch.no_grad():
        x = mask_logits.flatten(1).double()
        y = gt_masks.flatten(1).double()
        P = x.shape[1]
        if P == 0:
            raise ValueError("empty frame range")
        prob = class_logits.double().softmax(-1)[:, gt_classes].T            # G x N
        bce = (F.softplus(x).sum(-1)[None, :] - y @ x.T) / P                 # G x N
        s = x.sigmoid()
        dice = 1 - 2 * (y @ s.T) / (s.sum(-1)[None, :] + y.sum(-1)[:, None] + DICE_EPS)
        return (w_ce * -prob + w_bce * bce + w_dice * dice).numpy()


def pair_cost(class_logits: torch.Tensor, mask_logits: torch.Tensor, gt_class: int,
              gt_mask: torch.Tensor, w_ce: float, w_bce: float, w_dice: float) -> float:
    """Cost of one query (class logits K+1, mask logits over the range) against one instance."""
    return float(cost_matrix(class_logits[None], mask_logits[None], torch.tensor([gt_class]),
                             gt_mask[None], w_ce, w_bce, w_dice)[0, 0])


# ── sub-clips ─────────────────────────────────────────────────────────────

def subclip_partition(T: int, T_s: int | None) -> list[list[int]]:
    """Contiguous windows of ``T_s`` frames; a short tail is shifted back to full length."""
    T_s = T if T_s is None else T_s
    if not 1 <= T_s <= T:
        raise ValueError(f"sub-clip size {T_s} must lie in [1, {T}]")
    windows = []
    for start in range(0, T, T_s):
        start = min(start, T - T_s)
        windows.append(list(range(start, start + T_s)))
    return windows


# ── targets ───────────────────────────────────────────────────────────────

@dataclass
class Targets:
    """Ground truth of one clip at full resolution."""
    classes: torch.Tensor    # G, 0-based class index
    masks: torch.Tensor      # G x T x H x W; bool, or float coverage once pooled
    presence: torch.Tensor   # G x T bool
    track_ids: list[int] = field(default_factory=list)

    @classmethod
    def from_sample(cls, sample: VideoSample) -> "Targets":
        T, (H, W) = sample.num_frames, sample.size
        G = len(sample.tracks)
        masks = np.zeros((G, T, H, W), dtype=bool)
        for g, tr in enumerate(sample.tracks):
            masks[g] = tr.mask_array((H, W))
        return cls(
            classes=torch.tensor([tr.category_id - 1 for tr in sample.tracks], dtype=torch.long),
            masks=torch.from_numpy(masks),
            presence=torch.from_numpy(masks.reshape(G, T, H * W).any(-1)),
            track_ids=[tr.track_id for tr in sample.tracks],
        )

    @property
    def num_instances(self) -> int:
        return int(self.classes.shape[0])

    def pooled(self, size: tuple[int, int]) -> "Targets":
        """Masks as area coverage on a ``size`` grid covering the zero-padded frame."""
        H, W = self.masks.shape[-2:]
        if (H, W) == tuple(size):
            return self
        fy, fx = -(-H // size[0]), -(-W // size[1])
        G, T = self.masks.shape[:2]
        m = self.masks.reshape(G * T, 1, H, W).float()
        m = F.pad(m, (0, size[1] * fx - W, 0, size[0] * fy - H))
        m = F.avg_pool2d(m, (fy, fx)).reshape(G, T, *size)
        return Targets(self.classes, m, self.presence, self.track_ids)

    def permute(self, order: Sequence[int]) -> "Targets":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return Targets(self.classes[idx], self.masks[idx], self.presence[idx],
                       [self.track_ids[i] for i in order])


@dataclass
class LevelLoss:
    ce: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor
    assignment: MatchAssignment
    gt_indices: list[int]      # which instances took part

    def weighted(self, cfg: ModelConfig) -> torch.Tensor:
        return cfg.w_ce * self.ce + cfg.w_bce * self.bce + cfg.w_dice * self.dice


def matched_loss(class_logits: torch.Tensor, mask_logits: torch.Tensor, gt_classes: torch.Tensor,
                 gt_masks: torch.Tensor, cfg: ModelConfig, gt_indices: list[int]) -> LevelLoss:
    """Match then score one set of N predictions against G instances over a frame range.

    mask_logits: N x P; gt_masks: G x P (all-zero frames where an instance is absent).
    """
    N = class_logits.shape[0]
    K = class_logits.shape[-1] - 1
    target = torch.full((N,), K, dtype=torch.long)
    zero = mask_logits.sum() * 0
    if len(gt_indices) == 0:
        assignment = MatchAssignment({}, 0.0)
        return LevelLoss(ce_loss(class_logits, target, cfg.no_object_weight), zero, zero,
                         assignment, [])
    costs = cost_matrix(class_logits, mask_logits, gt_classes, gt_masks, cfg.w_ce, cfg.w_bce, cfg.w_dice)
    assignment = hungarian_match(costs)
    gts = assignment.gt_indices
    qs = torch.tensor(assignment.query_indices, dtype=torch.long)
    target[qs] = gt_classes[gts]
    pred = mask_logits[qs]
    gt = gt_masks[gts]
    return LevelLoss(ce_loss(class_logits, target, cfg.no_object_weight),
                     bce_loss(pred, gt), dice_loss(pred, gt), assignment, list(gt_indices))


def frame_loss(frame_class: torch.Tensor, frame_mask: torch.Tensor, targets: Targets,
               t: int, cfg: ModelConfig) -> LevelLoss:
    """Frame ``t`` matched against the instances visible in it. frame_mask: T x N x h x w."""
    visible = torch.nonzero(targets.presence[:, t]).flatten().tolist()
    return matched_loss(frame_class[t], frame_mask[t].flatten(1),
                        targets.classes[visible], targets.masks[visible, t].flatten(1), cfg, visible)


def video_clip_loss(video_class: torch.Tensor, video_mask: torch.Tensor, targets: Targets,
                    frames: Sequence[int], cfg: ModelConfig) -> LevelLoss:
    """Video-level loss on one sub-clip, with its own matching. video_mask: N x T x h x w."""
    frames = list(frames)
    present = torch.nonzero(targets.presence[:, frames].any(-1)).flatten().tolist()
    return matched_loss(video_class, video_mask[:, frames].flatten(1),
                        targets.classes[present], targets.masks[present][:, frames].flatten(1),
                        cfg, present)


def contrastive_loss(ref: torch.Tensor, key: torch.Tensor, positives: Sequence[tuple[int, int]],
                     temperature: float, mode: str = "online") -> torch.Tensor:
    """InfoNCE between reference-frame and key-frame embeddings of matched queries.

    ``positives`` pairs a reference row with the key row of the same track; every
    other key row is a negative. Embeddings are L2-normalized first.
    """
    if mode != "online" or len(positives) == 0:
        return (ref.sum() + key.sum()) * 0
    r = F.normalize(ref, dim=-1)
    k = F.normalize(key, dim=-1)
    logits = r @ k.T / temperature
    a = torch.tensor([p[0] for p in positives])
    b = torch.tensor([p[1] for p in positives])
    return F.cross_entropy(logits[a], b)


# ── total objective ───────────────────────────────────────────────────────

@dataclass
class LossBreakdown:
    ce_f: torch.Tensor
    ce_v: torch.Tensor
    bce_f: torch.Tensor
    bce_v: torch.Tensor
    dice_f: torch.Tensor
    dice_v: torch.Tensor
    contras: torch.Tensor
    per_clip: list[tuple[tuple[int, int], torch.Tensor]]   # ((first, last) frame, weighted loss)
    total: torch.Tensor
    frame_assignments: list[MatchAssignment] = field(default_factory=list)  # final layer, per frame

    TERMS = ("ce_f", "ce_v", "bce_f", "bce_v", "dice_f", "dice_v", "contras", "total")

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in self.TERMS}


def _contrastive_term(frame_embed: torch.Tensor, targets: Targets,
                      frame_losses: list[LevelLoss], cfg: ModelConfig) -> torch.Tensor:
    """Previous frame is the reference, current frame the key."""
    terms = []
    for t in range(1, len(frame_losses)):
        ref_l, key_l = frame_losses[t - 1], frame_losses[t]
        ref_gts = ref_l.gt_indices
        key_gts = key_l.gt_indices
        if not ref_gts or not key_gts:
            continue
        ref_q = [ref_l.assignment.pairs[i] for i in range(len(ref_gts))]
        key_q = [key_l.assignment.pairs[i] for i in range(len(key_gts))]
        positives = [(a, key_gts.index(g)) for a, g in enumerate(ref_gts) if g in key_gts]
        if positives:
            terms.append(contrastive_loss(frame_embed[t - 1, ref_q], frame_embed[t, key_q],
                                          positives, cfg.temperature, cfg.mode))
    if not terms:
        return frame_embed.sum() * 0
    return torch.stack(terms).mean()


def total_loss(predictions: Sequence[PredictionSet], targets: Targets, cfg: ModelConfig,
               frame_embed: torch.Tensor | None = None) -> LossBreakdown:
    """Deeply supervised objective summed over all decoder layers.

    Frame-level terms are summed over frames and video-level terms over sub-clips.
    Masks are scored at the prediction resolution against area-pooled targets.
    ``frame_embed`` (final-layer T x N x C) feeds the contrastive term in online mode.
    """
    targets = targets.pooled(tuple(predictions[0].video_mask.shape[-2:]))
    ref = predictions[0].video_class
    zero = ref.sum() * 0
    acc = {k: zero for k in ("ce_f", "ce_v", "bce_f", "bce_v", "dice_f", "dice_v")}
    T = predictions[0].video_mask.shape[1]
    windows = subclip_partition(T, cfg.T_s if cfg.T_s is None else min(cfg.T_s, T))
    per_clip = [zero for _ in windows]
    last_frame_losses: list[LevelLoss] = []

    for preds in predictions:
        if preds.frame_class is not None:
            frame_losses = [frame_loss(preds.frame_class, preds.frame_mask, targets, t, cfg)
                            for t in range(T)]
            for fl in frame_losses:
                acc["ce_f"] = acc["ce_f"] + fl.ce
                acc["bce_f"] = acc["bce_f"] + fl.bce
                acc["dice_f"] = acc["dice_f"] + fl.dice
            last_frame_losses = frame_losses
        for c, window in enumerate(windows):
            cl = video_clip_loss(preds.video_class, preds.video_mask, targets, window, cfg)
            acc["ce_v"] = acc["ce_v"] + cl.ce
            acc["bce_v"] = acc["bce_v"] + cl.bce
            acc["dice_v"] = acc["dice_v"] + cl.dice
            per_clip[c] = per_clip[c] + cl.weighted(cfg)

    contras = zero
    if cfg.mode == "online" and frame_embed is not None and last_frame_losses:
        contras = _contrastive_term(frame_embed, targets, last_frame_losses, cfg)

    total = (cfg.w_ce * (acc["ce_f"] + acc["ce_v"]) + cfg.w_bce * (acc["bce_f"] + acc["bce_v"])
             + cfg.w_dice * (acc["dice_f"] + acc["dice_v"]) + cfg.w_contras * contras)
    return LossBreakdown(
        **acc, contras=contras,
        per_clip=[((w[0], w[-1]), v) for w, v in zip(windows, per_clip)],
        total=total,
        frame_assignments=[fl.assignment for fl in last_frame_losses],
    )
