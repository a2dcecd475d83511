import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from syncvis.config import ModelConfig
from syncvis.data import InstanceSpec, ScenarioSpec, generate_video, random_scenario
from syncvis.heads import PredictionSet
from syncvis.matching import (
    DICE_EPS, Targets, bce_loss, ce_loss, contrastive_loss, cost_matrix, dice_loss, frame_loss,
    hungarian_match, matched_loss, pair_cost, subclip_partition, total_loss, video_clip_loss,
)

from conftest import central_difference_check

WEIGHTS = dict(w_ce=2.0, w_bce=5.0, w_dice=5.0)


def brute_force(cost):
    """Minimum total and the lexicographically smallest optimal column vector."""
    G, N = cost.shape
    best, best_cols = math.inf, None
    for cols in itertools.permutations(range(N), G):
        total = sum(cost[i, j] for i, j in enumerate(cols))
        if total < best - 1e-12:
            best, best_cols = total, cols
    return best, list(best_cols)


# ── per-term losses ───────────────────────────────────────────────────────

def test_dice_goldens():
    gt = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
    assert dice_loss(torch.tensor([[60.0, 60.0, -60.0, -60.0]], dtype=torch.float64), gt) < 1e-6
    assert dice_loss(torch.tensor([[-60.0, -60.0, 60.0, 60.0]], dtype=torch.float64), gt) > 1 - 1e-6
    pred = torch.full((1, 8), -60.0, dtype=torch.float64)
    pred[0, [0, 1, 2, 3]] = 60.0
    gt = torch.zeros(1, 8)
    gt[0, [2, 3, 4, 5]] = 1.0
    assert dice_loss(pred, gt).item() == pytest.approx(1 - 4 / (8 + DICE_EPS), rel=1e-12)
    assert dice_loss(pred, gt).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_loss(torch.zeros(2, 4), torch.zeros(2, 5))


def test_ce_goldens():
    assert ce_loss(torch.zeros(5, 4), torch.tensor([0, 1, 2, 3, 3])).item() == pytest.approx(math.log(4))
    saturated = torch.full((3, 4), -50.0)
    target = torch.tensor([2, 0, 3])
    saturated[torch.arange(3), target] = 50.0
    assert ce_loss(saturated, target).item() < 1e-12
    with pytest.raises(ValueError, match="class targets"):
        ce_loss(torch.zeros(2, 4), torch.tensor([0, 4]))


def test_no_object_weight():
    logits = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    per = -logits.log_softmax(-1)[torch.arange(2), torch.tensor([0, 1])]
    expected = (per[0] + 0.1 * per[1]) / 1.1
    assert ce_loss(logits, torch.tensor([0, 1]), 0.1).item() == pytest.approx(expected.item())


@given(st.integers(1, 4), st.integers(1, 20), st.integers(0, 1000))
def test_bce_of_zero_logits_is_ln2(G, P, seed):
    gt = (torch.rand(G, P, generator=torch.Generator().manual_seed(seed)) < 0.5).float()
    assert bce_loss(torch.zeros(G, P), gt).item() == pytest.approx(math.log(2), rel=1e-6)


# ── costs ─────────────────────────────────────────────────────────────────

def oracle_cost(class_logits, mask_logits, gt_class, gt_mask, w_ce, w_bce, w_dice):
    logits = class_logits.astype(np.float64)
    prob = np.exp(logits - logits.max())
    prob /= prob.sum()
    x, y = mask_logits.astype(np.float64), gt_mask.astype(np.float64)
    sig = 1 / (1 + np.exp(-x))
    bce = np.mean(-(y * np.log(sig) + (1 - y) * np.log(1 - sig)))
    dice = 1 - 2 * (sig * y).sum() / (sig.sum() + y.sum() + DICE_EPS)
    return -w_ce * prob[gt_class] + w_bce * bce + w_dice * dice


def test_cost_matrix_matches_term_by_term_oracle():
    rng = np.random.default_rng(0)
    cls = rng.normal(size=(3, 4))
    masks = rng.normal(size=(3, 2 * 6 * 6))
    gt_cls = np.array([2, 0])
    gt = rng.random((2, 2 * 6 * 6)) < 0.3
    got = cost_matrix(torch.tensor(cls), torch.tensor(masks), torch.tensor(gt_cls),
                      torch.tensor(gt), **WEIGHTS)
    for g in range(2):
        for n in range(3):
            assert got[g, n] == pytest.approx(oracle_cost(cls[n], masks[n], gt_cls[g], gt[g], **WEIGHTS),
                                              rel=1e-10)


def test_perfect_prediction_cost_is_minus_class_weight():
    gt = torch.tensor([1.0, 0.0, 0.0, 1.0])
    mask_logits = torch.where(gt > 0, 60.0, -60.0).double()
    cost = pair_cost(torch.tensor([-60.0, -60.0, 60.0, -60.0], dtype=torch.float64),
                     mask_logits, 2, gt, **WEIGHTS)
    assert cost == pytest.approx(-2.0, abs=1e-5)  # dice epsilon leaves 5e-6 / 4


def test_identical_queries_cost_the_same():
    q_cls, q_mask = torch.randn(4), torch.randn(10)
    cost = cost_matrix(torch.stack([q_cls, q_cls]), torch.stack([q_mask, q_mask]),
                       torch.tensor([0, 2, 1]), (torch.rand(3, 10) < 0.5), **WEIGHTS)
    assert np.array_equal(cost[:, 0], cost[:, 1])


def test_empty_frame_range_rejected():
    with pytest.raises(ValueError, match="empty frame range"):
        cost_matrix(torch.zeros(2, 4), torch.zeros(2, 0), torch.tensor([0]), torch.zeros(1, 0), **WEIGHTS)


# ── assignment ────────────────────────────────────────────────────────────

def test_hungarian_goldens():
    m = hungarian_match([[1, 2], [2, 1]])
    assert m.pairs == {0: 0, 1: 1} and m.total_cost == 2
    assert hungarian_match(np.zeros((3, 5))).pairs == {0: 0, 1: 1, 2: 2}
    assert hungarian_match(np.zeros((0, 4))).pairs == {}


def test_hungarian_errors():
    with pytest.raises(ValueError, match="only 2 queries"):
        hungarian_match(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        hungarian_match([[0.0, np.inf]])


@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 10_000), st.booleans())
def test_hungarian_equals_brute_force(G, extra, seed, integer):
    rng = np.random.default_rng(seed)
    N = G + extra
    cost = rng.integers(0, 3, size=(G, N)).astype(float) if integer else rng.normal(size=(G, N))
    best, cols = brute_force(cost)
    m = hungarian_match(cost)
    assert m.total_cost == pytest.approx(best, abs=1e-12)
    assert len(set(m.pairs.values())) == G
    if integer:  # many ties: the lexicographic rule must pick the same vector
        assert m.query_indices == cols


def test_hungarian_agrees_with_scipy_on_large_matrices():
    from scipy.optimize import linear_sum_assignment
    rng = np.random.default_rng(1)
    for G, N in [(15, 20), (20, 20), (8, 40)]:
        cost = rng.normal(size=(G, N))
        r, c = linear_sum_assignment(cost)
        assert hungarian_match(cost).total_cost == pytest.approx(cost[r, c].sum(), abs=1e-9)


# ── sub-clips ─────────────────────────────────────────────────────────────

def test_subclip_examples():
    assert subclip_partition(6, 3) == [[0, 1, 2], [3, 4, 5]]
    assert subclip_partition(5, 3) == [[0, 1, 2], [2, 3, 4]]
    assert subclip_partition(4, 1) == [[0], [1], [2], [3]]
    assert subclip_partition(4, 4) == [[0, 1, 2, 3]]
    assert subclip_partition(4, None) == [[0, 1, 2, 3]]
    with pytest.raises(ValueError):
        subclip_partition(3, 4)


@given(st.integers(1, 30), st.data())
def test_subclip_properties(T, data):
    T_s = data.draw(st.integers(1, T))
    windows = subclip_partition(T, T_s)
    assert all(len(w) == T_s and w == list(range(w[0], w[0] + T_s)) for w in windows)
    assert sorted(set(itertools.chain(*windows))) == list(range(T))
    assert len(windows) == math.ceil(T / T_s)


# ── fixtures for objective tests ──────────────────────────────────────────

def make_predictions(T, N, K=3, h=16, seed=0, dtype=torch.float64, requires_grad=False, frames=True):
    g = torch.Generator().manual_seed(seed)
    t = lambda *s: torch.randn(*s, generator=g, dtype=dtype).requires_grad_(requires_grad)
    return PredictionSet(t(T, N, K + 1) if frames else None, t(T, N, h, h) if frames else None,
                         t(N, K + 1), t(N, T, h, h), layer=0)


def sample_targets(T=3, seed=4, max_instances=3):
    spec = random_scenario(seed, T=T, H=64, W=64, max_instances=max_instances, min_instances=2)
    return Targets.from_sample(generate_video(spec))


CFG = ModelConfig(N=4, C=8, L=0, N_k=2, num_heads=2, K=3, T=3, T_s=1, mode="online")


def test_pooled_targets_are_area_coverage():
    targets = sample_targets()
    pooled = targets.pooled((16, 16))
    assert pooled.masks.shape[-2:] == (16, 16)
    assert pooled.masks.min() >= 0 and pooled.masks.max() <= 1
    torch.testing.assert_close(pooled.masks.sum((-1, -2)) * 16,
                               targets.masks.float().sum((-1, -2)) / 16 * 16)


def test_clip_without_instances_is_pure_no_object():
    spec = ScenarioSpec(T=4, H=64, W=64, seed=0, instances=[InstanceSpec("disk", 8.0, (30.0, 30.0))],
                        absence_intervals={0: [(0, 1)]})
    targets = Targets.from_sample(generate_video(spec)).pooled((16, 16))
    preds = make_predictions(4, 4)
    first = video_clip_loss(preds.video_class, preds.video_mask, targets, [0, 1], CFG)
    assert first.bce.item() == 0 and first.dice.item() == 0 and first.assignment.pairs == {}
    assert first.ce.item() == pytest.approx(ce_loss(preds.video_class, torch.full((4,), 3)).item())
    second = video_clip_loss(preds.video_class, preds.video_mask, targets, [2, 3], CFG)
    assert second.assignment.gt_indices == [0] and second.bce.item() > 0


def test_single_clip_equals_undecomposed_video_loss():
    targets = sample_targets(T=4).pooled((16, 16))
    preds = make_predictions(4, 5, frames=False)
    cfg = CFG.replace(T=4, T_s=4, N=5)
    out = total_loss([preds], targets, cfg)
    assert len(out.per_clip) == 1 and out.per_clip[0][0] == (0, 3)
    whole = video_clip_loss(preds.video_class, preds.video_mask, targets, range(4), cfg)
    assert out.per_clip[0][1].item() == pytest.approx(whole.weighted(cfg).item(), rel=1e-6)
    # the undecomposed loss, recomputed from scratch with an exhaustive matching
    flat = preds.video_mask.flatten(1)
    gt = targets.masks.flatten(1)
    cost = np.array([[oracle_cost(preds.video_class[n].detach().numpy(), flat[n].detach().numpy(),
                                  int(targets.classes[g]), gt[g].numpy(), 2.0, 5.0, 5.0)
                      for n in range(5)] for g in range(targets.num_instances)])
    _, cols = brute_force(cost)
    tgt = torch.full((5,), 3)
    tgt[cols] = targets.classes
    manual = (2 * ce_loss(preds.video_class, tgt) + 5 * bce_loss(flat[cols], gt)
              + 5 * dice_loss(flat[cols], gt))
    assert out.per_clip[0][1].item() == pytest.approx(manual.item(), rel=1e-6)


def test_unit_clips_equal_per_frame_matching():
    targets = sample_targets(T=4).pooled((16, 16))
    preds = make_predictions(4, 4, frames=False)
    cfg = CFG.replace(T=4, T_s=1)
    out = total_loss([preds], targets, cfg)
    assert [r for r, _ in out.per_clip] == [(t, t) for t in range(4)]
    as_frames_class = preds.video_class.expand(4, -1, -1)
    as_frames_mask = preds.video_mask.transpose(0, 1)
    for t, (_, value) in enumerate(out.per_clip):
        single = frame_loss(as_frames_class, as_frames_mask, targets, t, cfg)
        assert value.item() == pytest.approx(single.weighted(cfg).item(), rel=1e-12)


def test_clips_are_matched_independently():
    targets = sample_targets(T=6, seed=11).pooled((16, 16))
    preds = make_predictions(6, 6, frames=False, seed=2)
    cfg = CFG.replace(T=6, T_s=3, N=6)
    out = total_loss([preds], targets, cfg)
    for (first, last), value in out.per_clip:
        frames = list(range(first, last + 1))
        present = [g for g in range(targets.num_instances) if targets.presence[g, frames].any()]
        flat = preds.video_mask[:, frames].flatten(1)
        gt = targets.masks[present][:, frames].flatten(1)
        cost = np.array([[oracle_cost(preds.video_class[n].numpy(), flat[n].numpy(),
                                      int(targets.classes[g]), gt[i].numpy(), 2.0, 5.0, 5.0)
                          for n in range(6)] for i, g in enumerate(present)])
        _, cols = brute_force(cost)
        clip = video_clip_loss(preds.video_class, preds.video_mask, targets, frames, cfg)
        assert clip.assignment.query_indices == cols
        assert value.item() == pytest.approx(clip.weighted(cfg).item(), rel=1e-12)


def test_breakdown_total_is_weighted_sum():
    targets = sample_targets()
    preds = [make_predictions(3, 4, seed=s) for s in range(2)]
    embed = torch.randn(3, 4, 8, dtype=torch.float64)
    out = total_loss(preds, targets, CFG, frame_embed=embed)
    v = out.as_floats()
    expected = (2 * (v["ce_f"] + v["ce_v"]) + 5 * (v["bce_f"] + v["bce_v"])
                + 5 * (v["dice_f"] + v["dice_v"]) + v["contras"])
    assert v["total"] == pytest.approx(expected, rel=1e-12)
    assert all(v[k] >= 0 for k in v)
    video_part = 2 * v["ce_v"] + 5 * v["bce_v"] + 5 * v["dice_v"]
    assert sum(float(x) for _, x in out.per_clip) == pytest.approx(video_part, rel=1e-12)


@given(st.permutations(range(3)), st.integers(0, 50))
def test_total_loss_invariant_to_gt_order(perm, seed):
    targets = sample_targets(seed=seed)
    perm = list(perm)[: targets.num_instances] if targets.num_instances == 3 else list(range(targets.num_instances))[::-1]
    preds = [make_predictions(3, 4, seed=seed + s) for s in range(2)]
    embed = torch.randn(3, 4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    a = total_loss(preds, targets, CFG, frame_embed=embed).total.item()
    b = total_loss(preds, targets.permute(perm), CFG, frame_embed=embed).total.item()
    assert b == pytest.approx(a, rel=1e-6)


def test_no_instances_leaves_only_no_object_terms():
    spec = ScenarioSpec(T=3, H=64, W=64, seed=0)
    targets = Targets.from_sample(generate_video(spec))
    preds = [make_predictions(3, 4, seed=s) for s in range(2)]
    out = total_loss(preds, targets, CFG, frame_embed=torch.randn(3, 4, 8, dtype=torch.float64))
    v = out.as_floats()
    assert v["bce_f"] == v["bce_v"] == v["dice_f"] == v["dice_v"] == v["contras"] == 0
    assert v["total"] == pytest.approx(2 * (v["ce_f"] + v["ce_v"]))
    no_obj = torch.full((4,), 3)
    expected = sum(ce_loss(p.frame_class[t], no_obj).item() for p in preds for t in range(3))
    assert v["ce_f"] == pytest.approx(expected)


def test_mask_weights_zero_cuts_mask_gradient():
    targets = sample_targets()
    preds = make_predictions(3, 4, requires_grad=True)
    total_loss([preds], targets, CFG.replace(w_bce=0.0, w_dice=0.0)).total.backward()
    assert preds.frame_mask.grad.abs().max() == 0 and preds.video_mask.grad.abs().max() == 0
    assert preds.video_class.grad.abs().max() > 0


# ── contrastive ───────────────────────────────────────────────────────────

def test_contrastive_goldens():
    e = torch.eye(2, dtype=torch.float64)
    assert contrastive_loss(e, e, [(0, 0), (1, 1)], 1.0, mode="offline").item() == 0
    one = torch.tensor([[0.3, 0.4]], dtype=torch.float64)
    assert contrastive_loss(one, one, [(0, 0)], 1.0).item() == pytest.approx(0.0, abs=1e-15)
    assert contrastive_loss(e, e, [], 1.0).item() == 0
    assert contrastive_loss(e, e, [(0, 0), (1, 1)], 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)))
    assert contrastive_loss(e, e.flip(0), [(0, 1), (1, 0)], 0.5).item() == pytest.approx(
        math.log(1 + math.exp(-2)))


def test_contrastive_term_follows_track_identity():
    spec = ScenarioSpec(T=2, H=64, W=64, seed=0,
                        instances=[InstanceSpec("disk", 8.0, (20.0, 20.0)), InstanceSpec("rectangle", 8.0, (44.0, 44.0))])
    targets = Targets.from_sample(generate_video(spec))
    preds = make_predictions(2, 4, seed=3)
    embed = torch.randn(2, 4, 8, dtype=torch.float64)
    out = total_loss([preds], targets, CFG.replace(T=2), frame_embed=embed)
    ref_a, key_a = out.frame_assignments
    ref_q = [ref_a.pairs[g] for g in range(2)]
    key_q = [key_a.pairs[g] for g in range(2)]
    expected = contrastive_loss(embed[0, ref_q], embed[1, key_q], [(0, 0), (1, 1)], CFG.temperature)
    assert out.contras.item() == pytest.approx(expected.item())
    offline = total_loss([preds], targets, CFG.replace(T=2, mode="offline"), frame_embed=embed)
    assert offline.contras.item() == 0


def test_total_loss_finite_differences():
    targets = sample_targets()
    preds = [make_predictions(3, 4, seed=s, requires_grad=True) for s in range(2)]
    embed = torch.randn(3, 4, 8, dtype=torch.float64, requires_grad=True)
    params = [embed] + [x for p in preds for x in (p.frame_class, p.frame_mask, p.video_class, p.video_mask)]
    err = central_difference_check(lambda: total_loss(preds, targets, CFG, frame_embed=embed).total,
                                   params, probes=80)
    assert err <= 1e-4
