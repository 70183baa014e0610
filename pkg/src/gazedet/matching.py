"""Set matching between ground truth and predictions.

The four-part pairwise cost (box, is-head, watch-in/out, gaze heatmap),
an exact Hungarian assignment with a deterministic tie-break, and the
training loss built on the induced matching.  Unannotated prediction
slots are handled implicitly: they simply receive the down-weighted
"no-head" classification loss instead of being padded with explicit
empty ground truths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .core import (
    DEFAULT_HEATMAP_SIGMA,
    GazeHeatmap,
    GazeInstance,
    HeadBox,
    box_giou,
    instance_heatmap,
)
from .model import HAS_HEAD, NO_HEAD, WATCH_INSIDE, WATCH_OUTSIDE, PredictionSet


@dataclass(frozen=True)
class CostWeights:
    """Mixing weights for the matching cost and training loss.

    alpha1/alpha2 blend the L1 and GIoU parts of the box term;
    beta1..beta4 weight the box, is-head, watch-in/out, and heatmap terms;
    noobj_weight scales the is-head loss on unmatched prediction slots.
    """

    alpha1: float = 1.0
    alpha2: float = 2.5
    beta1: float = 2.0
    beta2: float = 1.0
    beta3: float = 1.0
    beta4: float = 2.0
    noobj_weight: float = 0.1

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2", "beta3", "beta4", "noobj_weight"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class MatchAssignment:
    """Injective ground-truth -> prediction-slot map plus leftover slots.

    `pairs` lists (gt_index, slot) in ground-truth order;
    `unmatched_predictions` lists the remaining slots in ascending order.
    """

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]
    total_cost: float


def _neg_true_class_prob(gt_one_hot, pred_probs) -> float:
    gt = np.asarray(gt_one_hot, dtype=np.float64)
    probs = np.asarray(pred_probs, dtype=np.float64)
    if gt.shape != (2,) or probs.shape != (2,):
        raise ValueError(f"expected two-class vectors, got shapes {gt.shape} and {probs.shape}")
    if not (set(np.unique(gt)) <= {0.0, 1.0}) or gt.sum() != 1.0:
        raise ValueError(f"ground truth must be one-hot, got {gt}")
    if abs(probs.sum() - 1.0) > 1e-4 or probs.min() < -1e-9:
        raise ValueError(f"predicted probabilities must sum to 1, got {probs}")
    return -float(probs[int(np.argmax(gt))])


def cost_box(gt: HeadBox, pred: HeadBox, weights: CostWeights = CostWeights()) -> float:
    """Box matching cost: alpha1 * corner L1 distance - alpha2 * GIoU."""
    l1 = sum(abs(a - b) for a, b in zip(gt.as_tuple(), pred.as_tuple()))
    return weights.alpha1 * l1 - weights.alpha2 * box_giou(gt, pred)


def cost_is_head(gt_class, pred_probs) -> float:
    """Negative predicted probability of the true is-head class."""
    return _neg_true_class_prob(gt_class, pred_probs)


def cost_watch(gt_watch, pred_probs) -> float:
    """Negative predicted probability of the true watch-in/out class."""
    return _neg_true_class_prob(gt_watch, pred_probs)


def cost_gaze(gt_heatmap, pred_heatmap) -> float:
    """L2 (Frobenius) distance between two equally-shaped heatmaps."""
    a = gt_heatmap.values if isinstance(gt_heatmap, GazeHeatmap) else np.asarray(gt_heatmap, float)
    b = pred_heatmap.values if isinstance(pred_heatmap, GazeHeatmap) else np.asarray(pred_heatmap, float)
    if a.shape != b.shape:
        raise ValueError(f"heatmap shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def _boxes_array(boxes: list[HeadBox]) -> np.ndarray:
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(len(boxes), 4)


def _giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between (M, 4) and (N, 4) corner boxes -> (M, N)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_c = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return inter / union - (enclose - union) / enclose


def pairwise_cost_matrix(
    gts: list[GazeInstance],
    preds: PredictionSet,
    weights: CostWeights = CostWeights(),
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> np.ndarray:
    """(len(gts), num_queries) matching-cost matrix.

    Classification terms use raw predicted probabilities (the assignment
    convention), not cross-entropy; the box term mixes corner L1 with
    GIoU; the gaze term is the L2 distance to the ground-truth heatmap
    rendered at the prediction resolution.
    """
    n = preds.num_queries
    if len(gts) == 0:
        return np.zeros((0, n), dtype=np.float64)
    h, w = preds.heatmaps.shape[-2:]
    with torch.no_grad():
        pred_boxes = preds.boxes.detach().cpu().double().numpy()
        head_probs = preds.is_head_probs.detach().cpu().double().numpy()
        watch_probs = preds.watch_probs.detach().cpu().double().numpy()
        pred_heat = preds.heatmaps.detach().cpu().double().numpy().reshape(n, h * w)

    gt_boxes = _boxes_array([g.head for g in gts])
    l1 = np.abs(gt_boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    box_cost = weights.alpha1 * l1 - weights.alpha2 * _giou_matrix(gt_boxes, pred_boxes)

    is_head_cost = -np.repeat(head_probs[None, :, HAS_HEAD], len(gts), axis=0)
    watch_idx = [WATCH_INSIDE if g.gaze.inside else WATCH_OUTSIDE for g in gts]
    watch_cost = -watch_probs[:, watch_idx].T

    gt_heat = np.stack(
        [instance_heatmap(g, h, w, sigma).values.ravel() for g in gts]
    )
    gaze_cost = cdist(gt_heat, pred_heat)

    return (
        weights.beta1 * box_cost
        + weights.beta2 * is_head_cost
        + weights.beta3 * watch_cost
        + weights.beta4 * gaze_cost
    )


def hungarian_assign(cost) -> MatchAssignment:
    """Exact minimum-cost injective assignment of rows to columns.

    Requires at least as many columns (prediction slots) as rows (ground
    truths).  Among all minimum-cost assignments the lexicographically
    smallest column sequence (slot of row 0, slot of row 1, ...) is
    returned, which makes the result deterministic under cost ties.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {c.shape}")
    m, n = c.shape
    if m > n:
        raise ValueError(f"more ground truths ({m}) than prediction slots ({n})")
    if m == 0:
        return MatchAssignment([], list(range(n)), 0.0)
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")

    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    chosen: list[int] = []
    available = list(range(n))
    prefix = 0.0
    for i in range(m):
        rest_rows = np.arange(i + 1, m)
        for j in available:
            tail = 0.0
            if rest_rows.size:
                sub_cols = [x for x in available if x != j]
                sub = c[np.ix_(rest_rows, sub_cols)]
                rr, cc = linear_sum_assignment(sub)
                tail = float(sub[rr, cc].sum())
            if prefix + c[i, j] + tail <= best + tol:
                prefix += float(c[i, j])
                chosen.append(j)
                available.remove(j)
                break
        else:  # pragma: no cover - the optimum guarantees a feasible column
            raise RuntimeError("no column completes an optimal assignment")

    total = float(c[np.arange(m), chosen].sum())
    return MatchAssignment(list(enumerate(chosen)), available, total)


def match_instances(
    gts: list[GazeInstance],
    preds: PredictionSet,
    weights: CostWeights = CostWeights(),
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> MatchAssignment:
    """Hungarian assignment for one image (cost matrix + solver)."""
    return hungarian_assign(pairwise_cost_matrix(gts, preds, weights, sigma))


def _giou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU between matched (K, 4) corner-box tensors."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp_min(0.0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    lt_c = torch.minimum(a[:, :2], b[:, :2])
    rb_c = torch.maximum(a[:, 2:], b[:, 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[:, 0] * wh_c[:, 1]
    return inter / union - (enclose - union) / enclose


def total_loss(
    gts_batch: list[list[GazeInstance]],
    per_layer_preds: list[list[PredictionSet]],
    weights: CostWeights = CostWeights(),
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Set-matched training loss over a batch.

    `gts_batch[b]` holds image b's ground-truth instances and
    `per_layer_preds[k][b]` the corresponding predictions of decoder layer
    k; every layer is matched independently and contributes with weight 1.
    Matched pairs incur the box term (L1 + (1 - GIoU)), cross-entropy on
    both classifications, and the heatmap L2 term; unmatched slots incur
    the down-weighted "no-head" cross-entropy.  Everything is normalized
    by the total ground-truth count (at least 1).

    Returns (total, components); the per-term components carry their beta
    weights and sum to the total.
    """
    assignments = [
        [match_instances(gts, preds, weights, sigma) for gts, preds in zip(gts_batch, layer)]
        for layer in per_layer_preds
    ]
    return loss_given_assignments(gts_batch, per_layer_preds, assignments, weights, sigma)


def loss_given_assignments(
    gts_batch: list[list[GazeInstance]],
    per_layer_preds: list[list[PredictionSet]],
    assignments: list[list[MatchAssignment]],
    weights: CostWeights = CostWeights(),
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Training loss under externally fixed assignments.

    Split out from :func:`total_loss` so callers can re-evaluate the loss
    with the matching frozen (finite-difference checks, ablations).
    """
    if not per_layer_preds or not per_layer_preds[0]:
        raise ValueError("need at least one decoder layer and one image")
    ref = per_layer_preds[0][0].boxes
    dtype, device = ref.dtype, ref.device
    zero = torch.zeros((), dtype=dtype, device=device)
    box_sum, is_head_sum, watch_sum, heat_sum = zero, zero, zero, zero

    total_gt = sum(len(g) for g in gts_batch)
    denom = float(max(total_gt, 1))

    for layer, layer_assignments in zip(per_layer_preds, assignments):
        for gts, preds, assignment in zip(gts_batch, layer, layer_assignments):
            h, w = preds.heatmaps.shape[-2:]
            if assignment.pairs:
                gt_idx = [i for i, _ in assignment.pairs]
                slots = torch.as_tensor([s for _, s in assignment.pairs], device=device)
                gt_boxes = torch.as_tensor(
                    _boxes_array([gts[i].head for i in gt_idx]), dtype=dtype, device=device
                )
                pred_boxes = preds.boxes[slots]
                l1 = (pred_boxes - gt_boxes).abs().sum()
                giou = _giou_pairs(gt_boxes, pred_boxes)
                box_sum = box_sum + weights.alpha1 * l1 + weights.alpha2 * (1.0 - giou).sum()

                head_targets = torch.full((len(gt_idx),), HAS_HEAD, device=device)
                is_head_sum = is_head_sum + F.cross_entropy(
                    preds.is_head_logits[slots], head_targets, reduction="sum"
                )

                watch_targets = torch.as_tensor(
                    [WATCH_INSIDE if gts[i].gaze.inside else WATCH_OUTSIDE for i in gt_idx],
                    device=device,
                )
                watch_sum = watch_sum + F.cross_entropy(
                    preds.watch_logits[slots], watch_targets, reduction="sum"
                )

                gt_heat = torch.as_tensor(
                    np.stack([instance_heatmap(gts[i], h, w, sigma).values for i in gt_idx]),
                    dtype=dtype, device=device,
                )
                diff = (preds.heatmaps[slots] - gt_heat).reshape(len(gt_idx), -1)
                # clamp keeps the gradient finite when a heatmap is matched exactly
                heat_sum = heat_sum + diff.pow(2).sum(dim=-1).clamp_min(1e-20).sqrt().sum()

            if assignment.unmatched_predictions:
                free = torch.as_tensor(assignment.unmatched_predictions, device=device)
                noobj_targets = torch.full((len(free),), NO_HEAD, device=device)
                is_head_sum = is_head_sum + weights.noobj_weight * F.cross_entropy(
                    preds.is_head_logits[free], noobj_targets, reduction="sum"
                )

    components = {
        "box": weights.beta1 * box_sum / denom,
        "is_head": weights.beta2 * is_head_sum / denom,
        "watch": weights.beta3 * watch_sum / denom,
        "heatmap": weights.beta4 * heat_sum / denom,
    }
    total = components["box"] + components["is_head"] + components["watch"] + components["heatmap"]
    return total, components
