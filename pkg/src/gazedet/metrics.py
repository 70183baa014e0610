"""Evaluation metrics.

Heatmap ROC-AUC, gaze-distance statistics, angular error, watch-outside
average precision, and the joint head+gaze detection mAP, plus the split
evaluation driver that ties them together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import (
    DEFAULT_HEATMAP_SIGMA,
    GazeHeatmap,
    GazeInstance,
    HeadBox,
    box_iou,
    heatmap_argmax,
)
from .model import WATCH_OUTSIDE, HAS_HEAD, PredictionSet, _safe_box


def _heatmap_values(heatmap) -> np.ndarray:
    if isinstance(heatmap, GazeHeatmap):
        return heatmap.values
    if hasattr(heatmap, "detach"):  # torch tensor
        return heatmap.detach().cpu().numpy()
    return np.asarray(heatmap, dtype=np.float64)


def auc(pred_heatmap, gt_points) -> float:
    """Rank-sum ROC-AUC of heatmap cell scores.

    Positive cells are the ones containing annotated gaze points,
    every other cell is negative; ties in the scores contribute half
    (Mann-Whitney convention).
    """
    values = _heatmap_values(pred_heatmap)
    if values.ndim != 2 or values.size == 0:
        raise ValueError(f"expected a non-empty 2-d heatmap, got shape {values.shape}")
    if len(gt_points) == 0:
        raise ValueError("at least one gaze point is required")
    h, w = values.shape
    positive = np.zeros((h, w), dtype=bool)
    for x, y in gt_points:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"gaze point must lie in [0, 1]^2, got {(x, y)}")
        col = min(int(x * w), w - 1)
        row = min(int(y * h), h - 1)
        positive[row, col] = True
    n_pos = int(positive.sum())
    n_neg = values.size - n_pos
    if n_neg == 0:
        raise ValueError("every cell is positive; AUC undefined")
    ranks = rankdata(values.ravel())
    rank_sum = ranks[positive.ravel()].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def l2_distance(pred_point, gt_points, mode: str = "average") -> float:
    """Euclidean distance from a predicted gaze point to the ground truth.

    mode "average": distance to the mean of the ground-truth points;
    mode "minimum": smallest distance to any of them.
    """
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("at least one gaze point is required")
    p = np.asarray(pred_point, dtype=np.float64)
    if mode == "average":
        return float(np.linalg.norm(p - pts.mean(axis=0)))
    if mode == "minimum":
        return float(np.linalg.norm(p - pts, axis=1).min())
    raise ValueError(f"unknown mode '{mode}' (expected 'average' or 'minimum')")


def gaze_angle_error(head: HeadBox, pred_point, gt_point) -> float:
    """Angle in degrees between the head-center->gt and head-center->pred rays."""
    c = np.asarray(head.center)
    u = np.asarray(gt_point, dtype=np.float64) - c
    v = np.asarray(pred_point, dtype=np.float64) - c
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("gaze point coincides with the head center; angle undefined")
    cos = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def watch_outside_ap(scores) -> float:
    """Average precision for the watch-outside classification.

    `scores` holds (confidence, is_outside) pairs, one per person, with
    confidence the predicted probability of watching outside.  AP is the
    precision-weighted sum of recall increments over the ranked list
    (stable sort, so equal confidences keep input order).
    """
    if len(scores) == 0:
        raise ValueError("at least one scored instance is required")
    conf = np.asarray([s[0] for s in scores], dtype=np.float64)
    labels = np.asarray([bool(s[1]) for s in scores])
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive (watching-outside) instances; AP undefined")
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(labels[order])
    precision = tp / np.arange(1, len(scores) + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


@dataclass
class Detection:
    """One ranked head detection with its gaze readout."""

    score: float
    box: HeadBox
    gaze: tuple[float, float]
    watch_outside: float


def detections_from_predictions(preds: PredictionSet) -> list[Detection]:
    """Flatten every prediction slot into a ranked Detection list."""
    head_probs = preds.is_head_probs.detach().cpu().numpy()
    watch_probs = preds.watch_probs.detach().cpu().numpy()
    heatmaps = preds.heatmaps.detach().cpu().numpy()
    out = []
    for slot in range(preds.num_queries):
        x0, y0, x1, y1 = (float(v) for v in preds.boxes[slot])
        out.append(
            Detection(
                score=float(head_probs[slot, HAS_HEAD]),
                box=_safe_box(x0, y0, x1, y1),
                gaze=heatmap_argmax(heatmaps[slot]),
                watch_outside=float(watch_probs[slot, WATCH_OUTSIDE]),
            )
        )
    return out


def hgt_map(
    detections_per_image: list[list[Detection]],
    gts_per_image: list[list[GazeInstance]],
    iou_threshold: float = 0.5,
    distance_threshold: float = 0.15,
) -> float:
    """Joint head+gaze detection mAP.

    Detections from all images are ranked together by score and greedily
    matched; a detection is a true positive only when its box overlaps an
    unused ground truth with IoU strictly above `iou_threshold` *and* its
    gaze agrees — L2 distance strictly below `distance_threshold` for
    in-frame targets, predicted watch-outside (> 0.5) for out-of-frame
    ones.  Average precision over the resulting ranked list.
    """
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    n_gt = sum(len(g) for g in gts_per_image)
    if n_gt == 0:
        raise ValueError("no ground-truth instances; mAP undefined")

    pool = [
        (det.score, img, det)
        for img, dets in enumerate(detections_per_image)
        for det in dets
    ]
    order = np.argsort(-np.array([p[0] for p in pool]), kind="stable") if pool else []
    used = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    hits = []
    for idx in order:
        _, img, det = pool[idx]
        best_iou, best_k = iou_threshold, -1
        for k, gt in enumerate(gts_per_image[img]):
            if used[img][k]:
                continue
            iou = box_iou(det.box, gt.head)
            if iou <= best_iou:
                continue
            if gt.gaze.inside:
                if l2_distance(det.gaze, [gt.gaze.point]) >= distance_threshold:
                    continue
            elif det.watch_outside <= 0.5:
                continue
            best_iou, best_k = iou, k
        if best_k >= 0:
            used[img][best_k] = True
            hits.append(True)
        else:
            hits.append(False)
    if not hits:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_gt
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


@dataclass
class MetricReport:
    """Aggregated evaluation results for one split.

    Metrics that are undefined on the split (e.g. watch-outside AP when
    nobody watches outside) are reported as NaN; `counts` records how many
    images/instances the numbers summarize.
    """

    auc: float
    avg_dist: float
    min_dist: float
    angle_deg: float
    watch_ap: float
    hgt_map: float
    counts: dict[str, int] = field(default_factory=dict)

    _FLOAT_KEYS = ("auc", "avg_dist", "min_dist", "angle_deg", "watch_ap", "hgt_map")

    def to_text(self) -> str:
        """Flat key-value serialization; floats keep full precision."""
        lines = [f"{k} {getattr(self, k)!r}" for k in self._FLOAT_KEYS]
        lines += [f"count_{k} {v}" for k, v in sorted(self.counts.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values: dict[str, float] = {}
        counts: dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                key, raw = line.split(None, 1)
            except ValueError:
                raise ValueError(f"line {lineno}: expected 'key value', got {line!r}") from None
            if key.startswith("count_"):
                counts[key[len("count_"):]] = int(raw)
            elif key in cls._FLOAT_KEYS:
                values[key] = float(raw)
            else:
                raise ValueError(f"line {lineno}: unknown report key {key!r}")
        missing = [k for k in cls._FLOAT_KEYS if k not in values]
        if missing:
            raise ValueError(f"report is missing keys: {', '.join(missing)}")
        return cls(counts=counts, **values)


def evaluate_split(
    records,
    weights=None,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> MetricReport:
    """Evaluate predictions against ground truth over a full split.

    `records` is an iterable of (gt_instances, PredictionSet) pairs, one
    per image.  Per-instance metrics (AUC, distances, angle, watch score)
    are computed on the Hungarian-matched prediction slot of each ground
    truth; the joint mAP ranks all slots of all images as detections.
    """
    from .matching import CostWeights, match_instances

    weights = weights or CostWeights()
    aucs, avg_d, min_d, angles = [], [], [], []
    watch_scores: list[tuple[float, bool]] = []
    dets_all, gts_all = [], []
    n_images = 0
    for gts, preds in records:
        n_images += 1
        assignment = match_instances(gts, preds, weights, sigma)
        watch_probs = preds.watch_probs.detach().cpu().numpy()
        for gt_idx, slot in assignment.pairs:
            gt = gts[gt_idx]
            watch_scores.append(
                (float(watch_probs[slot, WATCH_OUTSIDE]), not gt.gaze.inside)
            )
            if gt.gaze.inside:
                heat = preds.heatmaps[slot].detach().cpu().numpy()
                point = heatmap_argmax(heat)
                aucs.append(auc(heat, [gt.gaze.point]))
                avg_d.append(l2_distance(point, [gt.gaze.point], "average"))
                min_d.append(l2_distance(point, [gt.gaze.point], "minimum"))
                try:
                    angles.append(gaze_angle_error(gt.head, point, gt.gaze.point))
                except ValueError:
                    pass  # gaze point on the head center: angle undefined, skip
        dets_all.append(detections_from_predictions(preds))
        gts_all.append(gts)

    def _mean(xs):
        return float(np.mean(xs)) if xs else float("nan")

    try:
        ap = watch_outside_ap(watch_scores) if watch_scores else float("nan")
    except ValueError:
        ap = float("nan")
    try:
        joint = hgt_map(dets_all, gts_all) if n_images else float("nan")
    except ValueError:
        joint = float("nan")

    n_instances = sum(len(g) for g in gts_all)
    return MetricReport(
        auc=_mean(aucs),
        avg_dist=_mean(avg_d),
        min_dist=_mean(min_d),
        angle_deg=_mean(angles),
        watch_ap=ap,
        hgt_map=joint,
        counts={
            "images": n_images,
            "instances": n_instances,
            "inside": len(aucs),
            "outside": n_instances - len(aucs),
        },
    )
