"""
Ground-truth lane F1: thick-line rasterization, mask IoU, optimal one-to-one matching
and micro-aggregated precision / recall / F1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .domain import Lane, MiniDataset, Sample
from .errors import DegenerateLaneError, MissingGroundTruthError
from .log import get_logger
from .manifest import Manifest

logger = get_logger(__name__)

# Slack on the squared-distance test so pixels lying exactly on the stroke edge
# are kept regardless of rounding in the projection.
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_pairs: Tuple[Tuple[int, int, float], ...] = field(default=())

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


class F1Score(NamedTuple):
    precision: float
    recall: float
    f1: float


def _polyline_vertices(lane: Lane) -> np.ndarray:
    pts = lane.points_array()
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) < 2:
        raise DegenerateLaneError("degenerate lane: all points identical")
    return pts


def rasterize_lane(lane: Lane, width: float, canvas: Tuple[int, int]) -> np.ndarray:
    """
    Boolean (H, W) mask of pixel centres within width/2 of the lane polyline.
    Each segment is tested exactly inside its own padded bounding box, which gives
    the same set as testing against the polyline resampled at unit arc length.
    """
    if width < 1:
        raise ValueError("stroke width must be >= 1")
    W, H = canvas
    mask = np.zeros((H, W), dtype=bool)
    pts = _polyline_vertices(lane)
    r = width / 2.0
    r2 = r * r + _EDGE_EPS

    for a, b in zip(pts[:-1], pts[1:]):
        x0 = max(int(np.floor(min(a[0], b[0]) - r)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + r)), W - 1)
        y0 = max(int(np.floor(min(a[1], b[1]) - r)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + r)), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        d = b - a
        px, py = xs - a[0], ys - a[1]
        t = np.clip((px * d[0] + py * d[1]) / float(d @ d), 0.0, 1.0)
        dx, dy = px - t * d[0], py - t * d[1]
        mask[y0:y1 + 1, x0:x1 + 1] |= (dx * dx + dy * dy) <= r2
    return mask


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def lane_iou(a: Lane, b: Lane, width: float, canvas: Tuple[int, int]) -> float:
    return _mask_iou(rasterize_lane(a, width, canvas), rasterize_lane(b, width, canvas))


def iou_matrix(preds: Sequence[Lane], gts: Sequence[Lane], width: float, canvas: Tuple[int, int]) -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)), dtype=np.float64)
    # float32 counts stay exact below 2**24 pixels
    P = np.stack([rasterize_lane(ln, width, canvas).ravel() for ln in preds]).astype(np.float32)
    G = np.stack([rasterize_lane(ln, width, canvas).ravel() for ln in gts]).astype(np.float32)
    inter = (P @ G.T).astype(np.float64)
    union = P.sum(axis=1, dtype=np.float64)[:, None] + G.sum(axis=1, dtype=np.float64)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def assign_from_iou(iou: np.ndarray, threshold: float) -> MatchResult:
    """
    Maximum-total-IoU one-to-one assignment restricted to pairs with IoU >= threshold.
    Unmatched predictions are false positives, unmatched ground truths false negatives.
    """
    n_pred, n_gt = iou.shape
    if n_pred == 0 or n_gt == 0:
        return MatchResult(tp=0, fp=n_pred, fn=n_gt)
    valid = iou >= threshold
    weights = np.where(valid, iou, 0.0)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    pairs = tuple(
        (int(r), int(c), float(iou[r, c]))
        for r, c in zip(rows, cols)
        if valid[r, c]
    )
    tp = len(pairs)
    return MatchResult(tp=tp, fp=n_pred - tp, fn=n_gt - tp, matched_pairs=pairs)


def match_lanes(preds: Sequence[Lane], gts: Sequence[Lane], manifest: Manifest) -> MatchResult:
    iou = iou_matrix(preds, gts, manifest.lane_stroke_width, manifest.canvas)
    return assign_from_iou(iou, manifest.iou_threshold)


def f1_from_counts(tp: int, fp: int, fn: int) -> F1Score:
    """
    Precision, recall and F1 from pooled counts. No predictions and no ground truth
    scores 1; a zero denominator on one side makes that term 0.
    """
    if tp + fp == 0 and tp + fn == 0:
        return F1Score(1.0, 1.0, 1.0)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0:
        return F1Score(precision, recall, 0.0)
    return F1Score(precision, recall, 2 * precision * recall / (precision + recall))


def sample_match(sample: Sample, manifest: Manifest) -> MatchResult:
    if sample.gt_lanes is None:
        raise MissingGroundTruthError(f"ground truth required: sample {sample.sample_id} is unlabeled")
    return match_lanes(sample.pred_lanes, sample.gt_lanes, manifest)


def sample_matches(dataset: MiniDataset, manifest: Manifest) -> List[MatchResult]:
    missing = [s.sample_id for s in dataset.samples if s.gt_lanes is None]
    if missing:
        raise MissingGroundTruthError(
            f"ground truth required: {dataset.dataset_id} has {len(missing)} unlabeled samples (first: {missing[0]})")
    return [sample_match(s, manifest) for s in dataset.samples]


def total_counts(matches: Iterable[MatchResult]) -> MatchResult:
    tp = fp = fn = 0
    for m in matches:
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return MatchResult(tp, fp, fn)


def is_vacuous(counts: MatchResult) -> bool:
    """No predictions and no ground truth anywhere: F1 is 1 by convention only."""
    return counts.tp + counts.fp + counts.fn == 0


def dataset_counts(dataset: MiniDataset, manifest: Manifest) -> MatchResult:
    return total_counts(sample_matches(dataset, manifest))


def dataset_f1(dataset: MiniDataset, manifest: Manifest) -> F1Score:
    counts = dataset_counts(dataset, manifest)
    if is_vacuous(counts):
        logger.warning("%s has no predictions and no ground truth; F1 set to 1.0", dataset.dataset_id)
    return f1_from_counts(counts.tp, counts.fp, counts.fn)


def per_sample_f1(sample: Sample, manifest: Manifest) -> float:
    m = sample_match(sample, manifest)
    return f1_from_counts(m.tp, m.fp, m.fn).f1
