from __future__ import annotations

import itertools

import numpy as np
import pytest

from conftest import gt, pred, vertical
from laneperf.domain import Lane, MiniDataset, Sample
from laneperf.errors import DegenerateLaneError, MissingGroundTruthError
from laneperf.lane_eval import (
    assign_from_iou,
    dataset_f1,
    f1_from_counts,
    iou_matrix,
    lane_iou,
    match_lanes,
    per_sample_f1,
    rasterize_lane,
)
from laneperf.manifest import Manifest


def brute_force_mask(points, width, canvas):
    W, H = canvas
    pts = np.asarray(points, dtype=float)
    mask = np.zeros((H, W), dtype=bool)
    r2 = (width / 2.0) ** 2
    for y in range(H):
        for x in range(W):
            best = np.inf
            for a, b in zip(pts[:-1], pts[1:]):
                d = b - a
                t = np.clip(((x - a[0]) * d[0] + (y - a[1]) * d[1]) / (d @ d), 0.0, 1.0)
                best = min(best, (x - a[0] - t * d[0]) ** 2 + (y - a[1] - t * d[1]) ** 2)
            mask[y, x] = best <= r2 + 1e-9
    return mask


def brute_force_assignment(iou: np.ndarray, threshold: float):
    """Best total IoU over every one-to-one matching of valid pairs; returns (total, tp)."""
    n_pred, n_gt = iou.shape
    best = (0.0, 0)
    for k in range(min(n_pred, n_gt) + 1):
        for rows in itertools.combinations(range(n_pred), k):
            for cols in itertools.permutations(range(n_gt), k):
                vals = [iou[r, c] for r, c in zip(rows, cols)]
                if all(v >= threshold for v in vals) and sum(vals) > best[0] + 1e-12:
                    best = (sum(vals), k)
    return best


# ----- rasterization / IoU -----

def test_vertical_lane_matches_pixel_scan():
    lane = gt(vertical(10, 2, 17))
    mask = rasterize_lane(lane, 4, (20, 20))
    assert np.array_equal(mask, brute_force_mask(lane.points, 4, (20, 20)))
    assert set(np.nonzero(mask)[1]) == {8, 9, 10, 11, 12}


def test_polyline_matches_pixel_scan():
    lane = gt([(1.5, 3.2), (12.7, 9.1), (15.0, 18.4), (3.3, 19.9)])
    for width in (1, 3, 6.5):
        assert np.array_equal(rasterize_lane(lane, width, (22, 24)), brute_force_mask(lane.points, width, (22, 24)))


def test_off_canvas_lane_is_empty():
    assert not rasterize_lane(gt([(100, 100), (150, 120)]), 4, (20, 20)).any()


def test_reversed_lane_gives_identical_mask():
    pts = [(2, 3), (9, 12), (14, 5)]
    a = rasterize_lane(gt(pts), 5, (20, 20))
    b = rasterize_lane(gt(pts[::-1]), 5, (20, 20))
    assert np.array_equal(a, b)


def test_degenerate_lane_raises():
    with pytest.raises(DegenerateLaneError):
        rasterize_lane(gt([(3, 3), (3, 3), (3, 3)]), 4, (20, 20))


def test_iou_identical_disjoint_and_symmetric():
    a, b = gt(vertical(10)), gt(vertical(30))
    assert lane_iou(a, a, 4, (40, 40)) == 1.0
    assert lane_iou(a, b, 4, (40, 40)) == 0.0
    c = gt([(5, 0), (25, 39)])
    assert lane_iou(a, c, 6, (40, 40)) == lane_iou(c, a, 6, (40, 40))


def test_parallel_offset_matches_pixel_count():
    a, b = gt(vertical(10, 0, 39)), gt(vertical(12, 0, 39))
    ma = brute_force_mask(a.points, 4, (40, 40))
    mb = brute_force_mask(b.points, 4, (40, 40))
    expected = np.count_nonzero(ma & mb) / np.count_nonzero(ma | mb)
    assert lane_iou(a, b, 4, (40, 40)) == pytest.approx(expected, abs=1e-15)


# ----- matching -----

def test_two_exact_predictions(small_manifest):
    lanes = [vertical(8), vertical(28)]
    m = match_lanes([pred(p) for p in lanes], [gt(p) for p in lanes], small_manifest)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)
    assert all(iou == 1.0 for _, _, iou in m.matched_pairs)


def test_non_overlapping_prediction(small_manifest):
    m = match_lanes([pred(vertical(5))], [gt(vertical(30))], small_manifest)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_below_threshold_pairs_never_match():
    iou = np.array([[0.49, 0.2], [0.1, 0.5]])
    m = assign_from_iou(iou, 0.5)
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)
    assert m.matched_pairs == ((1, 1, 0.5),)


def test_optimal_not_greedy():
    # greedy would take (0, 0) = 0.9 and leave row 1 unmatched
    iou = np.array([[0.9, 0.8], [0.85, 0.0]])
    m = assign_from_iou(iou, 0.5)
    assert m.tp == 2
    assert {(r, c) for r, c, _ in m.matched_pairs} == {(0, 1), (1, 0)}


def test_assignment_equals_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n_pred, n_gt = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        iou = rng.uniform(0.0, 1.0, size=(n_pred, n_gt))
        iou[rng.random(iou.shape) < 0.3] = 0.0
        m = assign_from_iou(iou, 0.5)
        total, tp = brute_force_assignment(iou, 0.5)
        assert m.tp == tp
        assert sum(v for _, _, v in m.matched_pairs) == pytest.approx(total, abs=1e-12)
        assert (m.fp, m.fn) == (n_pred - tp, n_gt - tp)


def _random_lane(rng, canvas):
    W, H = canvas
    n = int(rng.integers(2, 5))
    xs = np.sort(rng.uniform(0, W, size=n)) if rng.random() < 0.5 else rng.uniform(0, W, size=n)
    ys = np.linspace(H - 1, rng.uniform(0, H / 2), n)
    return [(float(x), float(y)) for x, y in zip(xs, ys)]


def test_match_lanes_equals_brute_force_on_random_scenes():
    rng = np.random.default_rng(1)
    m = Manifest(image_width=48, image_height=32, d_lane=1, lane_stroke_width=6)
    for _ in range(500):
        preds = [pred(_random_lane(rng, m.canvas)) for _ in range(int(rng.integers(0, 6)))]
        gts = [gt(_random_lane(rng, m.canvas)) for _ in range(int(rng.integers(0, 6)))]
        iou = iou_matrix(preds, gts, m.lane_stroke_width, m.canvas)
        result = match_lanes(preds, gts, m)
        _, tp = brute_force_assignment(iou, m.iou_threshold)
        assert (result.tp, result.fp, result.fn) == (tp, len(preds) - tp, len(gts) - tp)


def test_matching_is_symmetric_in_counts():
    rng = np.random.default_rng(2)
    m = Manifest(image_width=48, image_height=32, d_lane=1, lane_stroke_width=6)
    for _ in range(100):
        a = [gt(_random_lane(rng, m.canvas)) for _ in range(int(rng.integers(0, 5)))]
        b = [gt(_random_lane(rng, m.canvas)) for _ in range(int(rng.integers(0, 5)))]
        ab, ba = match_lanes(a, b, m), match_lanes(b, a, m)
        assert (ab.tp, ab.fp, ab.fn) == (ba.tp, ba.fn, ba.fp)


# ----- F1 -----

def test_f1_arithmetic():
    assert f1_from_counts(1, 1, 1) == (0.5, 0.5, 0.5)
    assert f1_from_counts(3, 0, 0) == (1.0, 1.0, 1.0)
    assert f1_from_counts(0, 0, 0).f1 == 1.0
    assert f1_from_counts(0, 2, 0).f1 == 0.0
    assert f1_from_counts(0, 0, 2).f1 == 0.0
    p, r, f1 = f1_from_counts(2, 1, 3)
    assert f1 == pytest.approx(2 * p * r / (p + r), abs=1e-15)


def _sample(sid, preds, gts):
    return Sample(sample_id=sid, segment_id="s", pred_lanes=tuple(preds), gt_lanes=None if gts is None else tuple(gts))


def test_per_sample_conventions(small_manifest):
    assert per_sample_f1(_sample("a", [], []), small_manifest) == 1.0
    assert per_sample_f1(_sample("b", [], [gt(vertical(5)), gt(vertical(30))]), small_manifest) == 0.0
    one_tp_one_fp = _sample("c", [pred(vertical(10)), pred(vertical(30))], [gt(vertical(10))])
    assert per_sample_f1(one_tp_one_fp, small_manifest) == pytest.approx(2 / 3, abs=1e-15)


def test_per_sample_requires_ground_truth(small_manifest):
    with pytest.raises(MissingGroundTruthError, match="ground truth required"):
        per_sample_f1(_sample("a", [], None), small_manifest)


def test_dataset_f1_pools_counts_and_ignores_order(small_manifest):
    samples = [
        _sample("a", [pred(vertical(10))], [gt(vertical(10))]),
        _sample("b", [pred(vertical(30))], [gt(vertical(5))]),
        _sample("c", [], [gt(vertical(20))]),
    ]
    f = dataset_f1(MiniDataset(dataset_id="d", samples=tuple(samples)), small_manifest)
    # TP=1, FP=1, FN=2
    assert f.precision == 0.5 and f.recall == pytest.approx(1 / 3)
    g = dataset_f1(MiniDataset(dataset_id="d", samples=tuple(samples[::-1])), small_manifest)
    assert f == g


def test_dataset_f1_vacuous_is_one_and_logged(small_manifest, caplog):
    ds = MiniDataset(dataset_id="empty", samples=(_sample("a", [], []), _sample("b", [], [])))
    with caplog.at_level("WARNING"):
        assert dataset_f1(ds, small_manifest).f1 == 1.0
    assert "no predictions and no ground truth" in caplog.text


def test_dataset_f1_missing_ground_truth(small_manifest):
    ds = MiniDataset(dataset_id="d", samples=(_sample("a", [], []), _sample("b", [], None)))
    with pytest.raises(MissingGroundTruthError):
        dataset_f1(ds, small_manifest)


def test_lane_iou_of_lane_with_itself_is_one():
    rng = np.random.default_rng(3)
    for _ in range(50):
        lane = Lane(points=tuple(_random_lane(rng, (48, 32))))
        if rasterize_lane(lane, 6, (48, 32)).any():
            assert lane_iou(lane, lane, 6, (48, 32)) == 1.0
