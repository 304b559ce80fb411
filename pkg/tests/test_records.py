from __future__ import annotations

import numpy as np
import pytest

from conftest import write_records
from laneperf.domain import Lane, Sample
from laneperf.errors import ConsistencyError, DataError, DimensionError, MissingGroundTruthError, RecordError
from laneperf.manifest import Manifest, SegmentSpec
from laneperf.records import (
    apply_confidence_threshold,
    chunk_minidatasets,
    dumps_segment,
    load_manifest_segments,
    load_segment,
    write_segment,
)

MANIFEST = Manifest(image_width=100, image_height=50, d_lane=2, d_img=3)


def _rec(sid: str, preds=None, gts=None, emb=(0.1, 0.2, 0.3)) -> dict:
    r = {"sample_id": sid, "segment_id": "seg", "pred_lanes": preds or [], "image_embedding": list(emb)}
    if gts is not None:
        r["gt_lanes"] = gts
    return r


PRED = {"points": [[1, 2], [3, 4]], "confidence": 0.5, "logits": [0.0, 0.0], "feature": [0.5, -0.5]}
GT = {"points": [[1, 2], [3, 4]]}


def _samples(n: int):
    return [Sample(sample_id=f"s{i}", segment_id="seg") for i in range(n)]


def test_loads_samples_in_file_order_with_zero_lane_frame(tmp_path):
    p = write_records(tmp_path / "seg.jsonl", [
        _rec("a", [PRED], [GT]), _rec("b", [], [GT]), _rec("c", [PRED, PRED], [GT]),
    ])
    ds = load_segment(p, MANIFEST)
    assert [s.sample_id for s in ds.samples] == ["a", "b", "c"]
    assert [len(s.pred_lanes) for s in ds.samples] == [1, 0, 2]
    assert ds.dataset_id == "seg"
    assert ds.role == "target"


def test_feature_length_mismatch(tmp_path):
    bad = {**PRED, "feature": [1.0, 2.0, 3.0]}
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [bad])])
    with pytest.raises(DimensionError, match="d_lane"):
        load_segment(p, MANIFEST)


def test_embedding_length_mismatch(tmp_path):
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [PRED], emb=(1.0,))])
    with pytest.raises(DimensionError, match="d_img"):
        load_segment(p, MANIFEST)


def test_confidence_inconsistent_with_logits(tmp_path):
    bad = {**PRED, "confidence": 0.5 + 2e-6}
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [bad])])
    with pytest.raises(ConsistencyError):
        load_segment(p, MANIFEST)


def test_confidence_within_tolerance_accepted(tmp_path):
    ok = {**PRED, "confidence": 0.5 + 5e-7}
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [ok])])
    assert load_segment(p, MANIFEST).samples[0].pred_lanes[0].confidence == pytest.approx(0.5, abs=1e-6)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "seg.jsonl"
    p.write_text('{"sample_id": "a", "segment_id": "seg"}\n{not json\n', encoding="utf-8")
    with pytest.raises(RecordError) as exc:
        load_segment(p, MANIFEST)
    assert exc.value.line == 2
    assert "seg.jsonl:2:" in str(exc.value)


def test_invalid_utf8_reports_line_number(tmp_path):
    p = tmp_path / "seg.jsonl"
    p.write_bytes(b'{"sample_id": "a", "segment_id": "seg"}\n{"sample_id": "\xff\xfe"}\n')
    with pytest.raises(RecordError, match="UTF-8") as exc:
        load_segment(p, MANIFEST)
    assert exc.value.line == 2


def test_prediction_without_feature_rejected(tmp_path):
    bad = {k: v for k, v in PRED.items() if k != "feature"}
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [bad])])
    with pytest.raises(RecordError, match="feature"):
        load_segment(p, MANIFEST)


def test_single_point_lane_rejected(tmp_path):
    bad = {**PRED, "points": [[1, 2]]}
    p = write_records(tmp_path / "seg.jsonl", [_rec("a", [bad])])
    with pytest.raises(RecordError, match="points"):
        load_segment(p, MANIFEST)


def test_empty_and_missing_files(tmp_path):
    (tmp_path / "empty.jsonl").write_text("", encoding="utf-8")
    with pytest.raises(RecordError, match="no records"):
        load_segment(tmp_path / "empty.jsonl", MANIFEST)
    with pytest.raises(RecordError, match="not found"):
        load_segment(tmp_path / "missing.jsonl", MANIFEST)


def test_source_val_requires_ground_truth(tmp_path):
    p = write_records(tmp_path / "val.jsonl", [_rec("a", [PRED], [GT]), _rec("b", [PRED])])
    with pytest.raises(MissingGroundTruthError):
        load_segment(p, MANIFEST, SegmentSpec(path="val.jsonl", role="source_val"))


def test_target_may_be_unlabeled(tmp_path):
    p = write_records(tmp_path / "t.jsonl", [_rec("a", [PRED])])
    ds = load_segment(p, MANIFEST, SegmentSpec(path="t.jsonl", role="target", family="Night", group="hours"))
    assert not ds.labeled
    assert (ds.family, ds.group, ds.dataset_id) == ("Night", "hours", "t")


def test_round_trip_is_field_for_field(tmp_path):
    p = write_records(tmp_path / "seg.jsonl", [
        _rec("a", [{**PRED, "points": [[0.1, 1 / 3], [2.5, 7.25]], "feature": [1e-17, -3.14159]}], [GT]),
        _rec("b", [], []),
        _rec("c", [PRED]),
    ])
    first = load_segment(p, MANIFEST)
    again = write_segment(first, tmp_path / "again.jsonl")
    second = load_segment(again, MANIFEST)
    assert second == first
    assert dumps_segment(second) == again.read_text(encoding="utf-8")


@pytest.mark.parametrize("n,size,expected", [
    (200, 200, [200]),
    (120, 50, [50, 70]),
    (50, 50, [50]),
    (125, 50, [50, 50, 25]),
    (10, 200, [10]),
])
def test_chunk_sizes(n, size, expected):
    chunks = chunk_minidatasets(_samples(n), size, dataset_id="seg")
    assert [len(c.samples) for c in chunks] == expected
    assert [c.dataset_id for c in chunks] == [f"seg#{k}" for k in range(len(expected))]


def test_chunking_preserves_every_sample_in_order():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, size = int(rng.integers(1, 300)), int(rng.integers(1, 120))
        samples = _samples(n)
        flat = [s for c in chunk_minidatasets(samples, size) for s in c.samples]
        assert flat == samples


def test_chunking_empty_input():
    with pytest.raises(DataError):
        chunk_minidatasets([], 10)


def test_load_manifest_segments_chunks_and_filters(tmp_path):
    write_records(tmp_path / "v.jsonl", [_rec(f"v{i}", [PRED], [GT]) for i in range(5)])
    write_records(tmp_path / "t.jsonl", [_rec(f"t{i}", [PRED]) for i in range(3)])
    m = MANIFEST.model_copy(update={
        "segments": [SegmentSpec(path="v.jsonl", role="source_val"), SegmentSpec(path="t.jsonl", role="target")],
        "base_dir": tmp_path,
    })
    val = load_manifest_segments(m, ("source_val",), size=3)
    assert [len(d.samples) for d in val] == [3, 2]
    assert all(d.role == "source_val" for d in val)
    assert [d.dataset_id for d in load_manifest_segments(m, ("source_val", "target"), segment_ids=["t"])] == ["t#0"]
    with pytest.raises(DataError, match="unknown segment"):
        load_manifest_segments(m, ("target",), segment_ids=["zzz"])


def test_apply_confidence_threshold_keeps_ties():
    lanes = tuple(Lane(points=((0, 0), (1, 1)), confidence=c, feature=(0.0, 0.0)) for c in (0.39, 0.4, 0.8))
    s = apply_confidence_threshold(Sample(sample_id="a", segment_id="s", pred_lanes=lanes), 0.4)
    assert [ln.confidence for ln in s.pred_lanes] == [0.4, 0.8]
