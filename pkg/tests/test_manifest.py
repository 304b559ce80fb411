from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from laneperf.errors import ManifestError
from laneperf.manifest import dump_manifest, manifest_from_dict, parse_manifest


def _write(tmp_path: Path, data: dict) -> Path:
    p = tmp_path / "manifest.yaml"
    p.write_text(yaml.safe_dump(data), encoding="utf-8")
    return p


BASE = {
    "image_width": 1920,
    "image_height": 1280,
    "d_lane": 8,
    "segments": [{"path": "segments/val.jsonl", "role": "source_val"}],
}


def test_minimal_manifest_gets_defaults(tmp_path):
    m = parse_manifest(_write(tmp_path, BASE))
    assert m.iou_threshold == 0.5
    assert m.minidataset_size == 200
    assert m.lane_stroke_width == 30
    assert m.confidence_threshold_note == 0.4
    assert m.covariance_ddof == 0
    assert m.segments[0].resolved_id == "val"
    assert m.segments[0].resolved_family == "source_val"


def test_minidataset_size_is_read(tmp_path):
    m = parse_manifest(_write(tmp_path, {**BASE, "minidataset_size": 50}))
    assert m.minidataset_size == 50


def test_out_of_range_iou_threshold_names_the_field(tmp_path):
    with pytest.raises(ManifestError, match="iou_threshold"):
        parse_manifest(_write(tmp_path, {**BASE, "iou_threshold": 1.5}))


@pytest.mark.parametrize("field,value", [("image_width", 0), ("minidataset_size", 0), ("d_lane", 0)])
def test_invalid_values_rejected(tmp_path, field, value):
    with pytest.raises(ManifestError, match=field):
        parse_manifest(_write(tmp_path, {**BASE, field: value}))


def test_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        parse_manifest(tmp_path / "nope.yaml")


def test_invalid_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("image_width: [1, 2\n", encoding="utf-8")
    with pytest.raises(ManifestError, match="YAML"):
        parse_manifest(p)


def test_unknown_field_rejected(tmp_path):
    with pytest.raises(ManifestError, match="stroke"):
        parse_manifest(_write(tmp_path, {**BASE, "stroke": 3}))


def test_inconsistent_segment_dimensions(tmp_path):
    data = {**BASE, "segments": [{"path": "a.jsonl", "role": "target", "d_lane": 4}]}
    with pytest.raises(ManifestError, match="inconsistent"):
        parse_manifest(_write(tmp_path, data))


def test_duplicate_segment_ids(tmp_path):
    data = {**BASE, "segments": [{"path": "a/x.jsonl", "role": "target"}, {"path": "b/x.jsonl", "role": "target"}]}
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest(_write(tmp_path, data))


def test_segment_paths_resolve_against_manifest_dir(tmp_path):
    m = parse_manifest(_write(tmp_path, BASE))
    assert m.segment_path(m.segments[0]) == tmp_path / "segments" / "val.jsonl"


def test_fingerprint_ignores_segments_and_chunk_size():
    a = manifest_from_dict(BASE)
    b = manifest_from_dict({**BASE, "segments": [], "minidataset_size": 50})
    assert a.fingerprint() == b.fingerprint()
    assert a.with_minidataset_size(50).fingerprint() == a.fingerprint()


def test_fingerprint_tracks_evaluation_settings():
    a = manifest_from_dict(BASE)
    assert a.fingerprint() != manifest_from_dict({**BASE, "lane_stroke_width": 10}).fingerprint()
    assert a.fingerprint() != manifest_from_dict({**BASE, "d_lane": 9}).fingerprint()
    assert a.fingerprint() != manifest_from_dict({**BASE, "covariance_ddof": 1}).fingerprint()


def test_dump_reparses_to_same_manifest(tmp_path):
    m = manifest_from_dict({**BASE, "iou_threshold": 0.6}, base_dir=tmp_path)
    p = tmp_path / "again.yaml"
    p.write_text(dump_manifest(m), encoding="utf-8")
    assert parse_manifest(p) == m


def test_with_minidataset_size_rejects_zero():
    with pytest.raises(ManifestError):
        manifest_from_dict(BASE).with_minidataset_size(0)
