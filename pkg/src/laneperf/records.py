from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .audit import atomic_write_text
from .domain import CONFIDENCE_TOLERANCE, MiniDataset, Sample, lane_softmax
from .errors import ConsistencyError, DataError, DimensionError, MissingGroundTruthError, RecordError
from .log import get_logger
from .manifest import Manifest, SegmentSpec

logger = get_logger(__name__)


def iter_records(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Stream (line number, object) pairs from a JSON Lines file, skipping blank lines."""
    with path.open("rb") as f:
        for i, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise RecordError(f"invalid UTF-8 at byte {e.start}", path=path, line=i) from e
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(f"malformed record: {e.msg}", path=path, line=i) from e
            if not isinstance(obj, dict):
                raise RecordError("record must be a JSON object", path=path, line=i)
            yield i, obj


def _check_sample(sample: Sample, manifest: Manifest, where: str) -> None:
    for j, lane in enumerate(sample.pred_lanes):
        if lane.confidence is None:
            raise RecordError(f"{where}: pred_lanes[{j}] has no confidence")
        if lane.feature is None:
            raise RecordError(f"{where}: pred_lanes[{j}] has no feature")
        if len(lane.feature) != manifest.d_lane:
            raise DimensionError(
                f"{where}: pred_lanes[{j}] feature length {len(lane.feature)} != d_lane {manifest.d_lane}")
        if lane.logits is not None:
            expected = lane_softmax(lane.logits)
            if abs(expected - lane.confidence) > CONFIDENCE_TOLERANCE:
                raise ConsistencyError(
                    f"{where}: pred_lanes[{j}] confidence {lane.confidence!r} disagrees with "
                    f"softmax(logits)={expected!r}")
    if sample.image_embedding is not None and len(sample.image_embedding) != manifest.d_img:
        raise DimensionError(
            f"{where}: image_embedding length {len(sample.image_embedding)} != d_img {manifest.d_img}")


def parse_samples(path: Path, manifest: Manifest) -> List[Sample]:
    samples: List[Sample] = []
    for line_no, obj in iter_records(path):
        try:
            sample = Sample.model_validate(obj)
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(x) for x in first["loc"])
            raise RecordError(f"{loc}: {first['msg']}", path=path, line=line_no) from e
        _check_sample(sample, manifest, f"{path}:{line_no}")
        samples.append(sample)
    return samples


def load_segment(path: Path, manifest: Manifest, spec: Optional[SegmentSpec] = None) -> MiniDataset:
    """
    Load one segment record file as a single MiniDataset, samples in file order.
    Without a spec the segment is treated as an unlabeled target.
    """
    path = Path(path)
    if not path.is_file():
        raise RecordError("record file not found", path=path)
    samples = parse_samples(path, manifest)
    if not samples:
        raise RecordError("segment has no records", path=path)

    seg_ids = {s.segment_id for s in samples}
    if len(seg_ids) > 1:
        raise RecordError(f"records span several segments: {', '.join(sorted(seg_ids))}", path=path)

    role = spec.role if spec else "target"
    if role == "source_val":
        unlabeled = [s.sample_id for s in samples if not s.labeled]
        if unlabeled:
            raise MissingGroundTruthError(
                f"{path}: source_val segment has unlabeled samples (first: {unlabeled[0]})")

    dataset_id = spec.resolved_id if spec else samples[0].segment_id
    logger.info("loaded segment %s (%d samples) from %s", dataset_id, len(samples), path)
    return MiniDataset(
        dataset_id=dataset_id,
        samples=tuple(samples),
        role=role,
        family=spec.resolved_family if spec else "target",
        group=spec.group if spec else "all",
    )


def chunk_minidatasets(
        samples: Sequence[Sample],
        size: int,
        dataset_id: str = "chunk",
        role: str = "target",
        family: str = "target",
        group: str = "all",
) -> List[MiniDataset]:
    """
    Split consecutive samples into non-overlapping mini-datasets of `size`. A short
    final chunk is kept when it holds at least size/2 samples, otherwise it is merged
    into the previous chunk.
    """
    if size < 1:
        raise DataError("chunk size must be >= 1")
    if not samples:
        raise DataError("cannot chunk an empty sample list")

    bounds = [(i, min(i + size, len(samples))) for i in range(0, len(samples), size)]
    if len(bounds) > 1:
        last_lo, last_hi = bounds[-1]
        if (last_hi - last_lo) * 2 < size:
            prev_lo, _ = bounds[-2]
            bounds[-2:] = [(prev_lo, last_hi)]

    return [
        MiniDataset(
            dataset_id=f"{dataset_id}#{k}",
            samples=tuple(samples[lo:hi]),
            role=role,
            family=family,
            group=group,
        )
        for k, (lo, hi) in enumerate(bounds)
    ]


def load_manifest_segments(
        manifest: Manifest,
        roles: Iterable[str],
        size: Optional[int] = None,
        segment_ids: Optional[Iterable[str]] = None,
) -> List[MiniDataset]:
    """Load every declared segment of the given roles, chunked into mini-datasets."""
    size = size or manifest.minidataset_size
    wanted = set(segment_ids) if segment_ids else None
    specs = manifest.segments_with_role(*roles)
    if wanted is not None:
        unknown = wanted - {s.resolved_id for s in manifest.segments}
        if unknown:
            raise DataError(f"unknown segment(s): {', '.join(sorted(unknown))}")
        specs = [s for s in specs if s.resolved_id in wanted]

    out: List[MiniDataset] = []
    for spec in specs:
        seg = load_segment(manifest.segment_path(spec), manifest, spec)
        out.extend(chunk_minidatasets(
            seg.samples, size, dataset_id=seg.dataset_id, role=seg.role, family=seg.family, group=seg.group))
    return out


def serialize_sample(sample: Sample) -> Dict[str, Any]:
    return sample.model_dump(mode="json", exclude_none=True)


def dumps_segment(dataset: MiniDataset) -> str:
    return "".join(json.dumps(serialize_sample(s)) + "\n" for s in dataset.samples)


def write_segment(dataset: MiniDataset, path: Path) -> Path:
    return atomic_write_text(Path(path), dumps_segment(dataset))


def apply_confidence_threshold(sample: Sample, threshold: float) -> Sample:
    """Drop predicted lanes scoring below the detector's post-NMS threshold."""
    kept = tuple(ln for ln in sample.pred_lanes if ln.confidence is not None and ln.confidence >= threshold)
    if len(kept) == len(sample.pred_lanes):
        return sample
    return sample.model_copy(update={"pred_lanes": kept})
