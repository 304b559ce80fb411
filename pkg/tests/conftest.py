from __future__ import annotations

import json
import math
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pytest

from laneperf.domain import Lane, MiniDataset, Sample
from laneperf.manifest import Manifest
from laneperf.synth import SynthConfig, benchmark_suite, generate_corpus


def logits_for(confidence: float) -> tuple:
    return (math.log(confidence / (1.0 - confidence)), 0.0)


def pred(points, confidence: float = 0.9, feature: Optional[Sequence[float]] = None, logits=None) -> Lane:
    return Lane(
        points=tuple(tuple(map(float, p)) for p in points),
        confidence=confidence,
        logits=logits,
        feature=tuple(feature) if feature is not None else (0.0,),
    )


def gt(points) -> Lane:
    return Lane(points=tuple(tuple(map(float, p)) for p in points))


def vertical(x: float, y0: float = 0.0, y1: float = 39.0) -> List[tuple]:
    return [(x, y0), (x, y1)]


def dataset_from_confidences(conf_lists: Sequence[Sequence[float]], dataset_id: str = "d") -> MiniDataset:
    """One sample per inner list; lanes carry logits consistent with their confidence."""
    samples = []
    for i, confs in enumerate(conf_lists):
        lanes = tuple(
            Lane(points=((0.0, 0.0), (1.0, 1.0)), confidence=c, logits=(math.log(c / (1 - c)), 0.0) if 0 < c < 1
                 else None, feature=(0.0,))
            for c in confs
        )
        samples.append(Sample(sample_id=f"{dataset_id}-{i}", segment_id=dataset_id, pred_lanes=lanes, gt_lanes=()))
    return MiniDataset(dataset_id=dataset_id, samples=tuple(samples))


def dataset_from_features(features: Sequence[Sequence[float]], dataset_id: str = "f") -> MiniDataset:
    lanes = tuple(Lane(points=((0.0, 0.0), (1.0, 1.0)), confidence=0.5, feature=tuple(map(float, f)))
                  for f in features)
    return MiniDataset(dataset_id=dataset_id,
                       samples=(Sample(sample_id=f"{dataset_id}-0", segment_id=dataset_id, pred_lanes=lanes, gt_lanes=()),))


def dataset_from_logits(logits: Sequence[Sequence[float]], dataset_id: str = "e") -> MiniDataset:
    lanes = []
    for a, b in logits:
        c = 1.0 / (1.0 + math.exp(b - a))
        lanes.append(Lane(points=((0.0, 0.0), (1.0, 1.0)), confidence=c, logits=(float(a), float(b)), feature=(0.0,)))
    return MiniDataset(dataset_id=dataset_id,
                       samples=(Sample(sample_id=f"{dataset_id}-0", segment_id=dataset_id, pred_lanes=tuple(lanes),
                                       gt_lanes=()),))


def net_sample(rng: np.random.Generator, n_lanes: int, d_lane: int = 4, d_img: int = 3, sid: str = "s") -> Sample:
    lanes = tuple(
        Lane(points=((0.0, 0.0), (1.0, 1.0)), confidence=0.5, feature=tuple(rng.normal(size=d_lane).tolist()))
        for _ in range(n_lanes)
    )
    return Sample(sample_id=sid, segment_id="net", pred_lanes=lanes, gt_lanes=(),
                  image_embedding=tuple(rng.normal(size=d_img).tolist()))


def write_records(path: Path, records: List[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def small_manifest() -> Manifest:
    return Manifest(image_width=40, image_height=40, d_lane=1, d_img=0, lane_stroke_width=4.0)


@pytest.fixture(scope="session")
def small_suite():
    """Seeded miniature of the benchmark suite, shared by the harness and CLI tests."""
    cfg = benchmark_suite(seed=3, frames_per_segment=12, val_segments=5, target_segments=2, reference_segments=2)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def no_lane_corpus():
    from laneperf.synth import FamilySpec
    cfg = SynthConfig(seed=5, families=[
        FamilySpec(name="val", role="source_val", severity=0.0, n_segments=3, frames_per_segment=15),
        FamilySpec(name="tunnel", role="target", no_lane=True, n_segments=1, frames_per_segment=50),
    ])
    return generate_corpus(cfg)
