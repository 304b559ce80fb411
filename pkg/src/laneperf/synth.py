"""
Seeded synthetic corpora: smooth ground-truth lane scenes and a simulated detector
whose drop rate, point jitter, false-positive rate and confidence all degrade with a
domain-shift severity s in [0, 1]. Output uses the same manifest and record formats
as ingested corpora.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import yaml
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .audit import OutputIndex, atomic_write_bytes, atomic_write_text
from .domain import Lane, MiniDataset, Sample, lane_softmax
from .errors import DataError
from .log import get_logger
from .manifest import Manifest, SegmentSpec, dump_manifest
from .records import apply_confidence_threshold, dumps_segment

logger = get_logger(__name__)

_WORLD_KEY = 1 << 20
_CONF_CLAMP = 1e-3


class FamilySpec(BaseModel):
    """A set of segments sharing one role and one shift severity (a target domain)."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    group: str = "all"
    role: Literal["source_train_ref", "source_val", "target"] = "target"
    severity: Optional[float] = Field(None, ge=0.0, le=1.0)
    n_segments: int = Field(1, ge=1)
    frames_per_segment: int = Field(100, ge=1)
    no_lane: bool = False


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    n_segments: int = Field(4, ge=1)
    frames_per_segment: int = Field(100, ge=1)
    reference_segments: int = Field(2, ge=0)
    lanes_min: int = Field(2, ge=0)
    lanes_max: int = Field(4, ge=0)
    severity: float = Field(0.0, ge=0.0, le=1.0)
    severity_jitter: float = Field(0.1, ge=0.0)
    frame_jitter: float = Field(0.2, ge=0.0)
    empty_frame_rate: float = Field(0.03, ge=0.0, le=1.0)

    # geometry
    image_width: int = Field(320, ge=16)
    image_height: int = Field(192, ge=16)
    lane_stroke_width: float = Field(15.0, ge=1.0)
    iou_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    minidataset_size: int = Field(200, ge=1)
    points_per_lane: int = Field(8, ge=2)
    horizon: float = Field(0.6, gt=0.0, le=1.0)
    curvature_max: float = Field(30.0, ge=0.0)
    spacing_jitter: float = Field(5.0, ge=0.0)

    # detector
    drop_base: float = Field(0.02, ge=0.0, le=1.0)
    drop_slope: float = Field(0.35, ge=0.0)
    jitter_base: float = Field(0.5, ge=0.0)
    jitter_slope: float = Field(6.0, ge=0.0)
    fp_base: float = Field(0.05, ge=0.0, le=1.0)
    fp_slope: float = Field(0.4, ge=0.0)
    max_false_positives: int = Field(2, ge=0)
    conf_tp_base: float = Field(0.85, ge=0.0, le=1.0)
    conf_fp_base: float = Field(0.55, ge=0.0, le=1.0)
    conf_slope: float = Field(0.3, ge=0.0)
    conf_jitter_penalty: float = Field(0.15, ge=0.0)
    conf_noise: float = Field(0.06, ge=0.0)
    conf_threshold: float = Field(0.4, ge=0.0, le=1.0)

    # features
    d_lane: int = Field(16, ge=1)
    d_img: int = Field(8, ge=0)
    n_clusters: int = Field(4, ge=1)
    shift_scale: float = Field(3.0, ge=0.0)
    quality_scale: float = Field(1.5, ge=0.0)
    fp_feature_offset: float = Field(1.5, ge=0.0)
    feature_noise: float = Field(0.5, ge=0.0)
    image_noise: float = Field(0.3, ge=0.0)

    render_images: bool = False
    families: List[FamilySpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.lanes_min > self.lanes_max:
            raise ValueError("lanes_min must not exceed lanes_max")
        if self.conf_fp_base > self.conf_tp_base:
            raise ValueError("conf_fp_base must not exceed conf_tp_base")
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise ValueError("family names must be unique")
        return self

    def p_drop(self, s: float) -> float:
        return min(1.0, self.drop_base + self.drop_slope * s)

    def p_fp(self, s: float) -> float:
        return min(1.0, self.fp_base + self.fp_slope * s)

    def jitter(self, s: float) -> float:
        return self.jitter_base + self.jitter_slope * s

    def resolved_families(self) -> List[FamilySpec]:
        if self.families:
            return list(self.families)
        out = []
        if self.reference_segments:
            out.append(FamilySpec(name="reference", role="source_train_ref", severity=0.0,
                                  n_segments=self.reference_segments, frames_per_segment=self.frames_per_segment))
        out.append(FamilySpec(name="synthetic", role="target", severity=self.severity,
                              n_segments=self.n_segments, frames_per_segment=self.frames_per_segment))
        return out


def load_synth_config(path: Path) -> SynthConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"synth config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return SynthConfig.model_validate(data)
    except yaml.YAMLError as e:
        raise DataError(f"synth config is not valid YAML: {e}") from e
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise DataError(f"synth config: {loc}: {first['msg']}") from e


def benchmark_suite(
        seed: int = 0,
        frames_per_segment: int = 100,
        val_segments: int = 20,
        target_segments: int = 5,
        reference_segments: int = 10,
        severities: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8),
) -> SynthConfig:
    """A severity-0 source (reference + validation) and one target family per severity."""
    families = [
        FamilySpec(name="source-ref", group="source", role="source_train_ref", severity=0.0,
                   n_segments=reference_segments, frames_per_segment=frames_per_segment),
        FamilySpec(name="source-val", group="source", role="source_val", severity=0.0,
                   n_segments=val_segments, frames_per_segment=frames_per_segment),
    ]
    for s in severities:
        families.append(FamilySpec(
            name=f"shift-{s:.1f}", group="mild" if s <= 0.5 else "severe", role="target",
            severity=s, n_segments=target_segments, frames_per_segment=frames_per_segment,
        ))
    return SynthConfig(seed=seed, frames_per_segment=frames_per_segment, families=families)


# ----- generation -----

def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


class _World:
    """Detector-wide constants shared by every family of one corpus."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_WORLD_KEY,)))
        self.centers = rng.normal(0.0, 2.0, size=(cfg.n_clusters, cfg.d_lane))
        self.lane_shift = _unit(rng.normal(size=cfg.d_lane)) * cfg.shift_scale
        self.fp_offset = _unit(rng.normal(size=cfg.d_lane)) * cfg.fp_feature_offset
        self.quality_dir = _unit(rng.normal(size=cfg.d_lane)) * cfg.quality_scale
        self.img_base = rng.normal(size=cfg.d_img)
        self.img_shift = _unit(rng.normal(size=cfg.d_img)) * cfg.shift_scale
        self.no_lane_dir = _unit(rng.normal(size=cfg.d_img)) * 3.0

    def severity_of(self, embedding: np.ndarray) -> float:
        denom = float(self.img_shift @ self.img_shift)
        if denom == 0:
            return 0.0
        return float(np.clip((embedding - self.img_base) @ self.img_shift / denom, 0.0, 1.0))


def _curve(cfg: SynthConfig, x_bottom: float, x_vanish: float, curvature: float) -> np.ndarray:
    t = np.linspace(0.0, cfg.horizon, cfg.points_per_lane)
    y = (cfg.image_height - 1) * (1.0 - t)
    x = x_bottom + (x_vanish - x_bottom) * t + curvature * t * t
    return np.stack([x, y], axis=1)


def _scene(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[List[np.ndarray], float]:
    n = int(rng.integers(cfg.lanes_min, cfg.lanes_max + 1))
    W = cfg.image_width
    x_vanish = W / 2.0 + rng.normal(0.0, 0.03 * W)
    curvature = rng.uniform(-cfg.curvature_max, cfg.curvature_max) if cfg.curvature_max else 0.0
    bottoms = W * (np.arange(n) + 1) / (n + 1) + rng.normal(0.0, cfg.spacing_jitter, size=n)
    return [_curve(cfg, xb, x_vanish, curvature) for xb in bottoms], x_vanish


def _noise(rng: np.random.Generator, sigma: float) -> float:
    return float(np.clip(rng.normal(0.0, sigma), -3 * sigma, 3 * sigma)) if sigma > 0 else 0.0


def _pred_lane(points: np.ndarray, confidence: float, feature: np.ndarray) -> Lane:
    c = min(1.0 - _CONF_CLAMP, max(_CONF_CLAMP, confidence))
    logits = (math.log(c / (1.0 - c)), 0.0)
    return Lane(
        points=tuple((float(x), float(y)) for x, y in points),
        confidence=lane_softmax(logits),
        logits=logits,
        feature=tuple(float(v) for v in feature),
    )


def _gt_lane(points: np.ndarray) -> Lane:
    return Lane(points=tuple((float(x), float(y)) for x, y in points))


def _frame(
        cfg: SynthConfig,
        world: _World,
        rng: np.random.Generator,
        s: float,
        segment_id: str,
        sample_id: str,
        empty: bool,
) -> Sample:
    emb = world.img_base + s * world.img_shift + rng.normal(0.0, cfg.image_noise, size=cfg.d_img)
    image_ref = f"images/{segment_id}/{sample_id}.png" if cfg.render_images else None
    if empty:
        return Sample(
            sample_id=sample_id, segment_id=segment_id, pred_lanes=(), gt_lanes=(),
            image_embedding=tuple(float(v) for v in emb + world.no_lane_dir), image_ref=image_ref,
        )

    gt, x_vanish = _scene(cfg, rng)
    sigma = cfg.jitter(s)
    tolerance = cfg.lane_stroke_width / 3.0
    preds: List[Lane] = []
    for k, pts in enumerate(gt):
        if rng.random() < cfg.p_drop(s):
            continue
        if sigma > 0:
            offset = rng.normal(0.0, sigma)
            jittered = pts.copy()
            jittered[:, 0] += offset + rng.normal(0.0, 0.3 * sigma, size=len(pts))
        else:
            offset, jittered = 0.0, pts.copy()
        badness = min(1.0, abs(offset) / tolerance)
        conf = cfg.conf_tp_base - cfg.conf_slope * s - cfg.conf_jitter_penalty * badness + _noise(rng, cfg.conf_noise)
        feature = (world.centers[k % cfg.n_clusters] + s * world.lane_shift - badness * world.quality_dir
                   + rng.normal(0.0, cfg.feature_noise, size=cfg.d_lane))
        preds.append(_pred_lane(jittered, conf, feature))

    for _ in range(int(rng.binomial(cfg.max_false_positives, cfg.p_fp(s)))):
        x_bottom = rng.uniform(0.0, cfg.image_width)
        curvature = rng.uniform(-cfg.curvature_max, cfg.curvature_max) if cfg.curvature_max else 0.0
        pts = _curve(cfg, x_bottom, x_vanish, curvature)
        conf = cfg.conf_fp_base - cfg.conf_slope * s + _noise(rng, cfg.conf_noise)
        feature = (world.centers[int(rng.integers(cfg.n_clusters))] + s * world.lane_shift + world.fp_offset
                   + rng.normal(0.0, cfg.feature_noise, size=cfg.d_lane))
        preds.append(_pred_lane(pts, conf, feature))

    sample = Sample(
        sample_id=sample_id, segment_id=segment_id,
        pred_lanes=tuple(preds), gt_lanes=tuple(_gt_lane(p) for p in gt),
        image_embedding=tuple(float(v) for v in emb), image_ref=image_ref,
    )
    return apply_confidence_threshold(sample, cfg.conf_threshold)


def generate_segment(cfg: SynthConfig, family: FamilySpec, family_index: int, segment_index: int) -> MiniDataset:
    """One segment, seeded by (master seed, family index, segment index) only."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(family_index, segment_index)))
    world = _World(cfg)
    severity = cfg.severity if family.severity is None else family.severity
    s_seg = float(np.clip(severity + _noise(rng, cfg.severity_jitter), 0.0, 1.0))
    segment_id = f"{family.name}-{segment_index:03d}"
    samples = []
    for k in range(family.frames_per_segment):
        s = float(np.clip(s_seg + _noise(rng, cfg.frame_jitter), 0.0, 1.0))
        empty = family.no_lane or rng.random() < cfg.empty_frame_rate
        samples.append(_frame(cfg, world, rng, s, segment_id, f"{segment_id}-{k:04d}", empty))
    return MiniDataset(
        dataset_id=segment_id, samples=tuple(samples), role=family.role,
        family=family.name, group=family.group,
    )


@dataclass(frozen=True)
class Corpus:
    config: SynthConfig
    segments: List[MiniDataset]
    manifest: Manifest

    @property
    def reference(self) -> np.ndarray:
        """Pooled lane features of the reference segments."""
        feats = [s.pred_features() for s in self.segments if s.role == "source_train_ref" and s.n_pred_lanes]
        return np.concatenate(feats, axis=0) if feats else np.zeros((0, self.config.d_lane))

    def with_role(self, *roles: str) -> List[MiniDataset]:
        return [s for s in self.segments if s.role in roles]


def corpus_manifest(cfg: SynthConfig, segments: List[MiniDataset], base_dir: Path = Path(".")) -> Manifest:
    return Manifest(
        image_width=cfg.image_width,
        image_height=cfg.image_height,
        d_lane=cfg.d_lane,
        d_img=cfg.d_img,
        iou_threshold=cfg.iou_threshold,
        lane_stroke_width=cfg.lane_stroke_width,
        minidataset_size=cfg.minidataset_size,
        confidence_threshold_note=cfg.conf_threshold,
        segments=[
            SegmentSpec(path=f"segments/{s.dataset_id}.jsonl", role=s.role, segment_id=s.dataset_id,
                        family=s.family, group=s.group)
            for s in segments
        ],
        base_dir=base_dir,
    )


def generate_corpus(cfg: SynthConfig) -> Corpus:
    segments = [
        generate_segment(cfg, fam, fi, si)
        for fi, fam in enumerate(cfg.resolved_families())
        for si in range(fam.n_segments)
    ]
    logger.info("generated %d segments (%d frames), seed %d",
                len(segments), sum(len(s.samples) for s in segments), cfg.seed)
    return Corpus(config=cfg, segments=segments, manifest=corpus_manifest(cfg, segments))


# ----- output -----

def render_sample(sample: Sample, cfg: SynthConfig, world: _World) -> Image.Image:
    """Flat-colour frame: background darkens with severity, ground-truth lanes in white."""
    emb = np.asarray(sample.image_embedding or (), dtype=np.float64)
    s = world.severity_of(emb) if emb.size == cfg.d_img and cfg.d_img else 0.0
    level = int(round(200 - 150 * s))
    img = Image.new("RGB", (cfg.image_width, cfg.image_height), (level // 2, level // 2, level))
    draw = ImageDraw.Draw(img)
    for lane in sample.gt_lanes or ():
        draw.line([tuple(p) for p in lane.points], fill=(255, 255, 255),
                  width=max(1, int(cfg.lane_stroke_width // 3)))
    return img


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write segments/*.jsonl, manifest.yaml and optional images; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "segments").mkdir(parents=True, exist_ok=True)
    world = _World(corpus.config) if corpus.config.render_images else None
    for seg in corpus.segments:
        atomic_write_text(out_dir / "segments" / f"{seg.dataset_id}.jsonl", dumps_segment(seg))
        if world is not None:
            for sample in seg.samples:
                target = out_dir / sample.image_ref
                target.parent.mkdir(parents=True, exist_ok=True)
                atomic_write_bytes(target, _png_bytes(render_sample(sample, corpus.config, world)))
    manifest_path = atomic_write_text(out_dir / "manifest.yaml", dump_manifest(corpus.manifest))
    OutputIndex.create(out_dir).write()
    logger.info("wrote corpus to %s", out_dir)
    return manifest_path
