from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .audit import sha256_text
from .domain import Role
from .errors import ManifestError

# Fields that change what a fitted artifact means; segment lists and chunk size do not.
_FINGERPRINT_FIELDS = (
    "image_width", "image_height", "d_lane", "d_img",
    "iou_threshold", "lane_stroke_width", "covariance_ddof",
)


class SegmentSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: str
    role: Role
    segment_id: Optional[str] = None  # defaults to the file stem
    family: Optional[str] = None  # target-domain name, defaults to the role
    group: str = "all"  # domain-shift type (scene / weather / hours ...)
    d_lane: Optional[int] = None
    d_img: Optional[int] = None

    @property
    def resolved_id(self) -> str:
        return self.segment_id or Path(self.path).stem

    @property
    def resolved_family(self) -> str:
        return self.family or self.role


class Manifest(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_width: int = Field(..., gt=0, description="Canvas width in pixels")
    image_height: int = Field(..., gt=0, description="Canvas height in pixels")
    d_lane: int = Field(..., ge=1, description="Lane feature dimension")
    d_img: int = Field(0, ge=0, description="Precomputed image-embedding dimension")
    iou_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    lane_stroke_width: float = Field(30.0, ge=1.0, description="Rasterization stroke, pixels")
    minidataset_size: int = Field(200, ge=1)
    confidence_threshold_note: float = Field(0.4, ge=0.0, le=1.0)
    covariance_ddof: Literal[0, 1] = 0
    segments: List[SegmentSpec] = Field(default_factory=list)
    base_dir: Path = Field(default=Path("."), exclude=True)

    @model_validator(mode="after")
    def _check_segment_dimensions(self) -> "Manifest":
        for i, seg in enumerate(self.segments):
            if seg.d_lane is not None and seg.d_lane != self.d_lane:
                raise ValueError(f"segments.{i}: d_lane={seg.d_lane} inconsistent with manifest d_lane={self.d_lane}")
            if seg.d_img is not None and seg.d_img != self.d_img:
                raise ValueError(f"segments.{i}: d_img={seg.d_img} inconsistent with manifest d_img={self.d_img}")
        ids = [s.resolved_id for s in self.segments]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate segment ids: {', '.join(dupes)}")
        return self

    @property
    def canvas(self) -> tuple[int, int]:
        return self.image_width, self.image_height

    def segment_path(self, seg: SegmentSpec) -> Path:
        p = Path(seg.path)
        return p if p.is_absolute() else self.base_dir / p

    def segments_with_role(self, *roles: str) -> List[SegmentSpec]:
        return [s for s in self.segments if s.role in roles]

    def fingerprint(self) -> str:
        payload = {k: getattr(self, k) for k in _FINGERPRINT_FIELDS}
        return sha256_text(json.dumps(payload, sort_keys=True))

    def with_minidataset_size(self, size: Optional[int]) -> "Manifest":
        if size is None:
            return self
        if size < 1:
            raise ManifestError("minidataset_size: must be >= 1")
        return self.model_copy(update={"minidataset_size": size})


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def manifest_from_dict(data: Dict[str, Any], base_dir: Path = Path(".")) -> Manifest:
    try:
        return Manifest.model_validate({**data, "base_dir": base_dir})
    except ValidationError as e:
        raise ManifestError(f"schema violation: {_format_validation_error(e)}") from e


def parse_manifest(path: Path) -> Manifest:
    """
    Load and validate a manifest YAML file. Relative segment paths resolve against
    the manifest's own directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ManifestError(f"manifest is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError("manifest YAML must map to a dictionary at the top level.")
    if "base_dir" in data:
        raise ManifestError("schema violation: base_dir: not a manifest field")
    return manifest_from_dict(data, base_dir=path.parent)


def dump_manifest(manifest: Manifest) -> str:
    data = manifest.model_dump(mode="json", exclude_none=True)
    return yaml.safe_dump(data, sort_keys=False)
