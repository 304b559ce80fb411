from __future__ import annotations

import math
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

Point = Tuple[float, float]
Role = Literal["source_train_ref", "source_val", "target"]
ROLES: Tuple[str, ...] = ("source_train_ref", "source_val", "target")

CONFIDENCE_TOLERANCE = 1e-6


def lane_softmax(logits: Tuple[float, float]) -> float:
    """Softmax probability of the lane class for a (f_lane, f_background) pair."""
    a, b = logits
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb)


def _all_finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


class Lane(BaseModel):
    """
    A predicted or ground-truth lane instance. Ground-truth lanes carry only points;
    predicted lanes carry confidence and feature, logits are optional.
    """
    model_config = ConfigDict(frozen=True)

    points: Tuple[Point, ...]
    confidence: Optional[float] = None
    logits: Optional[Tuple[float, float]] = None
    feature: Optional[Tuple[float, ...]] = None

    @field_validator("points")
    @classmethod
    def _check_points(cls, v: Tuple[Point, ...]) -> Tuple[Point, ...]:
        if len(v) < 2:
            raise ValueError("a lane needs at least 2 points")
        if not all(_all_finite(p) for p in v):
            raise ValueError("lane points must be finite")
        return v

    @field_validator("confidence")
    @classmethod
    def _check_confidence(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not (0.0 <= v <= 1.0):
            raise ValueError(f"confidence {v} outside [0, 1]")
        return v

    @field_validator("logits", "feature")
    @classmethod
    def _check_finite(cls, v):
        if v is not None and not _all_finite(v):
            raise ValueError("values must be finite")
        return v

    def points_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)


class Sample(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: str
    segment_id: str
    pred_lanes: Tuple[Lane, ...] = ()
    gt_lanes: Optional[Tuple[Lane, ...]] = None  # None = unlabeled
    image_embedding: Optional[Tuple[float, ...]] = None
    image_ref: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.gt_lanes is not None

    def lane_features(self) -> np.ndarray:
        if not self.pred_lanes:
            return np.zeros((0, 0), dtype=np.float64)
        return np.array([ln.feature for ln in self.pred_lanes], dtype=np.float64)


class MiniDataset(BaseModel):
    """Ordered run of consecutive frames from one segment; the unit of estimation."""
    model_config = ConfigDict(frozen=True)

    dataset_id: str
    samples: Tuple[Sample, ...] = Field(..., min_length=1)
    role: Role = "target"
    family: str = "target"
    group: str = "all"

    @property
    def labeled(self) -> bool:
        return all(s.labeled for s in self.samples)

    @property
    def n_pred_lanes(self) -> int:
        return sum(len(s.pred_lanes) for s in self.samples)

    def pred_lanes(self) -> list[Lane]:
        return [ln for s in self.samples for ln in s.pred_lanes]

    def pred_confidences(self) -> np.ndarray:
        return np.array([ln.confidence for ln in self.pred_lanes()], dtype=np.float64)

    def pred_features(self) -> np.ndarray:
        lanes = self.pred_lanes()
        if not lanes:
            return np.zeros((0, 0), dtype=np.float64)
        return np.array([ln.feature for ln in lanes], dtype=np.float64)
