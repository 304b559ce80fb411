"""
Baseline performance estimators: average confidence (AC), difference of confidence
(DOC), average thresholded confidence (ATC), Fréchet feature distance (FID) and
energy (EBM). Every estimate is clamped to [0, 1]. AC, ATC, FID and EBM estimate a
mini-dataset without any predicted lane as 0; DOC falls back to its offset.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.special import logsumexp

from .audit import atomic_write_text
from .domain import Lane, MiniDataset
from .errors import ArtifactError, CalibrationError, DataError
from .log import get_logger
from .numerics import GaussianStats, LinearFit, fit_linear_regression, frechet_distance, gaussian_stats

logger = get_logger(__name__)

ARTIFACT_FORMAT = "laneperf-calibration"
ARTIFACT_VERSION = 1
EBM_TEMPERATURES = np.geomspace(0.1, 10.0, 25)

ValSet = Tuple[MiniDataset, float]


class DocPayload(BaseModel):
    model_config = ConfigDict(frozen=True)
    method: Literal["doc"] = "doc"
    offset: float


class AtcPayload(BaseModel):
    model_config = ConfigDict(frozen=True)
    method: Literal["atc"] = "atc"
    threshold: float


class FidPayload(BaseModel):
    model_config = ConfigDict(frozen=True)
    method: Literal["fid"] = "fid"
    mu: List[float]
    sigma: List[List[float]]
    n: int
    slope: float
    intercept: float

    def reference(self) -> GaussianStats:
        return GaussianStats(mu=np.array(self.mu), sigma=np.array(self.sigma), n=self.n)


class EbmPayload(BaseModel):
    model_config = ConfigDict(frozen=True)
    method: Literal["ebm"] = "ebm"
    temperature: float = Field(..., gt=0)
    slope: float
    intercept: float
    residual: float = 0.0


Payload = Annotated[Union[DocPayload, AtcPayload, FidPayload, EbmPayload], Field(discriminator="method")]


class CalibrationArtifact(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: Literal["laneperf-calibration"] = ARTIFACT_FORMAT
    version: int = ARTIFACT_VERSION
    method: str
    payload: Payload
    manifest_fingerprint: str = ""
    n_val_sets: int = 0


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _require(artifact: CalibrationArtifact, payload_type: type) -> BaseModel:
    if not isinstance(artifact.payload, payload_type):
        raise ArtifactError(f"expected a {payload_type.__name__[:3].upper()} artifact, got {artifact.method!r}")
    return artifact.payload


def _check_val_sets(val_sets: Sequence[ValSet], minimum: int, method: str) -> None:
    if len(val_sets) < minimum:
        raise CalibrationError(f"{method}: needs >= {minimum} validation mini-datasets, got {len(val_sets)}")


# ----- AC -----

def ac_estimate(dataset: MiniDataset) -> float:
    conf = dataset.pred_confidences()
    if conf.size == 0:
        return 0.0
    return float(conf.mean())


# ----- DOC -----

def doc_calibrate(val_sets: Sequence[ValSet]) -> CalibrationArtifact:
    _check_val_sets(val_sets, 1, "doc")
    offsets = [f1 - ac_estimate(ds) for ds, f1 in val_sets]
    offset = float(np.mean(offsets))
    logger.info("doc: offset=%.6f over %d validation sets", offset, len(val_sets))
    return CalibrationArtifact(method="doc", payload=DocPayload(offset=offset), n_val_sets=len(val_sets))


def doc_estimate(dataset: MiniDataset, artifact: CalibrationArtifact) -> float:
    payload = _require(artifact, DocPayload)
    return _clamp01(ac_estimate(dataset) + payload.offset)


# ----- ATC -----

def _atc_objective(sorted_confs: Sequence[np.ndarray], f1s: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Summed |fraction of confidences > t - F1| for every candidate t."""
    total = np.zeros(candidates.size, dtype=np.float64)
    for confs, f1 in zip(sorted_confs, f1s):
        if confs.size == 0:
            frac = np.zeros(candidates.size)
        else:
            above = confs.size - np.searchsorted(confs, candidates, side="right")
            frac = above / confs.size
        total += np.abs(frac - f1)
    return total


def atc_fit(val_sets: Sequence[ValSet]) -> CalibrationArtifact:
    _check_val_sets(val_sets, 1, "atc")
    sorted_confs = [np.sort(ds.pred_confidences()) for ds, _ in val_sets]
    pooled = np.concatenate(sorted_confs)
    if pooled.size == 0:
        raise CalibrationError("atc: no predicted lanes in the validation sets")
    candidates = np.unique(np.concatenate([[0.0], pooled]))
    objective = _atc_objective(sorted_confs, np.array([f1 for _, f1 in val_sets]), candidates)
    t = float(candidates[int(np.argmin(objective))])  # first minimum = smallest t
    logger.info("atc: threshold=%.6f objective=%.6f (%d candidates)", t, objective.min(), candidates.size)
    return CalibrationArtifact(method="atc", payload=AtcPayload(threshold=t), n_val_sets=len(val_sets))


def atc_estimate(dataset: MiniDataset, artifact: CalibrationArtifact) -> float:
    payload = _require(artifact, AtcPayload)
    conf = dataset.pred_confidences()
    if conf.size == 0:
        return 0.0
    return float(np.count_nonzero(conf > payload.threshold) / conf.size)


# ----- FID -----

def reference_features(datasets: Sequence[MiniDataset]) -> np.ndarray:
    feats = [ds.pred_features() for ds in datasets if ds.n_pred_lanes]
    if not feats:
        return np.zeros((0, 0))
    return np.concatenate(feats, axis=0)


def fid_calibrate(reference: np.ndarray, val_sets: Sequence[ValSet], ddof: int = 0) -> CalibrationArtifact:
    reference = np.asarray(reference, dtype=np.float64)
    n_ref = reference.shape[0] if reference.ndim == 2 else 0
    if n_ref <= 1:
        raise CalibrationError(f"fid: reference corpus has {n_ref} lane features, need more than 1")
    if n_ref < reference.shape[1] + 1:
        logger.warning("fid: reference has %d features for dimension %d; covariance is rank deficient",
                       n_ref, reference.shape[1])
    usable = [(ds, f1) for ds, f1 in val_sets if ds.n_pred_lanes > 0]
    if len(usable) < len(val_sets):
        logger.warning("fid: skipping %d validation sets without predicted lanes", len(val_sets) - len(usable))
    _check_val_sets(usable, 2, "fid")

    ref_stats = gaussian_stats(reference, ddof=ddof)
    dists = [frechet_distance(ref_stats, gaussian_stats(ds.pred_features(), ddof=ddof)) for ds, _ in usable]
    fit = fit_linear_regression(dists, [f1 for _, f1 in usable])
    logger.info("fid: slope=%.6g intercept=%.6f over %d validation sets", fit.slope, fit.intercept, len(usable))
    payload = FidPayload(
        mu=ref_stats.mu.tolist(), sigma=ref_stats.sigma.tolist(), n=ref_stats.n,
        slope=fit.slope, intercept=fit.intercept,
    )
    return CalibrationArtifact(method="fid", payload=payload, n_val_sets=len(usable))


def fid_estimate(dataset: MiniDataset, artifact: CalibrationArtifact, ddof: int = 0) -> float:
    payload = _require(artifact, FidPayload)
    if dataset.n_pred_lanes == 0:
        return 0.0
    dist = frechet_distance(payload.reference(), gaussian_stats(dataset.pred_features(), ddof=ddof))
    return _clamp01(LinearFit(payload.slope, payload.intercept).predict(dist))


# ----- EBM -----

def energy_score(lane: Lane, T: float) -> float:
    """-T * log(sum_j exp(f_j / T)) over the (lane, background) logits."""
    if lane.logits is None:
        raise DataError("energy score needs lane logits")
    if T <= 0:
        raise ValueError("temperature must be > 0")
    return float(-T * logsumexp(np.asarray(lane.logits, dtype=np.float64) / T))


def _logits(dataset: MiniDataset) -> np.ndarray:
    lanes = dataset.pred_lanes()
    if any(ln.logits is None for ln in lanes):
        raise DataError(f"{dataset.dataset_id}: energy needs logits on every predicted lane")
    return np.array([ln.logits for ln in lanes], dtype=np.float64).reshape(-1, 2)


def mean_energy(dataset: MiniDataset, T: float) -> float:
    logits = _logits(dataset)
    return float(np.mean(-T * logsumexp(logits / T, axis=1)))


def ebm_calibrate(val_sets: Sequence[ValSet], temperatures: Sequence[float] = EBM_TEMPERATURES) -> CalibrationArtifact:
    usable = [(ds, f1) for ds, f1 in val_sets if ds.n_pred_lanes > 0]
    if not usable:
        raise CalibrationError("ebm: no predicted lanes in the validation sets")
    if len(usable) < len(val_sets):
        logger.warning("ebm: skipping %d validation sets without predicted lanes", len(val_sets) - len(usable))
    _check_val_sets(usable, 2, "ebm")

    logits = [_logits(ds) for ds, _ in usable]
    f1s = np.array([f1 for _, f1 in usable])
    best: tuple[float, float, LinearFit] | None = None
    for T in temperatures:
        energies = [float(np.mean(-T * logsumexp(lg / T, axis=1))) for lg in logits]
        fit = fit_linear_regression(energies, f1s)
        residual = float(np.sum((f1s - (fit.slope * np.array(energies) + fit.intercept)) ** 2))
        if best is None or residual < best[1]:
            best = (float(T), residual, fit)
    T, residual, fit = best
    logger.info("ebm: T=%.4g slope=%.6g intercept=%.6f residual=%.3g", T, fit.slope, fit.intercept, residual)
    payload = EbmPayload(temperature=T, slope=fit.slope, intercept=fit.intercept, residual=residual)
    return CalibrationArtifact(method="ebm", payload=payload, n_val_sets=len(usable))


def ebm_estimate(dataset: MiniDataset, artifact: CalibrationArtifact) -> float:
    payload = _require(artifact, EbmPayload)
    if dataset.n_pred_lanes == 0:
        return 0.0
    energy = mean_energy(dataset, payload.temperature)
    return _clamp01(LinearFit(payload.slope, payload.intercept).predict(energy))


# ----- persistence -----

def save_artifact(artifact: CalibrationArtifact, path: Path, fingerprint: str | None = None) -> Path:
    if fingerprint is not None:
        artifact = artifact.model_copy(update={"manifest_fingerprint": fingerprint})
    return atomic_write_text(Path(path), json.dumps(artifact.model_dump(mode="json"), indent=2) + "\n")


def load_artifact(path: Path, fingerprint: str | None = None) -> CalibrationArtifact:
    """Load an artifact; refuse it when its manifest fingerprint differs from `fingerprint`."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    try:
        artifact = CalibrationArtifact.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ArtifactError(f"{path}: not a calibration artifact: {e.errors()[0]['msg']}") from e
    if artifact.version != ARTIFACT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {artifact.version}")
    if artifact.method != artifact.payload.method:
        raise ArtifactError(f"{path}: method {artifact.method!r} does not match payload")
    if fingerprint is not None and artifact.manifest_fingerprint != fingerprint:
        raise ArtifactError(
            f"{path}: manifest fingerprint mismatch (artifact {artifact.manifest_fingerprint[:12] or '<none>'}, "
            f"manifest {fingerprint[:12]}); refusing to apply")
    return artifact
