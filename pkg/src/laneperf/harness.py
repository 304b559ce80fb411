"""
Calibration protocol and benchmark runner: fit every estimator on labeled source
validation mini-datasets, then score each one against the actual F1 of labeled
target mini-datasets with MAE and Spearman's rank correlation.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import spearmanr
from sklearn.metrics import mean_absolute_error

from .audit import sha256_text
from .domain import MiniDataset
from .embedder import ImageEmbedder
from .errors import ArtifactError, CalibrationError, ConsistencyError, DataError, NumericalError
from .estimators import (
    CalibrationArtifact,
    ac_estimate,
    atc_estimate,
    atc_fit,
    doc_calibrate,
    doc_estimate,
    ebm_calibrate,
    ebm_estimate,
    fid_calibrate,
    fid_estimate,
)
from .lane_eval import MatchResult, f1_from_counts, is_vacuous, sample_matches, total_counts
from .log import get_logger
from .manifest import Manifest
from .network import NetworkWeights, TrainConfig, laneperf_estimate, train

logger = get_logger(__name__)

METHODS: Tuple[str, ...] = ("ac", "doc", "atc", "fid", "ebm", "laneperf")
CALIBRATED: Tuple[str, ...] = ("doc", "atc", "fid", "ebm", "laneperf")
DISPLAY_NAMES: Dict[str, str] = {
    "ac": "AC", "doc": "DoC", "atc": "ATC", "fid": "FID", "ebm": "EBM", "laneperf": "LanePerf",
}

FLAG_RHO_CONSTANT = "rho-constant"
FLAG_VACUOUS = "vacuous-f1"

Estimator = Callable[[MiniDataset], float]


# ----- metrics -----

def _pair(actual: Sequence[float], estimated: Sequence[float], minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    e = np.asarray(estimated, dtype=np.float64).ravel()
    if a.size != e.size:
        raise DataError(f"length mismatch: {a.size} actual vs {e.size} estimated")
    if a.size < minimum:
        raise DataError(f"need at least {minimum} values, got {a.size}")
    return a, e


def mae(actual: Sequence[float], estimated: Sequence[float]) -> float:
    a, e = _pair(actual, estimated, 1)
    return float(mean_absolute_error(a, e))


class RankCorrelation(NamedTuple):
    rho: float
    constant: bool


def spearman(actual: Sequence[float], estimated: Sequence[float]) -> RankCorrelation:
    """Spearman's rho with average ranks for ties; a constant input yields 0 and the flag."""
    a, e = _pair(actual, estimated, 2)
    if np.ptp(a) == 0 or np.ptp(e) == 0:
        logger.warning("spearman rho undefined for a constant vector; reporting 0")
        return RankCorrelation(0.0, True)
    rho = float(spearmanr(a, e).statistic)
    return RankCorrelation(float(np.clip(rho, -1.0, 1.0)), False)


def spearman_rho(actual: Sequence[float], estimated: Sequence[float]) -> float:
    return spearman(actual, estimated).rho


# ----- calibration -----

@dataclass(frozen=True)
class ScoredSet:
    """A labeled mini-dataset with its per-sample and pooled F1."""
    dataset: MiniDataset
    counts: MatchResult
    sample_f1: Tuple[float, ...]

    @property
    def f1(self) -> float:
        return f1_from_counts(self.counts.tp, self.counts.fp, self.counts.fn).f1

    @property
    def vacuous(self) -> bool:
        return is_vacuous(self.counts)


def score_set(dataset: MiniDataset, manifest: Manifest) -> ScoredSet:
    matches = sample_matches(dataset, manifest)
    return ScoredSet(
        dataset=dataset,
        counts=total_counts(matches),
        sample_f1=tuple(f1_from_counts(m.tp, m.fp, m.fn).f1 for m in matches),
    )


def score_sets(datasets: Sequence[MiniDataset], manifest: Manifest, workers: int = 1) -> List[ScoredSet]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda ds: score_set(ds, manifest), datasets))
    return [score_set(ds, manifest) for ds in datasets]


@dataclass
class CalibrationResult:
    artifacts: Dict[str, CalibrationArtifact] = field(default_factory=dict)
    weights: Optional[NetworkWeights] = None
    failures: Dict[str, str] = field(default_factory=dict)
    val_scores: List[ScoredSet] = field(default_factory=list)

    def succeeded(self) -> List[str]:
        out = sorted(self.artifacts, key=METHODS.index)
        if self.weights is not None:
            out.append("laneperf")
        return out


def calibrate_all(
        val_sets: Sequence[MiniDataset],
        reference: np.ndarray,
        embedder: ImageEmbedder,
        manifest: Manifest,
        config: TrainConfig = TrainConfig(),
        methods: Sequence[str] = METHODS,
) -> CalibrationResult:
    """
    Fit every requested method on the labeled validation mini-datasets. A method whose
    preconditions fail is recorded in `failures`; the others still run.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s): {', '.join(unknown)}")
    scored = score_sets(val_sets, manifest)
    pairs = [(s.dataset, s.f1) for s in scored]
    fingerprint = manifest.fingerprint()
    result = CalibrationResult(val_scores=scored)

    fitters: Dict[str, Callable[[], CalibrationArtifact]] = {
        "doc": lambda: doc_calibrate(pairs),
        "atc": lambda: atc_fit(pairs),
        "fid": lambda: fid_calibrate(reference, pairs, ddof=manifest.covariance_ddof),
        "ebm": lambda: ebm_calibrate(pairs),
    }
    for method in methods:
        try:
            if method == "ac":
                continue
            if method == "laneperf":
                weights = train(
                    val_sets, embedder, config,
                    sample_targets=[s.sample_f1 for s in scored],
                    dataset_targets=[s.f1 for s in scored],
                    d_lane=manifest.d_lane,
                )
                result.weights = replace(weights, manifest_fingerprint=fingerprint)
                continue
            artifact = fitters[method]()
            result.artifacts[method] = artifact.model_copy(update={"manifest_fingerprint": fingerprint})
        except (CalibrationError, DataError, NumericalError) as e:
            result.failures[method] = str(e)
            logger.error("%s calibration failed: %s", DISPLAY_NAMES[method], e)
    return result


# ----- estimators -----

def build_estimators(
        methods: Sequence[str],
        artifacts: Mapping[str, CalibrationArtifact],
        weights: Optional[NetworkWeights] = None,
        embedder: Optional[ImageEmbedder] = None,
        ddof: int = 0,
) -> Tuple[Dict[str, Estimator], Dict[str, str]]:
    """Bind each method to its artifact; methods without one come back as failures."""
    estimators: Dict[str, Estimator] = {}
    failures: Dict[str, str] = {}
    for method in methods:
        if method == "ac":
            estimators[method] = ac_estimate
        elif method == "laneperf":
            if weights is None or embedder is None:
                failures[method] = "missing weights for method laneperf"
                continue
            logger.info("LanePerf: mini-dataset estimate is the mean of per-sample predictions")
            estimators[method] = lambda ds, w=weights, emb=embedder: laneperf_estimate(w, ds, emb)
        elif method in artifacts:
            art = artifacts[method]
            estimators[method] = {
                "doc": lambda ds, a=art: doc_estimate(ds, a),
                "atc": lambda ds, a=art: atc_estimate(ds, a),
                "fid": lambda ds, a=art: fid_estimate(ds, a, ddof=ddof),
                "ebm": lambda ds, a=art: ebm_estimate(ds, a),
            }[method]
        elif method in METHODS:
            failures[method] = f"missing artifact for method {method}"
        else:
            raise ValueError(f"unknown method {method!r}")
    return estimators, failures


# ----- report -----

class ReportRow(BaseModel):
    method: str
    dataset_id: str
    family: str
    group: str
    actual_f1: float
    estimated_f1: float
    abs_error: float
    vacuous: bool = False


class MethodAggregate(BaseModel):
    method: str
    mae: float
    rho: float = Field(..., ge=-1.0, le=1.0)
    n: int
    flags: List[str] = Field(default_factory=list)


class EvalReport(BaseModel):
    rows: List[ReportRow]
    aggregates: Dict[str, MethodAggregate]
    failures: Dict[str, str] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @property
    def methods(self) -> List[str]:
        return list(self.aggregates)

    def rows_for(self, method: str) -> List[ReportRow]:
        return [r for r in self.rows if r.method == method]

    def check_consistency(self) -> None:
        """Aggregates must recompute exactly from the rows."""
        for method, agg in self.aggregates.items():
            rows = self.rows_for(method)
            if len(rows) != agg.n:
                raise ConsistencyError(f"{method}: {agg.n} aggregated rows, {len(rows)} present")
            recomputed = math.fsum(r.abs_error for r in rows) / len(rows)
            if abs(recomputed - agg.mae) > 1e-12:
                raise ConsistencyError(f"{method}: MAE {agg.mae!r} != mean row error {recomputed!r}")
            if not -1.0 <= agg.rho <= 1.0:
                raise ConsistencyError(f"{method}: rho {agg.rho} outside [-1, 1]")


def _aggregate(method: str, rows: List[ReportRow]) -> MethodAggregate:
    actual = [r.actual_f1 for r in rows]
    est = [r.estimated_f1 for r in rows]
    flags: List[str] = []
    if len(rows) >= 2:
        corr = spearman(actual, est)
        if corr.constant:
            flags.append(FLAG_RHO_CONSTANT)
        rho = corr.rho
    else:
        flags.append(FLAG_RHO_CONSTANT)
        rho = 0.0
    if any(r.vacuous for r in rows):
        flags.append(FLAG_VACUOUS)
    return MethodAggregate(
        method=method,
        mae=math.fsum(r.abs_error for r in rows) / len(rows),
        rho=rho,
        n=len(rows),
        flags=flags,
    )


def artifact_digest(artifact: CalibrationArtifact) -> str:
    return sha256_text(json.dumps(artifact.model_dump(mode="json"), sort_keys=True))


def weights_digest(weights: NetworkWeights) -> str:
    return sha256_text(json.dumps({k: v.ravel().tolist() for k, v in weights.params.items()}, sort_keys=True))


def run_benchmark(
        target_sets: Sequence[MiniDataset],
        artifacts: Mapping[str, CalibrationArtifact],
        manifest: Manifest,
        methods: Sequence[str] = METHODS,
        weights: Optional[NetworkWeights] = None,
        embedder: Optional[ImageEmbedder] = None,
        extra_estimators: Optional[Mapping[str, Estimator]] = None,
        seed: Optional[int] = None,
        workers: int = 1,
) -> EvalReport:
    """
    Estimate every labeled target mini-dataset with every method and compare against
    its actual F1. Target order does not affect the report: rows are sorted by
    dataset id. Methods lacking an artifact, or raising DataError on a target, are
    listed under `failures`.
    """
    if not target_sets:
        raise DataError("no target mini-datasets to benchmark")
    estimators, failures = build_estimators(methods, artifacts, weights, embedder, manifest.covariance_ddof)
    estimators.update(extra_estimators or {})
    for method, reason in failures.items():
        logger.error("%s: %s", DISPLAY_NAMES.get(method, method), reason)
    if not estimators:
        raise ArtifactError("no requested method has an artifact: " + "; ".join(failures.values()))

    ordered = sorted(target_sets, key=lambda ds: ds.dataset_id)
    scored = score_sets(ordered, manifest, workers)

    rows: List[ReportRow] = []
    aggregates: Dict[str, MethodAggregate] = {}
    for method, estimate in estimators.items():
        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    estimates = list(pool.map(estimate, ordered))
            else:
                estimates = [estimate(ds) for ds in ordered]
        except DataError as e:
            failures[method] = str(e)
            logger.error("%s: %s", DISPLAY_NAMES.get(method, method), e)
            continue
        method_rows = []
        for s, est in zip(scored, estimates):
            est = float(est)
            if not 0.0 <= est <= 1.0:
                raise NumericalError(f"{method}: estimate {est} for {s.dataset.dataset_id} outside [0, 1]")
            actual = s.f1
            method_rows.append(ReportRow(
                method=method, dataset_id=s.dataset.dataset_id, family=s.dataset.family,
                group=s.dataset.group, actual_f1=actual, estimated_f1=est,
                abs_error=abs(actual - est), vacuous=s.vacuous,
            ))
        rows.extend(method_rows)
        aggregates[method] = _aggregate(method, method_rows)
        logger.info("%s: MAE=%.4f rho=%.4f", DISPLAY_NAMES.get(method, method),
                    aggregates[method].mae, aggregates[method].rho)

    if not aggregates:
        raise DataError("every method failed: " + "; ".join(f"{m}: {r}" for m, r in failures.items()))
    digests = {m: artifact_digest(a) for m, a in sorted(artifacts.items()) if m in aggregates}
    if weights is not None and "laneperf" in aggregates:
        digests["laneperf"] = weights_digest(weights)
    report = EvalReport(
        rows=rows,
        aggregates=aggregates,
        failures=failures,
        metadata={
            "manifest_fingerprint": manifest.fingerprint(),
            "seed": seed,
            "artifacts": digests,
            "n_targets": len(ordered),
        },
    )
    report.check_consistency()
    return report
