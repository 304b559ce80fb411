"""
Set-regression performance estimator: a per-lane encoder with mean pooling, a
learnable default lane feature for frames without predicted lanes, image-embedding
fusion and a sigmoid regression head. Forward and backward passes are written out in
numpy (float64) so training is bit-reproducible for a given seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .audit import atomic_write_text
from .domain import Lane, MiniDataset, Sample
from .embedder import ImageEmbedder, PrecomputedEmbedder
from .errors import ArtifactError, CalibrationError, DataError, DimensionError
from .lane_eval import f1_from_counts, sample_matches, total_counts
from .log import get_logger
from .manifest import Manifest

logger = get_logger(__name__)

WEIGHTS_FORMAT = "laneperf-weights"
WEIGHTS_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "token")
DECAYED = ("W1", "W2", "W3", "W4")
# Denominator floor of the element-wise relative error in gradcheck.
GRADCHECK_FLOOR = 1e-5


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(1e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(50, ge=1)
    seed: int = 0
    h1: int = Field(128, ge=1)
    h2: int = Field(64, ge=1)
    h3: int = Field(128, ge=1)
    weight_decay: float = Field(1e-5, ge=0)
    batch_size: int = Field(8, ge=1)
    supervision: Literal["sample", "dataset"] = "sample"
    feature_mode: Literal["image+lane", "lane", "image"] = "image+lane"


@dataclass(frozen=True)
class NetworkWeights:
    params: Mapping[str, np.ndarray]
    config: TrainConfig
    d_lane: int
    d_img: int
    embedder: str = ""
    manifest_fingerprint: str = ""
    loss_curve: Tuple[float, ...] = field(default=())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.params.items()}


def expected_shapes(config: TrainConfig, d_lane: int, d_img: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "W1": (d_lane, config.h1), "b1": (config.h1,),
        "W2": (config.h1, config.h2), "b2": (config.h2,),
        "W3": (config.h2 + d_img, config.h3), "b3": (config.h3,),
        "W4": (config.h3,), "b4": (1,),
        "token": (d_lane,),
    }


def _frozen(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    out = {}
    for k in PARAM_NAMES:
        a = np.array(params[k], dtype=np.float64, copy=True)
        a.setflags(write=False)
        out[k] = a
    return out


def init_weights(config: TrainConfig, d_lane: int, d_img: int) -> NetworkWeights:
    """Fan-in scaled uniform weights, zero biases and a zero default lane feature."""
    rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config, d_lane, d_img).items():
        if name.startswith("W"):
            bound = math.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return NetworkWeights(params=_frozen(params), config=config, d_lane=d_lane, d_img=d_img)


# ----- batch assembly -----

@dataclass
class _Batch:
    X: np.ndarray  # (L, d_lane); token rows hold zeros until forward
    owner: np.ndarray  # (L,) sample index of every row
    starts: np.ndarray  # (B,) first row of every sample
    counts: np.ndarray  # (B,)
    is_token: np.ndarray  # (L,)
    E: np.ndarray  # (B, d_img)

    @property
    def size(self) -> int:
        return int(self.counts.size)


def canonical_lane_rows(sample: Sample, d_lane: int) -> np.ndarray:
    """Lane features sorted lexicographically, so the set's input order never matters."""
    if not sample.pred_lanes:
        return np.zeros((0, d_lane))
    feats = sample.lane_features()
    if feats.shape[1] != d_lane:
        raise DimensionError(f"sample {sample.sample_id}: lane feature length {feats.shape[1]} != {d_lane}")
    return feats[np.lexsort(feats.T[::-1])]


def _assemble(rows: Sequence[np.ndarray], embeddings: Sequence[np.ndarray], d_lane: int) -> _Batch:
    blocks, owner, is_token, counts = [], [], [], []
    for i, r in enumerate(rows):
        if r.shape[0] == 0:
            blocks.append(np.zeros((1, d_lane)))
            is_token.append(np.ones(1, dtype=bool))
            counts.append(1)
        else:
            blocks.append(r)
            is_token.append(np.zeros(r.shape[0], dtype=bool))
            counts.append(r.shape[0])
        owner.append(np.full(counts[-1], i))
    counts_arr = np.array(counts)
    starts = np.concatenate([[0], np.cumsum(counts_arr)[:-1]]).astype(np.intp)
    return _Batch(
        X=np.concatenate(blocks, axis=0),
        owner=np.concatenate(owner),
        starts=starts,
        counts=counts_arr,
        is_token=np.concatenate(is_token),
        E=np.stack(embeddings) if embeddings else np.zeros((0, 0)),
    )


def _embedding(sample: Sample, embedder: ImageEmbedder, d_img: int) -> np.ndarray:
    e = np.asarray(embedder.embed(sample), dtype=np.float64)
    if e.shape != (d_img,):
        raise DimensionError(f"sample {sample.sample_id}: embedding length {e.size} != network d_img {d_img}")
    return e


def prepare_batch(samples: Sequence[Sample], embedder: ImageEmbedder, d_lane: int, d_img: int) -> _Batch:
    rows = [canonical_lane_rows(s, d_lane) for s in samples]
    return _assemble(rows, [_embedding(s, embedder, d_img) for s in samples], d_lane)


# ----- forward / backward -----

def _gates(mode: str) -> Tuple[float, float]:
    return (0.0 if mode == "image" else 1.0), (0.0 if mode == "lane" else 1.0)


def _forward(p: Mapping[str, np.ndarray], batch: _Batch, mode: str) -> Dict[str, np.ndarray]:
    lane_gate, img_gate = _gates(mode)
    X = batch.X.copy()
    X[batch.is_token] = p["token"]
    Z1 = X @ p["W1"] + p["b1"]
    A1 = np.maximum(Z1, 0.0)
    Z2 = A1 @ p["W2"] + p["b2"]
    A2 = np.maximum(Z2, 0.0)
    P = np.add.reduceat(A2, batch.starts, axis=0) / batch.counts[:, None]
    H = np.concatenate([P * lane_gate, batch.E * img_gate], axis=1)
    Z3 = H @ p["W3"] + p["b3"]
    A3 = np.maximum(Z3, 0.0)
    Z4 = A3 @ p["W4"] + p["b4"][0]
    y = 1.0 / (1.0 + np.exp(-Z4))
    return {"X": X, "Z1": Z1, "A1": A1, "Z2": Z2, "A2": A2, "H": H, "Z3": Z3, "A3": A3, "y": y}


def _loss_and_grads(
        p: Mapping[str, np.ndarray],
        batch: _Batch,
        targets: np.ndarray,
        config: TrainConfig,
) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    c = _forward(p, batch, config.feature_mode)
    y = c["y"]
    B = batch.size
    if config.supervision == "dataset":
        err = float(y.mean() - targets.mean())
        data_loss = err * err
        dy = np.full(B, 2.0 * err / B)
    else:
        diff = y - targets
        data_loss = float(np.mean(diff * diff))
        dy = 2.0 * diff / B
    decay = 0.5 * config.weight_decay * sum(float(np.sum(p[k] * p[k])) for k in DECAYED)

    lane_gate, _ = _gates(config.feature_mode)
    h2 = p["W2"].shape[1]
    g: Dict[str, np.ndarray] = {}
    dZ4 = dy * y * (1.0 - y)
    g["W4"] = c["A3"].T @ dZ4
    g["b4"] = np.array([dZ4.sum()])
    dZ3 = np.outer(dZ4, p["W4"]) * (c["Z3"] > 0)
    g["W3"] = c["H"].T @ dZ3
    g["b3"] = dZ3.sum(axis=0)
    dP = (dZ3 @ p["W3"].T)[:, :h2] * lane_gate
    dZ2 = (dP / batch.counts[:, None])[batch.owner] * (c["Z2"] > 0)
    g["W2"] = c["A1"].T @ dZ2
    g["b2"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ p["W2"].T) * (c["Z1"] > 0)
    g["W1"] = c["X"].T @ dZ1
    g["b1"] = dZ1.sum(axis=0)
    g["token"] = (dZ1 @ p["W1"].T)[batch.is_token].sum(axis=0)
    for k in DECAYED:
        g[k] = g[k] + config.weight_decay * p[k]
    return data_loss + decay, {k: g[k] for k in PARAM_NAMES}, y


def _check_dims(weights: NetworkWeights, embedder: ImageEmbedder) -> None:
    if embedder.dim != weights.d_img:
        raise DimensionError(f"embedder dimension {embedder.dim} != network d_img {weights.d_img}")


def forward_sample(weights: NetworkWeights, sample: Sample, embedder: ImageEmbedder) -> float:
    _check_dims(weights, embedder)
    batch = prepare_batch([sample], embedder, weights.d_lane, weights.d_img)
    return float(_forward(weights.params, batch, weights.config.feature_mode)["y"][0])


def loss_and_gradients(
        weights: NetworkWeights,
        batch: Sequence[Tuple[Sample, float]],
        embedder: ImageEmbedder,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """MSE (plus weight decay) of the batch and the gradient of every parameter."""
    if not batch:
        raise DataError("empty batch")
    _check_dims(weights, embedder)
    targets = np.array([t for _, t in batch], dtype=np.float64)
    if np.any((targets < 0) | (targets > 1)):
        raise DataError("targets must lie in [0, 1]")
    prepared = prepare_batch([s for s, _ in batch], embedder, weights.d_lane, weights.d_img)
    loss, grads, _ = _loss_and_grads(weights.params, prepared, targets, weights.config)
    return loss, grads


def laneperf_estimate(weights: NetworkWeights, dataset: MiniDataset, embedder: ImageEmbedder) -> float:
    """Mean of the per-sample predictions over the mini-dataset."""
    if not dataset.samples:
        raise DataError("empty mini-dataset")
    scores = [forward_sample(weights, s, embedder) for s in dataset.samples]
    return math.fsum(scores) / len(scores)


# ----- training -----

def _targets(val_sets: Sequence[MiniDataset], manifest: Optional[Manifest]) -> Tuple[List[List[float]], List[float]]:
    if manifest is None:
        raise CalibrationError("laneperf: a manifest is needed to compute F1 targets")
    per_sample, per_set = [], []
    for ds in val_sets:
        matches = sample_matches(ds, manifest)
        per_sample.append([f1_from_counts(m.tp, m.fp, m.fn).f1 for m in matches])
        tot = total_counts(matches)
        per_set.append(f1_from_counts(tot.tp, tot.fp, tot.fn).f1)
    return per_sample, per_set


def train(
        val_sets: Sequence[MiniDataset],
        embedder: ImageEmbedder,
        config: TrainConfig,
        manifest: Optional[Manifest] = None,
        sample_targets: Optional[Sequence[Sequence[float]]] = None,
        dataset_targets: Optional[Sequence[float]] = None,
        d_lane: Optional[int] = None,
) -> NetworkWeights:
    """
    Gradient descent with momentum on labeled validation mini-datasets. Per-sample
    supervision shuffles all frames into batches; dataset supervision steps once per
    mini-dataset on the squared error of the mean prediction.
    """
    if not val_sets:
        raise CalibrationError("laneperf: no validation mini-datasets to train on")
    if sample_targets is None or dataset_targets is None:
        sample_targets, dataset_targets = _targets(val_sets, manifest)
    d_lane = d_lane or (manifest.d_lane if manifest else None)
    if d_lane is None:
        raise CalibrationError("laneperf: lane feature dimension unknown")

    d_img = embedder.dim
    weights = init_weights(config, d_lane, d_img)
    params = {k: v.copy() for k, v in weights.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    rows = [[canonical_lane_rows(s, d_lane) for s in ds.samples] for ds in val_sets]
    embs = [[_embedding(s, embedder, d_img) for s in ds.samples] for ds in val_sets]
    flat_rows = [r for rs in rows for r in rs]
    flat_embs = [e for es in embs for e in es]
    flat_targets = np.array([t for ts in sample_targets for t in ts], dtype=np.float64)
    full_batch = _assemble(flat_rows, flat_embs, d_lane)

    if config.supervision == "dataset":
        groups = [
            (_assemble(rows[k], embs[k], d_lane), np.full(len(rows[k]), float(dataset_targets[k])))
            for k in range(len(val_sets))
        ]
    else:
        groups = []

    def full_loss() -> float:
        if config.supervision == "dataset":
            return float(np.mean([_loss_and_grads(params, b, t, config)[0] for b, t in groups]))
        return _loss_and_grads(params, full_batch, flat_targets, config)[0]

    order_rng = np.random.default_rng([config.seed, 1])
    curve = [full_loss()]
    n = len(flat_rows)
    for epoch in range(config.epochs):
        if config.supervision == "dataset":
            steps = [groups[k] for k in order_rng.permutation(len(groups))]
        else:
            perm = order_rng.permutation(n)
            steps = []
            for lo in range(0, n, config.batch_size):
                idx = perm[lo:lo + config.batch_size]
                steps.append((
                    _assemble([flat_rows[i] for i in idx], [flat_embs[i] for i in idx], d_lane),
                    flat_targets[idx],
                ))
        for batch, targets in steps:
            _, grads, _ = _loss_and_grads(params, batch, targets, config)
            for k in PARAM_NAMES:
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * grads[k]
                params[k] = params[k] + velocity[k]
        curve.append(full_loss())
        logger.debug("laneperf epoch %d/%d loss=%.6f", epoch + 1, config.epochs, curve[-1])

    logger.info("laneperf: trained %d epochs on %d samples, loss %.5f -> %.5f",
                config.epochs, n, curve[0], curve[-1])
    return replace(weights, params=_frozen(params), embedder=embedder.name, loss_curve=tuple(curve))


# ----- gradient check -----

@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: Dict[str, float]
    tolerance: float
    draws: int

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_error.values())

    @property
    def failed_blocks(self) -> List[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]


def _random_problem(rng: np.random.Generator, draw: int):
    d_lane, d_img = 4, 3
    config = TrainConfig(
        h1=6, h2=5, h3=6, weight_decay=0.01,
        supervision="dataset" if draw % 2 else "sample",
    )
    params = {k: rng.normal(0.0, 0.8, size=s) for k, s in expected_shapes(config, d_lane, d_img).items()}
    samples = []
    for i in range(3):
        n_lanes = 0 if i == 0 else int(rng.integers(1, 4))
        lanes = tuple(
            Lane(points=((0.0, 0.0), (1.0, 1.0)), confidence=0.5, feature=tuple(rng.normal(size=d_lane).tolist()))
            for _ in range(n_lanes)
        )
        samples.append(Sample(
            sample_id=f"g{draw}-{i}", segment_id="gradcheck", pred_lanes=lanes, gt_lanes=(),
            image_embedding=tuple(rng.normal(size=d_img).tolist()),
        ))
    batch = prepare_batch(samples, PrecomputedEmbedder(d_img), d_lane, d_img)
    targets = rng.uniform(0.0, 1.0, size=3)
    return config, params, batch, targets


def _kink_margin(params, batch, config) -> float:
    c = _forward(params, batch, config.feature_mode)
    return float(min(np.abs(c[z]).min() for z in ("Z1", "Z2", "Z3")))


def gradcheck(
        seed: int = 0,
        draws: int = 100,
        tolerance: float = 1e-4,
        eps: float = 1e-5,
        corrupt_block: Optional[str] = None,
) -> GradCheckResult:
    """
    Compare analytic gradients with central finite differences over random
    (weights, batch) draws. Draws with a ReLU pre-activation closer than 1e-3 to the
    kink are redrawn. Each block reports the largest element-wise |a - n| / max(|a|, |n|,
    GRADCHECK_FLOOR) seen. `corrupt_block` perturbs one analytic block (negative control).
    """
    if corrupt_block is not None and corrupt_block not in PARAM_NAMES:
        raise ValueError(f"unknown parameter block {corrupt_block!r}")
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in PARAM_NAMES}
    for draw in range(draws):
        for _ in range(100):
            config, params, batch, targets = _random_problem(rng, draw)
            if _kink_margin(params, batch, config) > 1e-3:
                break
        _, analytic, _ = _loss_and_grads(params, batch, targets, config)
        if corrupt_block is not None:
            analytic[corrupt_block] = analytic[corrupt_block] * 1.01 + 1e-3
        for k in PARAM_NAMES:
            numeric = np.zeros_like(params[k])
            flat = params[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = _loss_and_grads(params, batch, targets, config)[0]
                flat[i] = orig - eps
                down = _loss_and_grads(params, batch, targets, config)[0]
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * eps)
            a = analytic[k]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), GRADCHECK_FLOOR)
            worst[k] = max(worst[k], float(np.max(np.abs(a - numeric) / denom)))
    return GradCheckResult(max_rel_error=worst, tolerance=tolerance, draws=draws)


# ----- persistence -----

class _TensorDoc(BaseModel):
    shape: List[int]
    data: List[float]


class _WeightsDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["laneperf-weights"]
    version: int
    seed: int
    config: TrainConfig
    d_lane: int
    d_img: int
    embedder: str
    manifest_fingerprint: str
    tensors: Dict[str, _TensorDoc]
    loss_curve: List[float]


def save_weights(weights: NetworkWeights, path: Path, fingerprint: Optional[str] = None) -> Path:
    doc = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "seed": weights.config.seed,
        "config": weights.config.model_dump(mode="json"),
        "d_lane": weights.d_lane,
        "d_img": weights.d_img,
        "embedder": weights.embedder,
        "manifest_fingerprint": fingerprint if fingerprint is not None else weights.manifest_fingerprint,
        "tensors": {
            k: {"shape": list(weights.params[k].shape), "data": weights.params[k].reshape(-1).tolist()}
            for k in PARAM_NAMES
        },
        "loss_curve": list(weights.loss_curve),
    }
    return atomic_write_text(Path(path), json.dumps(doc) + "\n")


def load_weights(
        path: Path,
        fingerprint: Optional[str] = None,
        d_lane: Optional[int] = None,
        embedder: Optional[ImageEmbedder] = None,
) -> NetworkWeights:
    """Load a weight file and validate it against the manifest and the embedder in use."""
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"weights not found: {path}")
    try:
        doc = _WeightsDoc.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ArtifactError(f"{path}: not a weight file: {e.errors()[0]['msg']}") from e
    if doc.version != WEIGHTS_VERSION:
        raise ArtifactError(f"{path}: unsupported weights version {doc.version}")
    if fingerprint is not None and doc.manifest_fingerprint != fingerprint:
        raise ArtifactError(f"{path}: manifest fingerprint mismatch; refusing to apply")
    if d_lane is not None and doc.d_lane != d_lane:
        raise ArtifactError(f"{path}: trained for d_lane={doc.d_lane}, manifest declares {d_lane}")
    if embedder is not None and (doc.embedder != embedder.name or doc.d_img != embedder.dim):
        raise ArtifactError(
            f"{path}: trained with the {doc.embedder} embedder (d_img={doc.d_img}), "
            f"got {embedder.name} (d_img={embedder.dim})")

    expected = expected_shapes(doc.config, doc.d_lane, doc.d_img)
    params = {}
    for k in PARAM_NAMES:
        t = doc.tensors.get(k)
        if t is None or tuple(t.shape) != expected[k] or len(t.data) != int(np.prod(expected[k])):
            raise ArtifactError(f"{path}: tensor {k} missing or has the wrong shape")
        params[k] = np.array(t.data, dtype=np.float64).reshape(expected[k])
    return NetworkWeights(
        params=_frozen(params), config=doc.config, d_lane=doc.d_lane, d_img=doc.d_img,
        embedder=doc.embedder, manifest_fingerprint=doc.manifest_fingerprint,
        loss_curve=tuple(doc.loss_curve),
    )
