from __future__ import annotations

from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image, UnidentifiedImageError

from .domain import Sample
from .errors import DataError, DimensionError
from .log import get_logger

logger = get_logger(__name__)

BUILTIN_DIM = 88
_GRID = 8
_BINS = 8


# ----- Embedder protocol -----

class ImageEmbedder(Protocol):
    name: str
    dim: int

    def embed(self, sample: Sample) -> np.ndarray:
        """Deterministic fixed-length image vector for one sample."""


# ----- Precomputed vectors shipped inside the records -----

class PrecomputedEmbedder:
    name = "precomputed"

    def __init__(self, dim: int):
        self.dim = dim

    def embed(self, sample: Sample) -> np.ndarray:
        if sample.image_embedding is None:
            if self.dim == 0:
                return np.zeros(0)
            raise DataError(f"sample {sample.sample_id} has no precomputed image_embedding")
        v = np.asarray(sample.image_embedding, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"sample {sample.sample_id}: embedding length {v.size} != {self.dim}")
        return v


# ----- Handcrafted image statistics -----

def _l2(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def embed_image(img: Image.Image) -> np.ndarray:
    """
    8x8 mean-pooled grayscale (64) followed by 8-bin per-channel colour histograms (24);
    each of the two blocks is L2-normalized.
    """
    rgb = img.convert("RGB")
    gray = np.asarray(rgb.convert("L"), dtype=np.float64)
    h, w = gray.shape
    rows = np.array_split(np.arange(h), _GRID)
    cols = np.array_split(np.arange(w), _GRID)
    pooled = np.array([[gray[np.ix_(r, c)].mean() if r.size and c.size else 0.0 for c in cols] for r in rows])

    pixels = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    hist = np.concatenate([
        np.histogram(pixels[:, ch], bins=_BINS, range=(0, 256))[0] for ch in range(3)
    ]).astype(np.float64)
    return np.concatenate([_l2(pooled.ravel() / 255.0), _l2(hist / max(len(pixels), 1))])


class BuiltinEmbedder:
    """
    Image statistics for self-contained runs. Samples without an image_ref embed to
    the zero vector.
    """
    name = "builtin"
    dim = BUILTIN_DIM

    def __init__(self, image_root: Path = Path(".")):
        self.image_root = Path(image_root)
        self._missing = 0

    def _resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.image_root / p

    def embed(self, sample: Sample) -> np.ndarray:
        if not sample.image_ref:
            self._missing += 1
            log = logger.warning if self._missing == 1 else logger.debug
            log("sample %s has no image; using a zero embedding", sample.sample_id)
            return np.zeros(BUILTIN_DIM)
        path = self._resolve(sample.image_ref)
        try:
            with Image.open(path) as img:
                return embed_image(img)
        except (OSError, UnidentifiedImageError) as e:
            raise DataError(f"unreadable image {path}: {e}") from e


def make_embedder(kind: str, d_img: int, image_root: Path = Path(".")) -> ImageEmbedder:
    if kind == "precomputed":
        return PrecomputedEmbedder(d_img)
    if kind == "builtin":
        return BuiltinEmbedder(image_root)
    raise ValueError(f"unknown embedder {kind!r} (builtin | precomputed)")
