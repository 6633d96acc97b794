"""Initial pseudo labels from image-text similarity.

Pipeline per image: softmax over class cosines for the whole image
(global), the same per k x k snippet (local), a min-max reduction of the
local vectors (aggregate), and the mean of global and aggregate (final).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EncoderBackend, TextEmbeddingTable
from .errors import ConfigError, InputError, NumericError

KINDS = ("global", "local", "aggregate", "final")


@dataclass(frozen=True, eq=False)
class SimilarityVector:
    scores: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown similarity kind {self.kind!r}")
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise InputError(f"similarity scores must be 1-D, got shape {scores.shape}")
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return self.scores.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)


@dataclass(frozen=True)
class AggregatorParams:
    zeta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError(f"zeta must lie in [0, 1], got {self.zeta}")


@dataclass(frozen=True)
class SnippetGrid:
    snippet_size: int
    height: int
    width: int
    regions: tuple[tuple[int, int, int, int], ...]  # (top, left, bottom, right), row-major

    @property
    def count(self) -> int:
        return len(self.regions)

    @property
    def shape(self) -> tuple[int, int]:
        k = self.snippet_size
        return math.ceil(self.height / k), math.ceil(self.width / k)

    def crop(self, image: np.ndarray) -> list[np.ndarray]:
        return [image[t:b, l:r] for t, l, b, r in self.regions]


def softmax_similarity(raw_cosines, temperature: float, kind: str = "global") -> SimilarityVector:
    p = np.asarray(raw_cosines, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite cosine similarity passed to softmax")
    return SimilarityVector(softmax_rows(p, temperature), kind)


def softmax_rows(p: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for stability."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(p, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_matrix(embeddings: np.ndarray, table: TextEmbeddingTable) -> np.ndarray:
    """Cosine similarity of each embedding row with each class row, (n, C)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    return emb @ table.normalized().T


def tile_image(image: np.ndarray, k: int) -> SnippetGrid:
    """Cut an image into non-overlapping k x k snippets, row-major.

    Remainder strips on the right and bottom become partial snippets, so
    the grid always has ceil(H/k) * ceil(W/k) cells.
    """
    if k < 1:
        raise ConfigError(f"snippet size must be >= 1, got {k}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise InputError(f"cannot tile an empty image of shape {image.shape}")
    regions = tuple(
        (top, left, min(top + k, h), min(left + k, w))
        for top in range(0, h, k)
        for left in range(0, w, k)
    )
    return SnippetGrid(k, h, w, regions)


def _temperature(backend: EncoderBackend, temperature: float | None) -> float:
    return backend.temperature if temperature is None else temperature


def global_scores(images: Sequence[np.ndarray], backend: EncoderBackend,
                  table: TextEmbeddingTable, temperature: float | None = None) -> np.ndarray:
    """Global similarity vectors for a batch of images, shape (n, C)."""
    cos = cosine_matrix(backend.embed_images(images), table)
    return softmax_rows(cos, _temperature(backend, temperature))


def global_alignment(image: np.ndarray, backend: EncoderBackend, table: TextEmbeddingTable,
                     temperature: float | None = None) -> SimilarityVector:
    return SimilarityVector(global_scores([image], backend, table, temperature)[0], "global")


def local_scores(image: np.ndarray, k: int, backend: EncoderBackend, table: TextEmbeddingTable,
                 temperature: float | None = None, micro_batch: int = 256) -> np.ndarray:
    """Per-snippet similarity vectors, shape (N snippets, C)."""
    snippets = tile_image(image, k).crop(image)
    tau = _temperature(backend, temperature)
    rows = []
    for start in range(0, len(snippets), micro_batch):
        cos = cosine_matrix(backend.embed_images(snippets[start:start + micro_batch]), table)
        rows.append(softmax_rows(cos, tau))
    return np.concatenate(rows)


def local_alignment(image: np.ndarray, k: int, backend: EncoderBackend, table: TextEmbeddingTable,
                    temperature: float | None = None) -> list[SimilarityVector]:
    return [SimilarityVector(row, "local")
            for row in local_scores(image, k, backend, table, temperature)]


def aggregate_scores(local: np.ndarray, zeta: float = 0.5) -> np.ndarray:
    """Min-max reduction of an (N snippets, C) matrix to one score per class.

    Takes the per-class maximum when it reaches ``zeta`` and the per-class
    minimum otherwise.
    """
    local = np.asarray(local, dtype=np.float64)
    if local.ndim != 2 or local.shape[0] == 0:
        raise InputError(f"need at least one local vector, got shape {local.shape}")
    alpha = local.max(axis=0)
    beta = local.min(axis=0)
    return np.where(alpha >= zeta, alpha, beta)


def aggregate_local(locals_: Sequence[SimilarityVector] | np.ndarray,
                    params: AggregatorParams = AggregatorParams()) -> SimilarityVector:
    if len(locals_) == 0:
        raise InputError("aggregate_local needs at least one local vector")
    rows = [np.asarray(v, dtype=np.float64) for v in locals_]
    if len({r.shape for r in rows}) != 1:
        raise InputError("local vectors have differing lengths")
    return SimilarityVector(aggregate_scores(np.stack(rows), params.zeta), "aggregate")


def final_pseudo_labels(global_vec, aggregate_vec) -> SimilarityVector:
    g = np.asarray(global_vec, dtype=np.float64)
    a = np.asarray(aggregate_vec, dtype=np.float64)
    if g.shape != a.shape:
        raise InputError(f"global/aggregate length mismatch: {g.shape} vs {a.shape}")
    return SimilarityVector(0.5 * (g + a), "final")


def image_pseudo_labels(image: np.ndarray, k: int, backend: EncoderBackend,
                        table: TextEmbeddingTable, params: AggregatorParams = AggregatorParams(),
                        temperature: float | None = None) -> dict[str, SimilarityVector]:
    """Full initialization pipeline for one image."""
    g = global_alignment(image, backend, table, temperature)
    a = aggregate_local(local_scores(image, k, backend, table, temperature), params)
    return {"global": g, "aggregate": a, "final": final_pseudo_labels(g, a)}
