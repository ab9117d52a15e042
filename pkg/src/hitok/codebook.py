from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
from sklearn import cluster

from hitok import grid


logger = logging.getLogger(__name__)

IndexArray = npt.NDArray[np.int64]

# Rows of the distance matrix computed at once when scanning a codebook.
_CHUNK = 1024


class Metric(enum.Enum):
    L2 = "l2"
    COSINE = "cosine"


@dataclasses.dataclass(frozen=True)
class Codebook:
    """
    The vocabulary: K embedding vectors of dimension n_z, and the metric used to pick one.

    cluster_size and embed_sum hold the exponential moving averages used by ema_update.
    When they are not provided they start as ones and a copy of the vectors,
    so that the first update has a well-defined previous state.
    Under the cosine metric the rows are unit-normalized on construction.
    """

    vectors: grid.FloatArray
    metric: Metric = Metric.COSINE
    cluster_size: grid.FloatArray | None = None
    embed_sum: grid.FloatArray | None = None

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or min(vectors.shape) < 1:
            raise DimensionMismatch(f"Expected a K×dim array, got {vectors.shape}.")
        if not np.all(np.isfinite(vectors)):
            raise grid.NonFiniteGrid
        if self.metric is Metric.COSINE:
            vectors = _normalize_rows(vectors)

        cluster_size = (
            np.ones(len(vectors))
            if self.cluster_size is None
            else np.array(self.cluster_size, dtype=np.float64)
        )
        embed_sum = (
            vectors * cluster_size[:, None]
            if self.embed_sum is None
            else np.array(self.embed_sum, dtype=np.float64)
        )
        if cluster_size.shape != (len(vectors),) or embed_sum.shape != vectors.shape:
            raise DimensionMismatch("EMA state does not match the codebook shape.")

        for name, array in (
            ("vectors", vectors),
            ("cluster_size", cluster_size),
            ("embed_sum", embed_sum),
        ):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclasses.dataclass(frozen=True)
class QuantizationResult:
    indices: IndexArray
    embeddings: grid.LatentGrid
    residual_norm: float


class DimensionMismatch(ValueError):
    """
    Raised when vectors or grids do not have the codebook's dimension.
    """


class NotEnoughSamples(ValueError):
    """
    Raised when a codebook of K entries is initialised from fewer than K samples.
    """


class InvalidDecay(ValueError):
    """
    Raised when an EMA decay is outside the open interval (0, 1).
    """


class InvalidIndices(ValueError):
    """
    Raised when a code index is outside 0..K-1.
    """


def _normalize_rows(vectors: grid.FloatArray) -> grid.FloatArray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


# Quantization
# ------------


def nearest_codes(vectors: grid.FloatArray, cb: Codebook) -> IndexArray:
    """
    Find the nearest code for every row of an N×dim array.

    Under L2 this is argmin_k ‖r_k − v‖₂, under cosine argmax_k of the cosine similarity.
    Ties go to the smallest index. A zero vector has no direction,
    so under cosine it maps to code 0.

    Raises:
        DimensionMismatch: If the rows are not of the codebook's dimension.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != cb.dim:
        raise DimensionMismatch(
            f"Expected N×{cb.dim} vectors, got {vectors.shape}."
        )
    indices = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), _CHUNK):
        chunk = vectors[start : start + _CHUNK]
        if cb.metric is Metric.L2:
            distances = ((chunk[:, None, :] - cb.vectors[None, :, :]) ** 2).sum(axis=-1)
            indices[start : start + _CHUNK] = np.argmin(distances, axis=1)
        else:
            similarity = _normalize_rows(chunk) @ _normalize_rows(cb.vectors).T
            indices[start : start + _CHUNK] = np.argmax(similarity, axis=1)
    return indices


def nearest_code(v: grid.FloatArray, cb: Codebook) -> int:
    """
    Quantize a single feature vector. See nearest_codes.

    Raises:
        DimensionMismatch: If v is not of the codebook's dimension.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.dim,):
        raise DimensionMismatch(f"Expected a vector of length {cb.dim}, got {v.shape}.")
    return int(nearest_codes(v[None, :], cb)[0])


def _check_indices(indices: IndexArray, cb: Codebook) -> None:
    if indices.size and (indices.min() < 0 or indices.max() >= cb.size):
        raise InvalidIndices(
            f"Code indices span {indices.min()}..{indices.max()}, the codebook has {cb.size} entries."
        )


def embed(indices: IndexArray, cb: Codebook) -> grid.LatentGrid:
    """
    Lay out the codes selected by an h×w index grid as a dim×h×w grid.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2:
        raise DimensionMismatch(f"Expected an h×w index grid, got {indices.shape}.")
    _check_indices(indices, cb)
    return grid.LatentGrid(np.moveaxis(cb.vectors[indices], -1, 0))


def quantize_grid(g: grid.LatentGrid, cb: Codebook) -> QuantizationResult:
    """
    Replace every cell of a grid with its nearest code.

    Args:
        g: A grid whose channel count is the codebook's dimension.
        cb: The codebook.

    Raises:
        DimensionMismatch: If g.channels != cb.dim.

    Returns:
        The selected indices, their embeddings, and the Frobenius norm of g − embeddings.
    """
    if g.channels != cb.dim:
        raise DimensionMismatch(f"Grid has {g.channels} channels, codebook dim is {cb.dim}.")
    flat = g.data.reshape(g.channels, -1).T
    indices = nearest_codes(flat, cb).reshape(g.size)
    embeddings = embed(indices, cb)
    return QuantizationResult(
        indices=indices,
        embeddings=embeddings,
        residual_norm=float(np.linalg.norm(g.data - embeddings.data)),
    )


def commitment_loss(
    g: grid.LatentGrid, q: QuantizationResult
) -> tuple[float, grid.LatentGrid]:
    """
    Mean squared error between features and their (constant) embeddings.

    Returns:
        The loss and its gradient with respect to g, 2(g − embeddings)/count.

    Raises:
        grid.ShapeMismatch: If g and the embeddings differ in shape.
    """
    if g.data.shape != q.embeddings.data.shape:
        raise grid.ShapeMismatch(f"{g.data.shape} != {q.embeddings.data.shape}")
    diff = g.data - q.embeddings.data
    loss = float(np.mean(diff**2))
    return loss, grid.LatentGrid(2.0 * diff / diff.size)


# Learning
# --------


def init_codebook(
    samples: Sequence[grid.FloatArray] | grid.FloatArray,
    k: int,
    seed: int,
    *,
    metric: Metric = Metric.COSINE,
) -> Codebook:
    """
    Choose K initial codes from samples with greedy k-means++ seeding.

    Every code is one of the samples. When the samples hold fewer than K distinct
    vectors some codes repeat; reseed_dead_codes separates them during training.

    Raises:
        NotEnoughSamples: If there are fewer than K samples.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionMismatch(f"Expected N×dim samples, got {data.shape}.")
    if len(data) < k:
        raise NotEnoughSamples(f"Need at least {k} samples, got {len(data)}.")

    centers, _ = cluster.kmeans_plusplus(data, k, random_state=seed)
    return Codebook(centers, metric=metric)


def ema_update(
    cb: Codebook,
    features: Sequence[grid.FloatArray] | grid.FloatArray,
    indices: Sequence[int] | IndexArray,
    decay: float,
) -> Codebook:
    """
    Move each code toward the mean of the features assigned to it.

    The per-code cluster count and cluster sum are exponential moving averages;
    an assigned code becomes sum / count. Codes with no assignment keep their vector.

    Args:
        cb: The codebook to update. It is not modified.
        features: N feature vectors.
        indices: The code each feature was assigned to.
        decay: The EMA decay, in (0, 1).

    Raises:
        InvalidDecay: If decay is outside (0, 1).
        DimensionMismatch: If features and indices differ in length,
            or the features are not of the codebook's dimension.
        InvalidIndices: If an index is outside 0..K-1.

    Returns:
        A new codebook carrying the updated EMA state.
    """
    if not 0.0 < decay < 1.0:
        raise InvalidDecay(f"Decay must be in (0, 1), got {decay}.")
    feats = np.asarray(features, dtype=np.float64).reshape(-1, cb.dim)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(feats) != len(idx):
        raise DimensionMismatch(f"{len(feats)} features but {len(idx)} indices.")
    _check_indices(idx, cb)

    counts = np.bincount(idx, minlength=cb.size).astype(np.float64)
    sums = np.zeros((cb.size, cb.dim))
    np.add.at(sums, idx, feats)

    assert cb.cluster_size is not None and cb.embed_sum is not None
    cluster_size = decay * cb.cluster_size + (1 - decay) * counts
    embed_sum = decay * cb.embed_sum + (1 - decay) * sums

    assigned = counts > 0
    vectors = cb.vectors.copy()
    vectors[assigned] = embed_sum[assigned] / cluster_size[assigned, None]
    if cb.metric is Metric.COSINE:
        vectors = _normalize_rows(vectors)
        embed_sum = vectors * cluster_size[:, None]
    return Codebook(vectors, cb.metric, cluster_size, embed_sum)


def reseed_dead_codes(
    cb: Codebook, features: grid.FloatArray, usage: IndexArray
) -> Codebook:
    """
    Move codes that were never used onto the worst-quantized features.

    Dead codes, in index order, take the features farthest from their assigned code,
    in decreasing order of that distance.

    Args:
        cb: The codebook.
        features: N×dim features seen during the epoch.
        usage: Assignment counts per code over the epoch.
    """
    dead = np.flatnonzero(np.asarray(usage) == 0)
    if len(dead) == 0 or len(features) == 0:
        return cb
    feats = np.asarray(features, dtype=np.float64)
    assigned = cb.vectors[nearest_codes(feats, cb)]
    errors = ((feats - assigned) ** 2).sum(axis=1)
    # Stable sort so that equal errors keep the lower feature index first.
    worst = np.argsort(-errors, kind="stable")[: len(dead)]

    vectors = cb.vectors.copy()
    assert cb.cluster_size is not None
    cluster_size = cb.cluster_size.copy()
    for code, feature in zip(dead, worst):
        vectors[code] = feats[feature]
        cluster_size[code] = 1.0
    logger.debug("reseeded dead codes count=%d", min(len(dead), len(worst)))
    if cb.metric is Metric.COSINE:
        vectors = _normalize_rows(vectors)
    return Codebook(vectors, cb.metric, cluster_size, vectors * cluster_size[:, None])
