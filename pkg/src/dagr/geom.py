"""Embedding containers and the small set of geometric kernels built on them.

Everything here is a pure function of its inputs. Reductions go through numpy
in a fixed order, so repeated calls give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BatchTooSmall, DimensionMismatch, NonFiniteInput, SingleModality, ShapeMismatch

DEFAULT_EPS = 1e-12
UNIT_TOL = 1e-9


@dataclass
class EmbeddingBatch:
    """A ``B x d`` block of embeddings for one modality.

    ``guarded`` marks rows whose norm fell below the epsilon guard during
    normalization; it is all-False for batches that were never normalized.
    """

    data: np.ndarray
    normalized: bool = False
    guarded: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatch(f"embedding batch must be B x d with B, d >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteInput("embedding batch contains NaN or Inf")
        self.data = data
        if self.guarded is None:
            self.guarded = np.zeros(data.shape[0], dtype=bool)
        if self.normalized:
            norms = np.linalg.norm(data, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise ShapeMismatch("batch flagged normalized but some rows are not unit norm")

    @property
    def B(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass
class ModalityBatchSet:
    """Aligned embeddings of ``M`` modalities over the same ``B`` samples."""

    batches: list[EmbeddingBatch]
    labels: np.ndarray | None = None
    modality_names: list[str] = field(default_factory=list)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.batches = [b if isinstance(b, EmbeddingBatch) else EmbeddingBatch(b) for b in self.batches]
        if not self.batches:
            raise SingleModality("a modality set needs at least one batch")
        B = self.batches[0].B
        if any(b.B != B for b in self.batches):
            raise ShapeMismatch("all modalities must share the batch size")
        if self.labels is None:
            self.labels = np.zeros(B, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (B,):
            raise ShapeMismatch(f"labels must have length {B}")
        if not self.modality_names:
            self.modality_names = [f"m{i}" for i in range(len(self.batches))]
        if len(self.modality_names) != len(self.batches):
            raise ShapeMismatch("one name per modality required")

    @property
    def M(self) -> int:
        return len(self.batches)

    @property
    def B(self) -> int:
        return self.batches[0].B

    def arrays(self) -> list[np.ndarray]:
        return [b.data for b in self.batches]

    def stacked(self) -> np.ndarray:
        """``M x B x d`` view; requires a shared ``d``."""
        d = self.batches[0].d
        if any(b.d != d for b in self.batches):
            raise DimensionMismatch("modalities have different embedding widths")
        return np.stack(self.arrays())


def modality_set(arrays: Sequence[np.ndarray], labels=None, names=None, normalized: bool = False) -> ModalityBatchSet:
    return ModalityBatchSet(
        [EmbeddingBatch(a, normalized=normalized) for a in arrays],
        labels=labels,
        modality_names=list(names) if names is not None else [],
    )


def normalize_rows(x: np.ndarray, epsilon: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array-level normalization. Returns (unit rows, pre-normalization norms, guard mask)."""
    norms = np.linalg.norm(x, axis=1)
    guarded = norms < epsilon
    return x / np.maximum(norms, epsilon)[:, None], norms, guarded


def normalize_batch(batch: EmbeddingBatch, epsilon: float = DEFAULT_EPS) -> EmbeddingBatch:
    """Project every row onto the unit sphere.

    Rows whose norm is below ``epsilon`` are divided by ``epsilon`` instead and
    recorded in ``guarded``; the result is flagged normalized only when no row
    hit the guard.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    unit, _, guarded = normalize_rows(batch.data, epsilon)
    return EmbeddingBatch(unit, normalized=not guarded.any(), guarded=guarded)


def normalize_set(s: ModalityBatchSet, epsilon: float = DEFAULT_EPS) -> ModalityBatchSet:
    return ModalityBatchSet([normalize_batch(b, epsilon) for b in s.batches], s.labels, list(s.modality_names))


def sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows via the Gram expansion, clamped at 0."""
    sq = np.einsum("ij,ij->i", x, x)
    D = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(D, 0.0, out=D)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def pairwise_sq_dists(batch: EmbeddingBatch) -> np.ndarray:
    if batch.B < 2:
        raise BatchTooSmall(f"need at least 2 rows for pairwise distances, got {batch.B}")
    return sq_dists(batch.data)


def covariance(batch: EmbeddingBatch | np.ndarray) -> np.ndarray:
    """Uncentered second moment ``(1/B) sum_i z_i z_i^T`` (batch-average estimator)."""
    x = batch.data if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)
    S = x.T @ x / x.shape[0]
    return 0.5 * (S + S.T)
