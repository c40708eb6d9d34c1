"""Geometry and separability metrics for learned embeddings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptySample, KOutOfRange, ShapeMismatch, SingleClass, SingleModality, ZeroTrace
from .geom import EmbeddingBatch, ModalityBatchSet, covariance, normalize_rows
from .losses import DEFAULT_T, AnchorConfig, anchoring_loss, dispersive_loss_rbf


@dataclass
class SimilaritySamples:
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).ravel()
        self.neg = np.asarray(self.neg, dtype=np.float64).ravel()


@dataclass
class GeometryReport:
    effective_rank: list[float]
    renyi2_proxy: list[float]
    delta_sem: list[float]
    delta_sem_fused: float | None
    cross_modal_deviation: float | None
    excess_drift: float | None
    delta_mu: float | None
    ks_distance: float | None
    recall_at_k: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at_k"] = {str(k): v for k, v in self.recall_at_k.items()}
        return d


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, EmbeddingBatch) else np.asarray(x, dtype=np.float64)


def effective_rank(sigma: np.ndarray) -> float:
    """``(tr S)^2 / tr(S^2)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tr = np.trace(sigma)
    if not tr > 0:
        raise ZeroTrace("effective rank undefined for a zero-trace matrix")
    return float(tr**2 / np.sum(sigma * sigma.T))


def batch_effective_rank(batch) -> float:
    return effective_rank(covariance(normalize_rows(_arr(batch))[0]))


def renyi2_proxy(batch, t: float = DEFAULT_T) -> float:
    """Negated RBF uniformity loss; equals the Renyi-2 entropy up to an additive kernel constant."""
    return -dispersive_loss_rbf(batch, t).value


def semantic_margin(batch, labels, normalize: bool = True) -> float:
    """Mean inter-class distance (over ordered class pairs) minus mean intra-class distance.

    Classes with a single sample have no within-class pairs and are left out
    of the intra term.
    """
    x = _arr(batch)
    if normalize:
        x = normalize_rows(x)[0]
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise SingleClass("semantic margin needs at least two classes")
    diff = x[:, None, :] - x[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    masks = [labels == c for c in classes]
    inter = [D[np.ix_(a, b)].mean() for i, a in enumerate(masks) for j, b in enumerate(masks) if i != j]
    intra = []
    for a in masks:
        n = int(a.sum())
        if n >= 2:
            intra.append(D[np.ix_(a, a)].sum() / (n * (n - 1)))
    return float(np.mean(inter) - (np.mean(intra) if intra else 0.0))


def _pairs(s: ModalityBatchSet | Sequence):
    arrays = s.arrays() if isinstance(s, ModalityBatchSet) else [_arr(a) for a in s]
    if len(arrays) < 2:
        raise SingleModality("cross-modal metrics need at least two modalities")
    return arrays


def cross_modal_deviation(s: ModalityBatchSet | Sequence) -> float:
    """Mean squared distance between matched embeddings, averaged over ordered modality pairs."""
    arrays = _pairs(s)
    M = len(arrays)
    vals = [np.mean(np.sum((arrays[m] - arrays[n]) ** 2, axis=1)) for m in range(M) for n in range(M) if m != n]
    return float(np.mean(vals))


def excess_drift(s: ModalityBatchSet | Sequence, tau: float) -> float:
    return anchoring_loss(_pairs(s), AnchorConfig(tau)).value


def similarity_gap(samples: SimilaritySamples) -> float:
    if samples.pos.size == 0 or samples.neg.size == 0:
        raise EmptySample("similarity gap needs both samples nonempty")
    return float(samples.pos.mean() - samples.neg.mean())


def ks_distance(samples: SimilaritySamples) -> float:
    """Two-sample KS statistic from right-continuous empirical CDFs."""
    a, b = np.sort(samples.pos), np.sort(samples.neg)
    if a.size == 0 or b.size == 0:
        raise EmptySample("KS distance needs both samples nonempty")
    grid = np.union1d(a, b)
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(Fa - Fb)))


def recall_at_k(query, gallery, k: int) -> float:
    """Fraction of queries whose matched gallery row (same index) ranks in the top ``k``.

    Similarity is cosine; ties go to the lower gallery index.
    """
    q = normalize_rows(_arr(query))[0]
    g = normalize_rows(_arr(gallery))[0]
    if q.shape != g.shape:
        raise ShapeMismatch("query and gallery must be aligned")
    B = q.shape[0]
    if not 1 <= k <= B:
        raise KOutOfRange(f"k must lie in [1, {B}], got {k}")
    S = q @ g.T
    match = np.diag(S)[:, None]
    idx = np.arange(B)
    ahead = (S > match) | ((S == match) & (idx[None, :] < idx[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


def cross_modal_similarities(a, b, seed: int = 0) -> SimilaritySamples:
    """Cosine similarities of matched rows and of rows paired by a seeded derangement."""
    x = normalize_rows(_arr(a))[0]
    y = normalize_rows(_arr(b))[0]
    B = x.shape[0]
    pos = np.einsum("ij,ij->i", x, y)
    if B < 2:
        return SimilaritySamples(pos, np.empty(0))
    rng = np.random.default_rng(seed)
    # random cyclic shift composed with a shuffle never maps i to itself
    perm = rng.permutation(B)
    shift = int(rng.integers(1, B))
    partner = np.empty(B, dtype=np.int64)
    partner[perm] = perm[(np.arange(B) + shift) % B]
    neg = np.einsum("ij,ij->i", x, y[partner])
    return SimilaritySamples(pos, neg)


def geometry_report(
    s: ModalityBatchSet,
    tau: float = 0.25,
    t: float = DEFAULT_T,
    ks: Sequence[int] = (1, 5),
    normalize_sem: bool = True,
    seed: int = 0,
) -> GeometryReport:
    """Every diagnostic for one set of embeddings, normalized defensively first."""
    arrays = [normalize_rows(a)[0] for a in s.arrays()]
    labels = s.labels
    multi_class = np.unique(labels).size >= 2
    eff = [effective_rank(covariance(a)) for a in arrays]
    ren = [renyi2_proxy(a, t) if a.shape[0] >= 2 else float("nan") for a in arrays]
    raw = s.arrays()
    sem = [semantic_margin(a, labels, normalize_sem) if multi_class else float("nan") for a in raw]
    fused_sem = None
    if multi_class:
        fused_sem = semantic_margin(np.concatenate(arrays, axis=1), labels, normalize_sem)
    cmd = exd = dmu = ksd = None
    recall: dict[int, float] = {}
    same_width = len({a.shape[1] for a in arrays}) == 1
    if len(arrays) >= 2 and same_width:
        cmd = cross_modal_deviation(arrays)
        exd = excess_drift(arrays, tau)
        pos, neg = [], []
        for m in range(len(arrays)):
            for n in range(m + 1, len(arrays)):
                sm = cross_modal_similarities(arrays[m], arrays[n], seed)
                pos.append(sm.pos)
                neg.append(sm.neg)
        samples = SimilaritySamples(np.concatenate(pos), np.concatenate(neg))
        if samples.neg.size:
            dmu = similarity_gap(samples)
            ksd = ks_distance(samples)
        B = arrays[0].shape[0]
        for k in ks:
            if 1 <= k <= B:
                recall[int(k)] = recall_at_k(arrays[0], arrays[1], int(k))
    return GeometryReport(eff, ren, sem, fused_sem, cmd, exd, dmu, ksd, recall)
