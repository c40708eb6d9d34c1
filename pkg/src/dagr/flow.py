"""Gradient flow of free embedding particles on the unit sphere.

The simulator runs explicit Euler steps on ``lambda_intra * L_intra +
lambda_inter * L_inter`` (plus an optional per-sample conflict term that pulls
each modality towards its own target) and records the geometry diagnostics
after every step. It also builds the logit-preserving rotations used to show
that decoupled cross-entropy cannot pin down embedding geometry.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .diagnostics import cross_modal_deviation, effective_rank
from .engine import ce_loss_and_grad
from .errors import ShapeMismatch, TrivialNullSpace
from .geom import ModalityBatchSet, covariance, modality_set, normalize_rows, sq_dists
from .losses import (
    DEFAULT_T,
    DEFAULT_TAU,
    AnchorConfig,
    anchoring_loss,
    chain_through_normalization,
    intra_loss,
    repulsion_weights,
)

PROJECTIONS = ("riemannian", "chain")
INITS = ("collapsed", "uniform", "custom")


@dataclass
class FlowConfig:
    B: int = 64
    d: int = 8
    M: int = 1
    eta: float = 0.05
    steps: int = 2000
    t: float = DEFAULT_T
    tau: float = DEFAULT_TAU
    lambda_intra: float = 1.0
    lambda_inter: float = 0.0
    projection: str = "riemannian"
    init: str = "collapsed"
    jitter: float = 1e-3
    conflict_weight: float = 0.0
    conflict_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.B < 2 or self.d < 1 or self.M < 1:
            raise ValueError("need B >= 2, d >= 1, M >= 1")


@dataclass
class TrajectoryRecord:
    loss_total: list[float] = field(default_factory=list)
    loss_disp: list[float] = field(default_factory=list)
    loss_anchor: list[float] = field(default_factory=list)
    loss_conflict: list[float] = field(default_factory=list)
    min_pair_dist: list[float] = field(default_factory=list)
    eff_rank: list[list[float]] = field(default_factory=list)
    excess_drift: list[float] = field(default_factory=list)
    mean_sq_drift: list[float] = field(default_factory=list)
    min_repulsion_weight: list[float] = field(default_factory=list)
    max_norm_error: list[float] = field(default_factory=list)
    delta_hat: float | None = None

    def __len__(self):
        return len(self.loss_total)

    def eff_rank_series(self, m: int = 0) -> list[float]:
        return [row[m] for row in self.eff_rank]

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_columns(self) -> list[str]:
        M = len(self.eff_rank[0]) if self.eff_rank else 0
        return (
            ["step", "loss_total", "loss_disp", "loss_anchor", "min_pair_dist"]
            + [f"eff_rank_m{m}" for m in range(M)]
            + ["excess_drift", "mean_sq_drift"]
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_columns())
        for k in range(len(self)):
            w.writerow(
                [k]
                + [repr(v) for v in (self.loss_total[k], self.loss_disp[k], self.loss_anchor[k], self.min_pair_dist[k])]
                + [repr(v) for v in self.eff_rank[k]]
                + [repr(self.excess_drift[k]), repr(self.mean_sq_drift[k])]
            )
        return buf.getvalue()


def initial_state(cfg: FlowConfig) -> ModalityBatchSet:
    rng = np.random.default_rng(cfg.seed)
    arrays = []
    for _ in range(cfg.M):
        if cfg.init == "collapsed":
            x = np.zeros((cfg.B, cfg.d))
            x[:, 0] = 1.0
            x += cfg.jitter * rng.standard_normal((cfg.B, cfg.d))
        elif cfg.init == "uniform":
            x = rng.standard_normal((cfg.B, cfg.d))
        else:
            raise ValueError("custom init needs an explicit state")
        arrays.append(normalize_rows(x)[0])
    return modality_set(arrays, normalized=True)


def paired_state(B: int, d: int, distance: float, seed: int = 0) -> ModalityBatchSet:
    """Two modalities whose matched particles sit exactly ``distance`` apart."""
    if not 0 <= distance <= 2:
        raise ValueError("distance between unit vectors lies in [0, 2]")
    rng = np.random.default_rng(seed)
    a = normalize_rows(rng.standard_normal((B, d)))[0]
    r = rng.standard_normal((B, d))
    r -= np.einsum("ij,ij->i", r, a)[:, None] * a
    u = normalize_rows(r)[0]
    # chord length c between unit vectors at angle theta: c = 2 sin(theta / 2)
    theta = 2.0 * np.arcsin(distance / 2.0)
    b = np.cos(theta) * a + np.sin(theta) * u
    return modality_set([a, normalize_rows(b)[0]], normalized=True)


def conflict_targets(cfg: FlowConfig) -> list[np.ndarray]:
    """Per-modality unit targets; ``conflict_spread`` sets how far they disagree."""
    rng = np.random.default_rng(cfg.seed + 7919)
    base = rng.standard_normal((cfg.B, cfg.d))
    return [normalize_rows(base + cfg.conflict_spread * rng.standard_normal((cfg.B, cfg.d)))[0] for _ in range(cfg.M)]


def conflict_loss(arrays: list[np.ndarray], targets: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """``(1/B) sum_i sum_m ||z_i^m - a_i^m||^2``: a task stand-in that prefers untied modalities."""
    B = arrays[0].shape[0]
    value = sum(float(np.sum((x - a) ** 2)) for x, a in zip(arrays, targets)) / B
    return value, [2.0 * (x - a) / B for x, a in zip(arrays, targets)]


def conflict_gap(targets: list[np.ndarray], weight: float = 1.0) -> float:
    """Tied optimum minus free optimum of the weighted conflict term.

    The free optimum is 0. Tied, each sample's best shared point is the
    normalized target sum, giving ``2M - 2 ||sum_m a^m||`` per sample.
    """
    M = len(targets)
    s = np.sum(targets, axis=0)
    return float(weight * np.mean(2.0 * M - 2.0 * np.linalg.norm(s, axis=1)))


def _euclidean_grads(arrays, cfg: FlowConfig, targets):
    grads = [np.zeros_like(a) for a in arrays]
    if cfg.lambda_intra:
        r = intra_loss(arrays, t=cfg.t)
        grads = [g + cfg.lambda_intra * gi for g, gi in zip(grads, r.grads)]
    if cfg.lambda_inter and len(arrays) >= 2:
        r = anchoring_loss(arrays, AnchorConfig(cfg.tau))
        grads = [g + cfg.lambda_inter * gi for g, gi in zip(grads, r.grads)]
    if cfg.conflict_weight and targets is not None:
        _, cg = conflict_loss(arrays, targets)
        grads = [g + cfg.conflict_weight * gi for g, gi in zip(grads, cg)]
    return grads


def flow_step(state: ModalityBatchSet, cfg: FlowConfig, targets: list[np.ndarray] | None = None) -> ModalityBatchSet:
    """One projected gradient step followed by re-normalization.

    ``riemannian`` removes the radial part of the Euclidean gradient at each
    particle; ``chain`` pulls the gradient back through ``z / ||z||``. On unit
    particles the two agree up to round-off.
    """
    arrays = state.arrays()
    if cfg.lambda_intra == 0 and cfg.lambda_inter == 0 and cfg.conflict_weight == 0:
        return ModalityBatchSet([normalize_rows(a)[0] for a in arrays], state.labels, list(state.modality_names))
    out = []
    for z, g in zip(arrays, _euclidean_grads(arrays, cfg, targets)):
        if cfg.projection == "riemannian":
            g = g - np.einsum("ij,ij->i", g, z)[:, None] * z
        else:
            g = chain_through_normalization(z, g)
        out.append(normalize_rows(z - cfg.eta * g)[0])
    return modality_set(out, state.labels, state.modality_names, normalized=True)


def _record(rec: TrajectoryRecord, arrays, cfg: FlowConfig, targets):
    disp = intra_loss(arrays, t=cfg.t).value
    anchor = anchoring_loss(arrays, AnchorConfig(cfg.tau)).value if len(arrays) >= 2 else 0.0
    conf = conflict_loss(arrays, targets)[0] if targets is not None else 0.0
    rec.loss_total.append(cfg.lambda_intra * disp + cfg.lambda_inter * anchor + cfg.conflict_weight * conf)
    rec.loss_disp.append(disp)
    rec.loss_anchor.append(anchor)
    rec.loss_conflict.append(conf)
    rec.min_pair_dist.append(float(min(np.sqrt(sq_dists(a)[~np.eye(a.shape[0], dtype=bool)].min()) for a in arrays)))
    rec.eff_rank.append([effective_rank(covariance(a)) for a in arrays])
    rec.excess_drift.append(anchor)
    rec.mean_sq_drift.append(cross_modal_deviation(arrays) if len(arrays) >= 2 else 0.0)
    rec.min_repulsion_weight.append(float(min(repulsion_weights(a, t=cfg.t).min() for a in arrays)))
    rec.max_norm_error.append(float(max(np.abs(np.linalg.norm(a, axis=1) - 1.0).max() for a in arrays)))


def run_flow(cfg: FlowConfig, state: ModalityBatchSet | None = None, on_step=None) -> tuple[TrajectoryRecord, ModalityBatchSet]:
    """Run ``cfg.steps`` steps; the record holds ``steps + 1`` entries including the start.

    ``on_step(step, state)`` is called for step 0 and after every update.
    """
    if state is None:
        if cfg.init == "custom":
            raise ValueError("init='custom' requires an explicit state")
        state = initial_state(cfg)
    if state.M != cfg.M:
        raise ShapeMismatch(f"state has {state.M} modalities, config says {cfg.M}")
    targets = conflict_targets(cfg) if cfg.conflict_weight else None
    rec = TrajectoryRecord()
    if targets is not None:
        rec.delta_hat = conflict_gap(targets, cfg.conflict_weight)
    _record(rec, state.arrays(), cfg, targets)
    if on_step:
        on_step(0, state)
    for step in range(1, cfg.steps + 1):
        state = flow_step(state, cfg, targets)
        _record(rec, state.arrays(), cfg, targets)
        if on_step:
            on_step(step, state)
    return rec, state


def maxent_violations(rec: TrajectoryRecord, budget: float, tol: float = 1e-6) -> list[int]:
    """Steps where the drift budget had slack but the Renyi-2 proxy dropped by more than ``tol``."""
    proxy = [-v for v in rec.loss_disp]
    bad = []
    for k in range(len(rec) - 1):
        if rec.excess_drift[k] < budget and proxy[k + 1] < proxy[k] - tol:
            bad.append(k)
    return bad


@dataclass
class NullSpaceRotation:
    W: np.ndarray
    V0: np.ndarray
    V1: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    @property
    def rank(self) -> int:
        return self.V1.shape[1]

    def orthogonality_residual(self) -> float:
        return float(np.abs(self.R.T @ self.R - np.eye(self.R.shape[0])).max())

    def logit_residual(self) -> float:
        return float(np.abs(self.W @ self.R - self.W).max())


def _gram_schmidt(P: np.ndarray, k: int) -> np.ndarray:
    """Orthonormal basis of range(P) from its columns in canonical order (two-pass MGS)."""
    d = P.shape[0]
    basis: list[np.ndarray] = []
    for j in range(d):
        v = P[:, j].copy()
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        n = np.linalg.norm(v)
        if n > 1e-8:
            basis.append(v / n)
        if len(basis) == k:
            break
    if len(basis) != k:
        raise np.linalg.LinAlgError("could not extract a basis of the expected dimension")
    return np.stack(basis, axis=1) if basis else np.zeros((d, 0))


def build_nullspace_rotation(W: np.ndarray, Q: np.ndarray | str = "negate-null", tol: float = 1e-10) -> NullSpaceRotation:
    """``R = V1 V1^T + V0 Q V0^T`` with ``V0`` spanning the null space of ``W``.

    The rank is the number of singular values above ``tol * sigma_max``. Both
    bases come from Gram-Schmidt on the projector columns taken in canonical
    order, so for axis-aligned ``W`` they are the matching standard vectors.
    ``Q`` is an orthogonal block of size ``d - rank`` or one of ``"identity"``
    and ``"negate-null"``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    d = W.shape[1]
    _, s, Vt = np.linalg.svd(W)
    r = int(np.sum(s > tol * s.max())) if s.size and s.max() > 0 else 0
    if r >= d:
        raise TrivialNullSpace(f"W has full column rank {d}; no logit-preserving rotation exists")
    P1 = Vt[:r].T @ Vt[:r]
    V1 = _gram_schmidt(P1, r)
    V0 = _gram_schmidt(np.eye(d) - V1 @ V1.T, d - r)
    if isinstance(Q, str):
        if Q == "identity":
            Q = np.eye(d - r)
        elif Q == "negate-null":
            Q = -np.eye(d - r)
        else:
            raise ValueError(f"unknown rotation preset {Q!r}")
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (d - r, d - r):
        raise ShapeMismatch(f"Q must be {(d - r, d - r)}, got {Q.shape}")
    R = V1 @ V1.T + V0 @ Q @ V0.T
    return NullSpaceRotation(W, V0, V1, Q, R)


def certify_ambiguity(W_set, z_set, labels_set, rotations) -> dict:
    """Compare cross-entropy and logits before and after each modality's rotation.

    Embeddings are rows; a rotated embedding is ``R z``, i.e. ``Z R^T`` for a batch.
    """
    ce_dev, logit_dev, moved, orth, wr = [], [], [], [], []
    for W, Z, y, rot in zip(W_set, z_set, labels_set, rotations):
        Z = np.asarray(Z, dtype=np.float64)
        Zr = Z @ rot.R.T
        ce0 = ce_loss_and_grad(W, Z, y)[0].value
        ce1 = ce_loss_and_grad(W, Zr, y)[0].value
        ce_dev.append(abs(ce1 - ce0))
        logit_dev.append(float(np.abs(Zr @ W.T - Z @ W.T).max()))
        moved.append(float(np.linalg.norm(Zr - Z, axis=1).mean()))
        orth.append(rot.orthogonality_residual())
        wr.append(rot.logit_residual())
    return {
        "max_ce_deviation": float(max(ce_dev)),
        "max_logit_deviation": float(max(logit_dev)),
        "mean_displacement": float(np.mean(moved)),
        "max_orthogonality_residual": float(max(orth)),
        "max_logit_preservation_residual": float(max(wr)),
    }
