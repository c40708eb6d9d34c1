"""Dispersive and anchoring regularizers with exact gradients.

Potentials act on the *squared* pairwise distance ``s = ||z_i - z_j||^2``.
All pair sums run over ordered pairs, so each unordered pair appears twice and
the normalizers are ``B(B-1)`` and ``M(M-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    BatchTooSmall,
    DegenerateNorm,
    DimensionMismatch,
    NonPositiveTemperature,
    PotentialNotMonotone,
    SingleModality,
)
from .geom import EmbeddingBatch, ModalityBatchSet, sq_dists

DEFAULT_T = 2.0
DEFAULT_TAU = 0.25


@dataclass
class LossResult:
    value: float
    grads: list[np.ndarray]

    def scaled(self, c: float) -> "LossResult":
        return LossResult(c * self.value, [c * g for g in self.grads])


class DispersivePotential(Protocol):
    def value(self, s: np.ndarray) -> np.ndarray: ...

    def deriv(self, s: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class RbfPotential:
    """``psi(s) = exp(-t s)``."""

    t: float = DEFAULT_T

    def __post_init__(self):
        if not self.t > 0:
            raise NonPositiveTemperature(f"temperature must be positive, got {self.t}")

    def value(self, s):
        return np.exp(-self.t * s)

    def deriv(self, s):
        return -self.t * np.exp(-self.t * s)


@dataclass(frozen=True)
class HingePotential:
    """``psi(s) = max(margin - s, 0)``; the sub-derivative at the kink is 0."""

    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("hinge margin must be positive")

    def value(self, s):
        return np.maximum(self.margin - s, 0.0)

    def deriv(self, s):
        return np.where(s < self.margin, -1.0, 0.0)


@dataclass(frozen=True)
class AnchorConfig:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class DagrWeights:
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0

    def __post_init__(self):
        if self.lambda_intra < 0 or self.lambda_inter < 0:
            raise ValueError("DAGR weights must be nonnegative")


def _as_array(batch) -> np.ndarray:
    return batch.data if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)


def _check_pairs(x: np.ndarray):
    if x.shape[0] < 2:
        raise BatchTooSmall(f"dispersive losses need B >= 2, got {x.shape[0]}")


def _pair_force(x: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """``sum_j coef_ij (x_i - x_j)`` for a symmetric coefficient matrix with zero diagonal."""
    return coef.sum(axis=1)[:, None] * x - coef @ x


def dispersive_loss_rbf(batch, t: float = DEFAULT_T) -> LossResult:
    """``log mean_{i != j} exp(-t ||z_i - z_j||^2)`` and its gradient w.r.t. the rows."""
    if not t > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {t}")
    x = _as_array(batch)
    _check_pairs(x)
    B = x.shape[0]
    logits = -t * sq_dists(x)
    off = ~np.eye(B, dtype=bool)
    m = logits[off].max()
    w = np.where(off, np.exp(logits - m), 0.0)
    total = w.sum()
    value = m + np.log(total / (B * (B - 1)))
    # softmax over ordered pairs; each unordered pair contributes twice
    p = w / total
    grad = -4.0 * t * _pair_force(x, p)
    return LossResult(float(value), [grad])


def dispersive_loss_general(batch, potential: DispersivePotential, check_monotone: bool = False) -> LossResult:
    x = _as_array(batch)
    _check_pairs(x)
    B = x.shape[0]
    if check_monotone:
        probe = np.linspace(0.0, 4.0, 257)
        vals = potential.value(probe)
        if np.any(np.diff(vals) > 1e-12) or np.any(potential.deriv(probe) > 0):
            raise PotentialNotMonotone(f"{potential!r} is not non-increasing on [0, 4]")
    s = sq_dists(x)
    off = ~np.eye(B, dtype=bool)
    norm = 1.0 / (B * (B - 1))
    value = norm * potential.value(s)[off].sum()
    dpsi = np.where(off, potential.deriv(s), 0.0)
    grad = 4.0 * norm * _pair_force(x, dpsi)
    return LossResult(float(value), [grad])


def repulsion_weights(batch, potential: DispersivePotential | None = None, t: float = DEFAULT_T) -> np.ndarray:
    """Nonnegative ``w_ij`` with ``-grad_i = sum_j w_ij (z_i - z_j)``.

    With ``potential=None`` the weights belong to the log-mean-exp RBF loss.
    """
    x = _as_array(batch)
    _check_pairs(x)
    B = x.shape[0]
    off = ~np.eye(B, dtype=bool)
    s = sq_dists(x)
    if potential is None:
        logits = -t * s
        w = np.where(off, np.exp(logits - logits[off].max()), 0.0)
        return 4.0 * t * w / w.sum()
    return np.where(off, -4.0 / (B * (B - 1)) * potential.deriv(s), 0.0)


def _dispersive(x, potential, t):
    if potential is None:
        return dispersive_loss_rbf(x, t)
    return dispersive_loss_general(x, potential)


def intra_loss(s: ModalityBatchSet | Sequence, potential: DispersivePotential | None = None, t: float = DEFAULT_T) -> LossResult:
    """Mean of the per-modality dispersive losses."""
    arrays = s.arrays() if isinstance(s, ModalityBatchSet) else [_as_array(a) for a in s]
    M = len(arrays)
    parts = [_dispersive(a, potential, t) for a in arrays]
    return LossResult(sum(p.value for p in parts) / M, [p.grads[0] / M for p in parts])


def anchoring_loss(s: ModalityBatchSet | Sequence, cfg: AnchorConfig = AnchorConfig()) -> LossResult:
    """``(1/B) sum_i 1/(M(M-1)) sum_{m != n} (||z_i^m - z_i^n|| - tau)_+^2``."""
    arrays = s.arrays() if isinstance(s, ModalityBatchSet) else [_as_array(a) for a in s]
    M = len(arrays)
    if M < 2:
        raise SingleModality("anchoring needs at least two modalities")
    if len({a.shape for a in arrays}) != 1:
        raise DimensionMismatch("anchoring needs every modality at the same B x d")
    B = arrays[0].shape[0]
    scale = 1.0 / (B * M * (M - 1))
    value = 0.0
    grads = [np.zeros_like(a) for a in arrays]
    for m in range(M):
        for n in range(m + 1, M):
            diff = arrays[m] - arrays[n]
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            excess = np.maximum(dist - cfg.tau, 0.0)
            # both ordered pairs (m, n) and (n, m)
            value += 2.0 * scale * float(np.sum(excess**2))
            coef = np.where(dist > 0, 2.0 * excess / np.where(dist > 0, dist, 1.0), 0.0)
            g = 2.0 * scale * coef[:, None] * diff
            grads[m] += g
            grads[n] -= g
    return LossResult(value, grads)


def dagr_total(
    s: ModalityBatchSet | Sequence,
    weights: DagrWeights = DagrWeights(),
    anchor: AnchorConfig = AnchorConfig(),
    t: float = DEFAULT_T,
    potential: DispersivePotential | None = None,
) -> LossResult:
    intra = intra_loss(s, potential, t)
    inter = anchoring_loss(s, anchor)
    a, b = weights.lambda_intra, weights.lambda_inter
    return LossResult(
        a * intra.value + b * inter.value,
        [a * gi + b * ge for gi, ge in zip(intra.grads, inter.grads)],
    )


def chain_through_normalization(pre_norm, grads_on_normalized: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """Pull a gradient on ``z / ||z||`` back to ``z``: ``(I - u u^T) g / ||z||`` per row."""
    z = _as_array(pre_norm)
    g = np.asarray(grads_on_normalized, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < epsilon):
        raise DegenerateNorm("cannot chain through normalization of a (near) zero row")
    u = z / norms[:, None]
    radial = np.einsum("ij,ij->i", u, g)
    return (g - radial[:, None] * u) / norms[:, None]
