"""Synthetic multimodal classification data and test-time corruptions.

Generative model for sample ``i`` with label ``y_i``::

    u_i   = mu[y_i] + shared_std * N(0, I_L)                  # shared latent
    x_i^m = signal_strength[m] * u_i A_m
            + nuisance_std[m] * v_i^m B_m                     # v_i^m ~ N(0, I), private to m
            + noise_std * N(0, I)

``A_m`` and ``B_m`` are fixed Gaussian maps scaled by ``1/sqrt(fan_in)``. The
private factor ``v^m`` is what makes tying modalities costly. Each split keeps
the nuisance- and noise-free part ``signal_strength[m] * u A_m`` in
``aux["shared_inputs"]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import ModalityBatchSet, modality_set

CORRUPTIONS = ("dropout", "gaussian", "missing")


@dataclass
class SyntheticDataConfig:
    M: int = 2
    K: int = 4
    samples_per_class: int = 50
    input_dims: list[int] = field(default_factory=lambda: [16, 16])
    latent_dim: int = 4
    nuisance_dim: int = 4
    separation: float = 2.0
    shared_std: float = 1.0
    signal_strength: list[float] = field(default_factory=lambda: [1.0, 1.0])
    nuisance_std: list[float] = field(default_factory=lambda: [0.5, 0.5])
    noise_std: float = 0.1
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.M < 2 or self.K < 2:
            raise ValueError("need M >= 2 modalities and K >= 2 classes")
        for name in ("input_dims", "signal_strength", "nuisance_std"):
            v = getattr(self, name)
            if len(v) != self.M:
                raise ValueError(f"{name} needs one entry per modality ({self.M}), got {len(v)}")
        scales = [self.separation, self.shared_std, self.noise_std, *self.signal_strength, *self.nuisance_std]
        if min(scales) < 0:
            raise ValueError("all scales must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def generate_dataset(cfg: SyntheticDataConfig) -> tuple[ModalityBatchSet, ModalityBatchSet]:
    """Deterministic train/test split.

    Within every class the sample order is shuffled once and the first
    ``floor(train_fraction * n)`` samples go to train; both splits are then
    sorted by original index, so class counts are exactly balanced.
    """
    rng = np.random.default_rng(cfg.seed)
    L, Ln = cfg.latent_dim, cfg.nuisance_dim
    mu = cfg.separation * rng.standard_normal((cfg.K, L))
    A = [rng.standard_normal((L, D)) / np.sqrt(L) for D in cfg.input_dims]
    Bm = [rng.standard_normal((Ln, D)) / np.sqrt(Ln) for D in cfg.input_dims]
    y = np.repeat(np.arange(cfg.K), cfg.samples_per_class)
    N = y.size
    u = mu[y] + cfg.shared_std * rng.standard_normal((N, L))
    xs, shared = [], []
    for m, D in enumerate(cfg.input_dims):
        v = rng.standard_normal((N, Ln))
        eps = rng.standard_normal((N, D))
        shared.append(cfg.signal_strength[m] * u @ A[m])
        xs.append(shared[-1] + cfg.nuisance_std[m] * v @ Bm[m] + cfg.noise_std * eps)
    n_train = int(np.floor(cfg.train_fraction * cfg.samples_per_class))
    train_idx, test_idx = [], []
    for k in range(cfg.K):
        members = np.flatnonzero(y == k)[rng.permutation(cfg.samples_per_class)]
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    names = [f"m{m}" for m in range(cfg.M)]
    splits = []
    for idx in (train_idx, test_idx):
        s = modality_set([x[idx] for x in xs], y[idx], names)
        s.aux["shared_inputs"] = [x[idx] for x in shared]
        splits.append(s)
    return splits[0], splits[1]


@dataclass
class CorruptionSpec:
    """One corruption family applied to one modality over a grid of severities.

    ``dropout``: zero a fraction ``rho`` of each sample's features.
    ``gaussian``: add ``sigma * scale * N(0, 1)``; ``scale`` defaults to the
    training-feature standard deviation of the target modality.
    ``missing``: zero the whole feature vector of each sample with probability ``p``.
    """

    kind: str
    target: int = 0
    severities: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    scale: float | None = None
    seed: int = 12345

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"kind must be one of {CORRUPTIONS}")
        if not self.severities:
            raise ValueError("severity grid must be nonempty")
        if min(self.severities) < 0:
            raise ValueError("severities must be >= 0")
        if self.kind in ("dropout", "missing") and max(self.severities) > 1:
            raise ValueError(f"{self.kind} severities are probabilities in [0, 1]")


def corrupt(x: np.ndarray, kind: str, severity: float, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    N, D = x.shape
    if kind == "dropout":
        n_drop = int(round(severity * D))
        for i in range(N):
            x[i, rng.permutation(D)[:n_drop]] = 0.0
    elif kind == "gaussian":
        x = x + severity * scale * rng.standard_normal((N, D))
    elif kind == "missing":
        x[rng.random(N) < severity] = 0.0
    else:
        raise ValueError(f"unknown corruption {kind!r}")
    return x
