"""Dispersive and anchoring geometry regularization for multimodal encoders.

Submodules:
    geom         embedding batches, normalization, pairwise distances
    losses       dispersive and anchoring losses with analytic gradients
    pareto       closed-form two-gradient balancing
    engine       small MLP encoders, reverse-mode gradients, finite differences
    flow         particle flows on the sphere, null-space rotations
    diagnostics  effective rank, semantic margin, KS, Recall@K
    data         synthetic multimodal data and corruptions
    trainer      the training loop, gap estimation, robustness sweeps
    config, io, cli  the command-line surface
"""

__version__ = "0.1.0"

from .errors import DagrError  # noqa: E402,F401
from .geom import EmbeddingBatch, ModalityBatchSet, modality_set  # noqa: E402,F401
