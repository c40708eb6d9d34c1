"""Two-objective min-norm weighting of the geometry gradients.

Each encoder parameter group is solved independently; the fusion head never
goes through here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupMismatch, NonFiniteGradient

DEGENERATE_DENOM = 1e-24
DEFAULT_BETA = 0.15


@dataclass
class FlatGradient:
    values: np.ndarray
    group: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteGradient(f"non-finite entries in gradient of group {self.group!r}")

    def __len__(self):
        return self.values.size


@dataclass
class ParetoDecision:
    alpha_star: float
    g_geom: FlatGradient
    effective_lambda_inter: float
    effective_lambda_intra: float
    degenerate: bool = False


def _check_pair(g_inter: FlatGradient, g_intra: FlatGradient):
    if g_inter.group != g_intra.group:
        raise GroupMismatch(f"gradient groups differ: {g_inter.group!r} vs {g_intra.group!r}")
    if len(g_inter) != len(g_intra):
        raise GroupMismatch(f"gradient lengths differ: {len(g_inter)} vs {len(g_intra)}")


def solve_alpha_raw(g_inter: FlatGradient, g_intra: FlatGradient) -> tuple[float, bool]:
    """Returns ``(alpha*, degenerate)``; alpha* minimizes ``||a g_inter + (1-a) g_intra||`` over [0, 1]."""
    _check_pair(g_inter, g_intra)
    a, b = g_inter.values, g_intra.values
    diff = a - b
    denom = float(diff @ diff)
    if denom < DEGENERATE_DENOM:
        return 0.5, True
    raw = float(b @ b - a @ b) / denom
    return min(max(raw, 0.0), 1.0), False


def solve_alpha(g_inter: FlatGradient, g_intra: FlatGradient) -> float:
    return solve_alpha_raw(g_inter, g_intra)[0]


def geometry_gradient(
    g_inter: FlatGradient,
    g_intra: FlatGradient,
    beta: float = DEFAULT_BETA,
    use_pareto: bool = True,
    lambda_inter: float = 0.0,
    lambda_intra: float = 0.0,
) -> ParetoDecision:
    """Combine the two geometry gradients of one parameter group.

    With ``use_pareto`` the weights are ``beta * alpha*`` and ``beta * (1 - alpha*)``;
    otherwise the caller's fixed ``lambda_inter`` / ``lambda_intra`` are used and
    ``alpha_star`` reports the fixed mix ratio (0.5 when both are zero).
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    _check_pair(g_inter, g_intra)
    if use_pareto:
        alpha, degenerate = solve_alpha_raw(g_inter, g_intra)
        w_inter, w_intra = beta * alpha, beta * (1.0 - alpha)
        g = beta * (alpha * g_inter.values + (1.0 - alpha) * g_intra.values)
    else:
        degenerate = False
        w_inter, w_intra = lambda_inter, lambda_intra
        tot = w_inter + w_intra
        alpha = w_inter / tot if tot > 0 else 0.5
        g = w_inter * g_inter.values + w_intra * g_intra.values
    return ParetoDecision(alpha, FlatGradient(g, g_inter.group), w_inter, w_intra, degenerate)
