"""Finite-difference verification of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import EncoderSpec, backward_to_params, ce_loss_and_grad, finite_diff_check, forward_array, init_encoder
from .geom import normalize_rows
from .losses import (
    DEFAULT_T,
    DEFAULT_TAU,
    AnchorConfig,
    DagrWeights,
    HingePotential,
    anchoring_loss,
    chain_through_normalization,
    dagr_total,
    dispersive_loss_general,
    dispersive_loss_rbf,
)
from .trainer import MultimodalModel, TrainConfig, composite_objective, flat_params, set_flat_params


@dataclass
class GradCheckSummary:
    checks: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5
    step: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.checks.values()) if self.checks else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def to_dict(self) -> dict:
        return {**asdict(self), "max_error": self.max_error, "passed": self.passed}


def _stack_loss(fn, shapes):
    """Adapt ``fn(list_of_arrays) -> LossResult`` to a flat-vector ``(value, grad)`` callable."""
    sizes = [int(np.prod(s)) for s in shapes]

    def wrapped(vec):
        parts, i = [], 0
        for shape, n in zip(shapes, sizes):
            parts.append(vec[i : i + n].reshape(shape))
            i += n
        r = fn(parts)
        return r.value, np.concatenate([g.ravel() for g in r.grads])

    return wrapped


def _corrupted(fn, scale: float = 1e-3):
    """Negative control: shift the first analytic gradient entry."""
    def wrapped(vec):
        value, g = fn(vec)
        g = np.array(g, dtype=np.float64, copy=True)
        g.flat[0] += scale * (1.0 + abs(g.flat[0]))
        return value, g

    return wrapped


def gradient_suite(B: int = 6, d: int = 4, M: int = 2, trials: int = 3, hinge_margin: float = 2.0,
                   step: float = 1e-5, tol: float = 1e-5, t: float = DEFAULT_T, tau: float = DEFAULT_TAU,
                   seed: int = 0, corrupt: bool = False) -> GradCheckSummary:
    """Worst relative error per loss over ``trials`` random instances.

    Covers both dispersive forms, anchoring, the combined regularizer, the
    normalization chain rule, cross-entropy, encoder backprop and the full
    composite training objective.
    """
    rng = np.random.default_rng(seed)
    out = GradCheckSummary(tol=tol, step=step)

    def record(name, fn, x):
        err = finite_diff_check(_corrupted(fn) if corrupt else fn, x, step)
        out.checks[name] = max(out.checks.get(name, 0.0), err)

    for _ in range(trials):
        z = rng.standard_normal((B, d))
        u = normalize_rows(z)[0]
        zs = [rng.standard_normal((B, d)) for _ in range(M)]
        one = [(B, d)]
        many = [(B, d)] * M
        # the losses act on unit vectors; that is where their gradients are checked
        record("dispersive_rbf", _stack_loss(lambda p: dispersive_loss_rbf(p[0], t), one), u.ravel())
        hinge = HingePotential(hinge_margin)
        record("dispersive_hinge", _stack_loss(lambda p: dispersive_loss_general(p[0], hinge), one), u.ravel())
        anchor_zs = [normalize_rows(a)[0] for a in zs]
        record("anchoring", _stack_loss(lambda p: anchoring_loss(p, AnchorConfig(tau)), many), np.concatenate([a.ravel() for a in anchor_zs]))
        record("dagr_total", _stack_loss(lambda p: dagr_total(p, DagrWeights(0.7, 1.3), AnchorConfig(tau), t), many),
               np.concatenate([a.ravel() for a in anchor_zs]))

        def normalized_disp(vec):
            x = vec.reshape(B, d)
            r = dispersive_loss_rbf(normalize_rows(x)[0], t)
            return r.value, chain_through_normalization(x, r.grads[0]).ravel()

        record("normalization_chain", normalized_disp, z.ravel())

        K = 3
        y = rng.integers(0, K, B)
        W = rng.standard_normal((K, d)) / np.sqrt(d)  # head scale used at initialization

        def ce_z(vec):
            r, _ = ce_loss_and_grad(W, vec.reshape(B, d), y)
            return r.value, r.grads[0].ravel()

        def ce_w(vec):
            r, dW = ce_loss_and_grad(vec.reshape(K, d), z, y)
            return r.value, dW.ravel()

        record("cross_entropy_z", ce_z, z.ravel())
        record("cross_entropy_W", ce_w, W.ravel())

        spec = EncoderSpec([5, 6, d], ["tanh"], int(rng.integers(0, 2**31)))
        params = init_encoder(spec)
        keys = list(params)
        x_in = rng.standard_normal((B, 5))
        G = rng.standard_normal((B, d))

        def encoder_fn(vec):
            p, i = {}, 0
            for k in keys:
                p[k] = vec[i : i + params[k].size].reshape(params[k].shape)
                i += params[k].size
            zz, tape = forward_array(p, spec, x_in)
            return float(np.sum(zz * G)), backward_to_params(tape, G).values

        record("encoder_backprop", encoder_fn, np.concatenate([params[k].ravel() for k in keys]))

        cfg = TrainConfig(hidden=[6], embed_dim=d, lambda_intra=0.7, lambda_inter=1.3, tau=tau, t=t,
                          seed=int(rng.integers(0, 2**31)))
        model = MultimodalModel.init([5] * M, K, cfg)
        inputs = [rng.standard_normal((B, 5)) for _ in range(M)]

        def composite(vec):
            set_flat_params(model, vec)
            return composite_objective(model, inputs, y, cfg)

        record("composite_pipeline", composite, flat_params(model).copy())
    return out
