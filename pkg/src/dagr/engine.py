"""Reverse-mode gradients for small MLP encoders and linear softmax heads.

Only the operators the training loop needs are supported: affine layers,
relu/tanh/identity activations and mean softmax cross-entropy. Weights are
initialized from a SplitMix64 stream so the initial parameters are a pure
function of the seed, independent of numpy's generator implementation.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch, TapeConsumed
from .geom import EmbeddingBatch
from .losses import LossResult
from .pareto import FlatGradient

MASK64 = (1 << 64) - 1
ACTIVATIONS = ("identity", "relu", "tanh")


class SplitMix64:
    """SplitMix64 (Steele, Lea, Flood 2014).

    ``next_u64`` advances the state by the golden-gamma increment and applies
    the standard 30/27/31 xor-shift-multiply finalizer. ``next_float`` keeps
    the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1).
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        return np.array([lo + (hi - lo) * self.next_float() for _ in range(n)])


@dataclass
class EncoderSpec:
    """Layer widths ``[d_in, hidden..., d_out]``; one activation per hidden layer."""

    widths: list[int]
    activations: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeMismatch(f"encoder needs >= 1 layer with positive widths, got {self.widths}")
        n_hidden = len(self.widths) - 2
        if not self.activations:
            self.activations = ["relu"] * n_hidden
        if len(self.activations) != n_hidden:
            raise ShapeMismatch(f"expected {n_hidden} activations, got {len(self.activations)}")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]


def init_linear(rng: SplitMix64, fan_in: int, fan_out: int, bias: bool = True) -> dict[str, np.ndarray]:
    """Weights (fan_in x fan_out, row-major draw order) then biases, all U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    out = {"W": rng.uniform(-bound, bound, fan_in * fan_out).reshape(fan_in, fan_out)}
    if bias:
        out["b"] = rng.uniform(-bound, bound, fan_out)
    return out


def init_encoder(spec: EncoderSpec) -> dict[str, np.ndarray]:
    rng = SplitMix64(spec.seed)
    params = {}
    for layer in range(spec.n_layers):
        p = init_linear(rng, spec.widths[layer], spec.widths[layer + 1])
        params[f"W{layer}"] = p["W"]
        params[f"b{layer}"] = p["b"]
    return params


def init_head(n_classes: int, d: int, seed: int) -> np.ndarray:
    """A ``K x d`` classifier matrix (no bias)."""
    return init_linear(SplitMix64(seed), d, n_classes, bias=False)["W"].T.copy()


class ParamStore:
    """Named parameter groups in registration order.

    Flattening always follows that order, so inner products between flattened
    gradients are reproducible.
    """

    def __init__(self):
        self.groups: OrderedDict[str, OrderedDict[str, np.ndarray]] = OrderedDict()

    def add(self, group: str, params: dict[str, np.ndarray]):
        self.groups[group] = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in params.items())

    def __getitem__(self, group: str):
        return self.groups[group]

    def __contains__(self, group: str):
        return group in self.groups

    def flat(self, group: str) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.groups[group].values()])

    def unflatten(self, group: str, vec: np.ndarray) -> OrderedDict:
        out, i = OrderedDict(), 0
        for k, v in self.groups[group].items():
            out[k] = np.asarray(vec[i : i + v.size]).reshape(v.shape)
            i += v.size
        return out

    def set_flat(self, group: str, vec: np.ndarray):
        self.groups[group] = self.unflatten(group, vec)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for g, ps in self.groups.items():
            other.add(g, {k: v.copy() for k, v in ps.items()})
        return other

    def to_dict(self) -> dict:
        return {g: {k: v.tolist() for k, v in ps.items()} for g, ps in self.groups.items()}


class Tape:
    """Forward intermediates of one encoder pass; backward may run once."""

    def __init__(self, spec: EncoderSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.inputs: list[np.ndarray] = []
        self.preacts: list[np.ndarray] = []
        self.consumed = False


def _activate(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(h, 0.0)
    if name == "tanh":
        return np.tanh(h)
    return h


def _activate_grad(name: str, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (h > 0)
    if name == "tanh":
        return g * (1.0 - np.tanh(h) ** 2)
    return g


def forward_array(params: dict[str, np.ndarray], spec: EncoderSpec, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ShapeMismatch(f"encoder expects B x {spec.d_in} inputs, got {x.shape}")
    tape = Tape(spec, params)
    h = x
    for layer in range(spec.n_layers):
        tape.inputs.append(h)
        pre = h @ params[f"W{layer}"] + params[f"b{layer}"]
        tape.preacts.append(pre)
        act = spec.activations[layer] if layer < spec.n_layers - 1 else "identity"
        h = _activate(act, pre)
    return h, tape


def encoder_forward(params: dict[str, np.ndarray], spec: EncoderSpec, inputs: np.ndarray) -> tuple[EmbeddingBatch, Tape]:
    z, tape = forward_array(params, spec, inputs)
    return EmbeddingBatch(z), tape


def _backward_one(tape: Tape, g: np.ndarray) -> OrderedDict:
    spec, params = tape.spec, tape.params
    grads = OrderedDict()
    for layer in reversed(range(spec.n_layers)):
        act = spec.activations[layer] if layer < spec.n_layers - 1 else "identity"
        g = _activate_grad(act, tape.preacts[layer], g)
        grads[f"W{layer}"] = tape.inputs[layer].T @ g
        grads[f"b{layer}"] = g.sum(axis=0)
        if layer > 0:
            g = g @ params[f"W{layer}"].T
    # registration order: W0, b0, W1, b1, ...
    return OrderedDict((k, grads[k]) for k in params)


def backward_to_params(tape: Tape, upstream, group: str = "") -> FlatGradient | list[FlatGradient]:
    """Exact parameter gradients for one or several upstream embedding gradients.

    Passing a list returns one FlatGradient per entry; the tape is consumed
    either way.
    """
    if tape.consumed:
        raise TapeConsumed("tape already used for a backward pass")
    single = isinstance(upstream, np.ndarray)
    ups = [upstream] if single else list(upstream)
    out_shape = tape.preacts[-1].shape
    for g in ups:
        if np.shape(g) != out_shape:
            raise ShapeMismatch(f"upstream gradient shape {np.shape(g)} != forward output {out_shape}")
    tape.consumed = True
    flats = [
        FlatGradient(np.concatenate([v.ravel() for v in _backward_one(tape, np.asarray(g, dtype=np.float64)).values()]), group)
        for g in ups
    ]
    return flats[0] if single else flats


def ce_loss_and_grad(W: np.ndarray, z, y) -> tuple[LossResult, np.ndarray]:
    """Mean softmax cross-entropy of logits ``z W^T``.

    Returns the loss with its gradient w.r.t. ``z`` and, separately, the
    gradient w.r.t. ``W``.
    """
    z = z.data if isinstance(z, EmbeddingBatch) else np.asarray(z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    K = W.shape[0]
    if z.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"head expects width {W.shape[1]}, embeddings have {z.shape[1]}")
    if y.shape != (z.shape[0],):
        raise ShapeMismatch("one label per row required")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    B = z.shape[0]
    logits = z @ W.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(B)
    value = -logp[rows, y].mean()
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= B
    return LossResult(float(value), [delta @ W]), delta.T @ z


def central_diff_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central differences, second order (2-point) or fourth order (4-point stencil)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        def f(delta):
            xp = flat.copy()
            xp[i] += delta
            return fn(xp.reshape(x.shape))

        if order == 2:
            out[i] = (f(step) - f(-step)) / (2 * step)
        elif order == 4:
            out[i] = (8 * (f(step) - f(-step)) - (f(2 * step) - f(-2 * step))) / (12 * step)
        else:
            raise ValueError("order must be 2 or 4")
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n)))) if a.size else 0.0


def finite_diff_check(loss_fn: Callable, params: np.ndarray, step: float = 1e-5, order: int = 2) -> float:
    """Max relative error between the analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(value, gradient)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    _, analytic = loss_fn(params)
    numeric = central_diff_grad(lambda p: loss_fn(p)[0], params, step, order)
    return relative_error(analytic, numeric)


def stack_params(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unstack_params(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, i = [], 0
    for a in like:
        out.append(vec[i : i + a.size].reshape(a.shape))
        i += a.size
    return out
