"""End-to-end training with geometry-gradient injection on synthetic data.

Each step follows the per-modality loop: forward every encoder, normalize,
compute the dispersive and anchoring losses, pull task / dispersive / anchoring
gradients back to each encoder separately, combine the two geometry gradients
(Pareto or fixed weights) and take a plain gradient step. Classifier heads and
the fusion head only ever see the task loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import CorruptionSpec, corrupt
from .diagnostics import geometry_report
from .engine import (
    EncoderSpec,
    ParamStore,
    backward_to_params,
    ce_loss_and_grad,
    forward_array,
    init_encoder,
    init_head,
)
from .errors import DimensionMismatch
from .geom import ModalityBatchSet, modality_set, normalize_rows
from .losses import DEFAULT_T, DEFAULT_TAU, AnchorConfig, anchoring_loss, dispersive_loss_rbf
from .pareto import DEFAULT_BETA, FlatGradient, geometry_gradient

log = logging.getLogger(__name__)

TASK_MODES = ("decoupled", "fused-grad")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    dagr: bool = True
    use_pareto: bool = True
    beta: float = DEFAULT_BETA
    lambda_intra: float = 0.1
    lambda_inter: float = 0.05
    tau: float = DEFAULT_TAU
    t: float = DEFAULT_T
    embed_dim: int = 8
    hidden: list[int] = field(default_factory=lambda: [32])
    activation: str = "tanh"
    task_mode: str = "decoupled"
    diag_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.beta < 0 or self.lambda_intra < 0 or self.lambda_inter < 0 or self.tau < 0:
            raise ValueError("beta, lambdas and tau must be >= 0")
        if not self.t > 0:
            raise ValueError("t must be positive")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}")


def encoder_seed(seed: int, m: int) -> int:
    return 1_000_003 * seed + 2 * m + 1


def head_seed(seed: int, m: int) -> int:
    return 1_000_003 * seed + 2 * m + 2


@dataclass
class MultimodalModel:
    """Per-modality encoders and heads plus a concatenation fusion head."""

    specs: list[EncoderSpec]
    params: ParamStore
    names: list[str]
    n_classes: int

    @classmethod
    def init(cls, input_dims, n_classes: int, cfg: TrainConfig, names=None) -> "MultimodalModel":
        names = list(names) if names else [f"m{m}" for m in range(len(input_dims))]
        store = ParamStore()
        specs = []
        for m, D in enumerate(input_dims):
            spec = EncoderSpec([D, *cfg.hidden, cfg.embed_dim], [cfg.activation] * len(cfg.hidden), encoder_seed(cfg.seed, m))
            specs.append(spec)
            store.add(f"enc:{names[m]}", init_encoder(spec))
        for m in range(len(input_dims)):
            store.add(f"head:{names[m]}", {"W": init_head(n_classes, cfg.embed_dim, head_seed(cfg.seed, m))})
        store.add("fusion", {"W": init_head(n_classes, cfg.embed_dim * len(input_dims), head_seed(cfg.seed, len(input_dims)))})
        return cls(specs, store, names, n_classes)

    def enc(self, m: int):
        return self.params[f"enc:{self.names[m]}"]

    def head(self, m: int) -> np.ndarray:
        return self.params[f"head:{self.names[m]}"]["W"]

    @property
    def fusion(self) -> np.ndarray:
        return self.params["fusion"]["W"]

    def encode(self, inputs) -> list[np.ndarray]:
        return [forward_array(self.enc(m), self.specs[m], x)[0] for m, x in enumerate(inputs)]

    def predict(self, inputs) -> tuple[list[np.ndarray], np.ndarray]:
        zs = self.encode(inputs)
        uni = [np.argmax(z @ self.head(m).T, axis=1) for m, z in enumerate(zs)]
        fused = np.argmax(np.concatenate(zs, axis=1) @ self.fusion.T, axis=1)
        return uni, fused


@dataclass
class RunReport:
    config: dict
    seed: int
    epochs: list[int] = field(default_factory=list)
    unimodal_acc: list[list[float]] = field(default_factory=list)
    fused_acc: list[float] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    disp_loss: list[float] = field(default_factory=list)
    inter_loss: list[float] = field(default_factory=list)
    geometry_epochs: list[int] = field(default_factory=list)
    geometry: list[dict] = field(default_factory=list)
    alpha: list[list[float]] = field(default_factory=list)
    delta_hat: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[list]:
        """One row per epoch; geometry columns stay empty on epochs without diagnostics."""
        M = len(self.alpha)
        geo_cols = [f"eff_rank_m{m}" for m in range(M)] + ["delta_mu", "ks_distance", "excess_drift"]
        header = ["epoch", "task_loss", "disp_loss", "inter_loss", "fused_acc"] + [f"acc_m{m}" for m in range(M)] + geo_cols
        geo = dict(zip(self.geometry_epochs, self.geometry))
        rows = [header]
        for i, ep in enumerate(self.epochs):
            g = geo.get(ep)
            extra = [*g["effective_rank"], g["delta_mu"], g["ks_distance"], g["excess_drift"]] if g else [""] * len(geo_cols)
            extra = ["" if v is None else v for v in extra]
            rows.append([ep, self.task_loss[i], self.disp_loss[i], self.inter_loss[i], self.fused_acc[i], *self.unimodal_acc[i], *extra])
        return rows


def collapse_init(model: MultimodalModel, eps: float = 1e-12) -> MultimodalModel:
    """Adversarial rank-one start: every embedding and every head row lies along ``e_0``.

    That set is invariant under task-only descent, so without geometry terms the
    representation stays collapsed. ``eps`` keeps a tiny copy of the random
    initialization so the dispersive term has something to push on.
    """
    d = model.specs[0].d_out
    e = np.zeros(d)
    e[0] = 1.0
    for m, spec in enumerate(model.specs):
        p = model.enc(m)
        last = spec.n_layers - 1
        W, b = p[f"W{last}"], p[f"b{last}"]
        p[f"W{last}"] = np.outer(W[:, 0], e) + eps * W
        p[f"b{last}"] = b[0] * e + eps * b
        H = model.head(m)
        model.params[f"head:{model.names[m]}"]["W"] = np.outer(H[:, 0], e) + eps * H
    return model


def _safe_chain(z: np.ndarray, norms: np.ndarray, guarded: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Jacobian-transpose of row normalization; guarded (near-zero) rows get no gradient."""
    u = z / np.where(guarded, 1.0, norms)[:, None]
    radial = np.einsum("ij,ij->i", u, g)
    out = (g - radial[:, None] * u) / np.where(guarded, 1.0, norms)[:, None]
    out[guarded] = 0.0
    return out


@dataclass
class StepLog:
    task: float
    fused: float
    disp: list[float]
    inter: float
    alpha: list[float]
    g_task: list[np.ndarray] | None = None
    g_disp: list[np.ndarray] | None = None
    g_inter: list[np.ndarray] | None = None
    g_geom: list[np.ndarray] | None = None
    fusion_geom_grad: float = 0.0


def geometry_upstream(zs: list[np.ndarray], cfg: TrainConfig):
    """Dispersive and anchoring gradients w.r.t. the raw encoder outputs."""
    M = len(zs)
    normed = [normalize_rows(z) for z in zs]
    zt = [n[0] for n in normed]
    disp_vals, up_disp = [], []
    for m in range(M):
        if zt[m].shape[0] >= 2:
            r = dispersive_loss_rbf(zt[m], cfg.t)
            disp_vals.append(r.value)
            up_disp.append(_safe_chain(zs[m], normed[m][1], normed[m][2], r.grads[0]))
        else:
            disp_vals.append(0.0)
            up_disp.append(np.zeros_like(zs[m]))
    if M >= 2:
        r = anchoring_loss(zt, AnchorConfig(cfg.tau))
        inter_val = r.value
        up_inter = [_safe_chain(zs[m], normed[m][1], normed[m][2], r.grads[m]) for m in range(M)]
    else:
        inter_val, up_inter = 0.0, [np.zeros_like(z) for z in zs]
    return disp_vals, inter_val, up_disp, up_inter


def train_step(model: MultimodalModel, inputs, y, cfg: TrainConfig, keep_components: bool = False) -> StepLog:
    """One update of every parameter group; returns the losses measured before the update."""
    M = len(inputs)
    outs = [forward_array(model.enc(m), model.specs[m], inputs[m]) for m in range(M)]
    zs = [o[0] for o in outs]
    up_task, task_val, head_grads = [], 0.0, []
    for m in range(M):
        res, dW = ce_loss_and_grad(model.head(m), zs[m], y)
        task_val += res.value
        up_task.append(res.grads[0])
        head_grads.append(dW)
    zc = np.concatenate(zs, axis=1)
    fres, dF = ce_loss_and_grad(model.fusion, zc, y)
    if cfg.task_mode == "fused-grad":
        d = zs[0].shape[1]
        up_task = [up_task[m] + fres.grads[0][:, m * d : (m + 1) * d] for m in range(M)]

    logged = StepLog(task_val, fres.value, [0.0] * M, 0.0, [])
    if keep_components:
        logged.g_task, logged.g_disp, logged.g_inter, logged.g_geom = [], [], [], []
    updates = []
    if cfg.dagr:
        disp_vals, inter_val, up_disp, up_inter = geometry_upstream(zs, cfg)
        logged.disp, logged.inter = disp_vals, inter_val
        for m in range(M):
            group = f"enc:{model.names[m]}"
            g_task, g_disp, g_inter = backward_to_params(outs[m][1], [up_task[m], up_disp[m], up_inter[m]], group)
            dec = geometry_gradient(g_inter, g_disp, cfg.beta, cfg.use_pareto, cfg.lambda_inter, cfg.lambda_intra)
            logged.alpha.append(dec.alpha_star)
            updates.append(g_task.values + dec.g_geom.values)
            if keep_components:
                logged.g_task.append(g_task.values)
                logged.g_disp.append(g_disp.values)
                logged.g_inter.append(g_inter.values)
                logged.g_geom.append(dec.g_geom.values)
    else:
        # geometry losses are still measured so runs stay comparable; they are never applied
        logged.disp, logged.inter, _, _ = geometry_upstream(zs, cfg)
        for m in range(M):
            updates.append(backward_to_params(outs[m][1], up_task[m], f"enc:{model.names[m]}").values)

    for m in range(M):
        group = f"enc:{model.names[m]}"
        model.params.set_flat(group, model.params.flat(group) - cfg.lr * updates[m])
        model.params[f"head:{model.names[m]}"]["W"] = model.head(m) - cfg.lr * head_grads[m]
    model.params["fusion"]["W"] = model.fusion - cfg.lr * dF
    return logged


def composite_objective(model: MultimodalModel, inputs, y, cfg: TrainConfig) -> tuple[float, np.ndarray]:
    """Value and exact gradient of every parameter (registration order) for

    ``sum_m CE_m + CE_fused + lambda_intra * sum_m L_disp^m + lambda_inter * L_inter``

    with the geometry terms on normalized embeddings. This is the fixed-weight
    objective whose encoder gradient a ``fused-grad`` step follows.
    """
    M = len(inputs)
    outs = [forward_array(model.enc(m), model.specs[m], inputs[m]) for m in range(M)]
    zs = [o[0] for o in outs]
    value, ups, head_grads = 0.0, [], []
    for m in range(M):
        res, dW = ce_loss_and_grad(model.head(m), zs[m], y)
        value += res.value
        ups.append(res.grads[0])
        head_grads.append(dW)
    fres, dF = ce_loss_and_grad(model.fusion, np.concatenate(zs, axis=1), y)
    value += fres.value
    disp_vals, inter_val, up_disp, up_inter = geometry_upstream(zs, cfg)
    value += cfg.lambda_intra * sum(disp_vals) + cfg.lambda_inter * inter_val
    d = zs[0].shape[1]
    grads = {}
    for m in range(M):
        up = ups[m] + fres.grads[0][:, m * d : (m + 1) * d] + cfg.lambda_intra * up_disp[m] + cfg.lambda_inter * up_inter[m]
        grads[f"enc:{model.names[m]}"] = backward_to_params(outs[m][1], up).values
        grads[f"head:{model.names[m]}"] = head_grads[m].ravel()
    grads["fusion"] = dF.ravel()
    return float(value), np.concatenate([grads[g] for g in model.params.groups])


def flat_params(model: MultimodalModel) -> np.ndarray:
    return np.concatenate([model.params.flat(g) for g in model.params.groups])


def set_flat_params(model: MultimodalModel, vec: np.ndarray):
    i = 0
    for g in list(model.params.groups):
        n = model.params.flat(g).size
        model.params.set_flat(g, np.asarray(vec[i : i + n], dtype=np.float64))
        i += n


def evaluate(split: ModalityBatchSet, model: MultimodalModel) -> dict:
    """Argmax accuracy of every unimodal head and of the fusion head."""
    y = split.labels
    uni, fused = model.predict(split.arrays())
    return {"unimodal": [float(np.mean(p == y)) for p in uni], "fused": float(np.mean(fused == y))}


def embeddings(split: ModalityBatchSet, model: MultimodalModel) -> ModalityBatchSet:
    return modality_set(model.encode(split.arrays()), split.labels, model.names)


def train(data: tuple[ModalityBatchSet, ModalityBatchSet], cfg: TrainConfig, model: MultimodalModel | None = None,
          keep_components: bool = False, on_epoch=None) -> tuple[RunReport, MultimodalModel, list[StepLog]]:
    """Run the full loop; returns the report, the trained model and per-step logs.

    ``on_epoch(epoch, model)`` runs after initialization (epoch 0) and after every epoch.
    """
    train_split, test_split = data
    if model is None:
        model = MultimodalModel.init(
            [b.d for b in train_split.batches], int(max(train_split.labels.max(), test_split.labels.max())) + 1, cfg,
            train_split.modality_names,
        )
    M = train_split.M
    X = train_split.arrays()
    y = train_split.labels
    N = train_split.B
    rng = np.random.default_rng(cfg.seed)
    report = RunReport(config=asdict(cfg), seed=cfg.seed, alpha=[[] for _ in range(M)])
    steps: list[StepLog] = []
    if on_epoch:
        on_epoch(0, model)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N) if cfg.batch_size < N else np.arange(N)
        ep_logs = []
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            s = train_step(model, [x[idx] for x in X], y[idx], cfg, keep_components)
            ep_logs.append(s)
            for m, a in enumerate(s.alpha):
                report.alpha[m].append(a)
        steps.extend(ep_logs)
        report.epochs.append(epoch)
        report.task_loss.append(float(np.mean([s.task for s in ep_logs])))
        report.disp_loss.append(float(np.mean([np.mean(s.disp) for s in ep_logs])))
        report.inter_loss.append(float(np.mean([s.inter for s in ep_logs])))
        acc = evaluate(test_split, model)
        report.unimodal_acc.append(acc["unimodal"])
        report.fused_acc.append(acc["fused"])
        if cfg.diag_every and (epoch % cfg.diag_every == 0 or epoch == cfg.epochs):
            report.geometry_epochs.append(epoch)
            report.geometry.append(geometry_report(embeddings(test_split, model), cfg.tau, cfg.t, seed=cfg.seed).to_dict())
        log.debug("epoch %d task %.4f fused acc %.3f", epoch, report.task_loss[-1], acc["fused"])
        if on_epoch:
            on_epoch(epoch, model)
    return report, model, steps


def objective_parts(split: ModalityBatchSet, model: MultimodalModel, cfg: TrainConfig) -> dict:
    """Full-split values of the summed task loss, summed dispersive loss and anchoring loss."""
    zs = model.encode(split.arrays())
    task = sum(ce_loss_and_grad(model.head(m), z, split.labels)[0].value for m, z in enumerate(zs))
    disp_vals, inter, _, _ = geometry_upstream(zs, cfg)
    return {"task": task, "disp": float(sum(disp_vals)), "inter": inter}


def non_anchoring_objective(parts: dict, cfg: TrainConfig) -> float:
    return parts["task"] + cfg.lambda_intra * parts["disp"]


def _train_tied(x: np.ndarray, y: np.ndarray, n_classes: int, M: int, cfg: TrainConfig) -> dict:
    """One encoder shared by all modalities, each modality keeping its own head.

    Full-batch descent on ``sum_m CE_m + lambda_intra * M * L_disp``: every
    modality sees the same embedding, so its dispersive term is counted once
    per modality.
    """
    spec = EncoderSpec([x.shape[1], *cfg.hidden, cfg.embed_dim], [cfg.activation] * len(cfg.hidden), encoder_seed(cfg.seed, 0))
    store = ParamStore()
    store.add("enc:tied", init_encoder(spec))
    heads = [init_head(n_classes, cfg.embed_dim, head_seed(cfg.seed, m)) for m in range(M)]

    def evaluate_tied():
        z, tape = forward_array(store["enc:tied"], spec, x)
        task, up, dWs = 0.0, np.zeros_like(z), []
        for m in range(M):
            res, dW = ce_loss_and_grad(heads[m], z, y)
            task += res.value
            up += res.grads[0]
            dWs.append(dW)
        zt, norms, guarded = normalize_rows(z)
        disp = dispersive_loss_rbf(zt, cfg.t)
        up += M * cfg.lambda_intra * _safe_chain(z, norms, guarded, disp.grads[0])
        return task, M * disp.value, tape, up, dWs

    for _ in range(cfg.epochs):
        _, _, tape, up, dWs = evaluate_tied()
        store.set_flat("enc:tied", store.flat("enc:tied") - cfg.lr * backward_to_params(tape, up).values)
        heads = [W - cfg.lr * dW for W, dW in zip(heads, dWs)]
    task, disp, _, _, _ = evaluate_tied()
    return {"task": task, "disp": disp}


def estimate_modality_gap(data, cfg: TrainConfig) -> dict:
    """Tied-minus-free value of ``sum_m CE_m + lambda_intra * sum_m L_disp^m`` after equal budgets.

    The free run is the usual model with anchoring switched off. The tied run
    feeds one shared encoder the modality average of the nuisance-free inputs
    (``aux["shared_inputs"]`` when the split carries it, the raw inputs
    otherwise), so every modality gets the same embedding. Both runs use
    fixed weights and full-batch steps. ``delta_hat`` clips the raw gap at 0.
    """
    train_split, _ = data
    if train_split.M != 2:
        raise ValueError("the modality gap estimate is defined for two modalities")
    pathway = train_split.aux.get("shared_inputs", train_split.arrays())
    if len({x.shape[1] for x in pathway}) != 1:
        raise DimensionMismatch("a shared input pathway needs equal input widths")
    base = replace(cfg, dagr=True, use_pareto=False, batch_size=train_split.B, lambda_inter=0.0, diag_every=0)
    _, free_model, _ = train(data, base)
    free_parts = objective_parts(train_split, free_model, base)
    K = int(max(d.labels.max() for d in data)) + 1
    tied_parts = _train_tied(np.mean(pathway, axis=0), train_split.labels, K, train_split.M, base)
    free_obj = non_anchoring_objective(free_parts, base)
    tied_obj = non_anchoring_objective(tied_parts, base)
    raw = tied_obj - free_obj
    return {
        "delta_hat": max(raw, 0.0),
        "raw_gap": raw,
        "tied_objective": tied_obj,
        "free_objective": free_obj,
        "tied_task": tied_parts["task"],
        "tied_disp": tied_parts["disp"],
        "free_task": free_parts["task"],
        "free_disp": free_parts["disp"],
    }


def robustness_sweep(data, model: MultimodalModel, spec: CorruptionSpec) -> dict:
    """Accuracy curves with one modality corrupted at test time only."""
    train_split, test_split = data
    m = spec.target
    scale = spec.scale
    if scale is None:
        scale = float(np.std(train_split.arrays()[m]))
    clean = evaluate(test_split, model)
    curves = {"severity": [], "unimodal": [], "fused": []}
    for sev in spec.severities:
        rng = np.random.default_rng(spec.seed)
        arrays = list(test_split.arrays())
        arrays[m] = corrupt(arrays[m], spec.kind, sev, rng, scale)
        acc = evaluate(modality_set(arrays, test_split.labels, test_split.modality_names), model)
        curves["severity"].append(float(sev))
        curves["unimodal"].append(acc["unimodal"])
        curves["fused"].append(acc["fused"])
    target_curve = [u[m] for u in curves["unimodal"]]
    return {
        "kind": spec.kind,
        "target": m,
        "scale": scale,
        "clean": clean,
        **curves,
        "monotone_target": bool(all(b <= a for a, b in zip(target_curve, target_curve[1:]))),
        "monotone_fused": bool(all(b <= a for a, b in zip(curves["fused"], curves["fused"][1:]))),
    }
