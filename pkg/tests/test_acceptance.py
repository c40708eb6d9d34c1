"""Acceptance criteria 1-10, each reported as a single PASS/FAIL line."""

import time

import numpy as np
import pytest

import reference as ref
import scenarios as sc
from conftest import ACCEPTANCE_LINES
from dagr.checks import gradient_suite
from dagr.data import CorruptionSpec, SyntheticDataConfig, generate_dataset
from dagr.diagnostics import (
    SimilaritySamples,
    effective_rank,
    ks_distance,
    recall_at_k,
    semantic_margin,
)
from dagr.engine import ce_loss_and_grad
from dagr.flow import FlowConfig, build_nullspace_rotation, certify_ambiguity, run_flow
from dagr.geom import covariance
from dagr.losses import HingePotential, dispersive_loss_general, dispersive_loss_rbf, repulsion_weights
from dagr.pareto import FlatGradient, solve_alpha_raw
from dagr.trainer import TrainConfig, estimate_modality_gap, flat_params, robustness_sweep, train


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(2024)
    start, worst, worst_name = time.perf_counter(), 0.0, ""
    for k in range(100):
        B, d, M = int(rng.integers(2, 17)), int(rng.integers(2, 9)), int(rng.integers(2, 4))
        summary = gradient_suite(B=B, d=d, M=M, trials=1, seed=k)
        name = max(summary.checks, key=summary.checks.get)
        if summary.checks[name] > worst:
            worst, worst_name = summary.checks[name], name
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-5 and elapsed < 60,
           f"100 instances, max relative error {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_2_repulsion_reconstruction():
    worst_res, min_w = 0.0, np.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        B, d = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        z = ref.unit_rows(rng, B, d)
        for pot in (None, HingePotential(2.0)):
            grad = (dispersive_loss_rbf(z) if pot is None else dispersive_loss_general(z, pot)).grads[0]
            w = repulsion_weights(z, pot)
            recon = np.stack([sum(w[i, j] * (z[i] - z[j]) for j in range(B)) for i in range(B)])
            worst_res = max(worst_res, float(np.abs(recon + grad).max()))
            min_w = min(min_w, float(w.min()))
    report(2, min_w >= 0 and worst_res <= 1e-9,
           f"100 seeds x (rbf, hinge): min weight {min_w:.2e}, max residual {worst_res:.2e}")


def test_criterion_3_pareto_closed_form():
    rng = np.random.default_rng(7)
    pairs = [(rng.standard_normal(n), rng.standard_normal(n)) for n in rng.integers(1, 9, 100)]
    # forced clipping: g_inter a longer copy of g_intra (raw < 0), or the reverse (raw > 1)
    for _ in range(10):
        v = rng.standard_normal(4)
        pairs += [(2.0 * v, v), (v, 2.0 * v)]
    worst, clipped, ok = 0.0, 0, True
    for a, b in pairs:
        alpha, degenerate = solve_alpha_raw(FlatGradient(a), FlatGradient(b))
        grid_alpha, grid_best = ref.alpha_grid(a, b)
        ours = float(np.sum((alpha * a + (1 - alpha) * b) ** 2))
        worst = max(worst, ours - grid_best)
        if alpha in (0.0, 1.0):
            clipped += 1
            ok &= grid_alpha == alpha
    same = rng.standard_normal(5)
    tie = solve_alpha_raw(FlatGradient(same), FlatGradient(same.copy()))
    ok &= worst <= 1e-10 and clipped >= 20 and tie == (0.5, True)
    report(3, ok, f"{len(pairs)} pairs, objective excess over grid {worst:.1e}, {clipped} clipped, tie -> {tie}")


def test_criterion_4_flow_dispersion():
    start = time.perf_counter()
    base = dict(B=64, d=8, t=2.0, eta=0.05, steps=2000, init="collapsed")
    on = run_flow(FlowConfig(lambda_intra=1.0, **base))[0].eff_rank_series(0)
    off = run_flow(FlowConfig(lambda_intra=0.0, **base))[0].eff_rank_series(0)
    elapsed = time.perf_counter() - start
    ok = on[0] < 1.05 and on[-1] > 6 and max(off) < 1.05 and elapsed < 120
    report(4, ok, f"rank {on[0]:.4f} -> {on[-1]:.3f} with dispersion, max {max(off):.4f} without, {elapsed:.1f}s")


def test_criterion_5_drift_bounds():
    data = sc.gap_data([1.0, 1.0])
    gap = estimate_modality_gap(data, sc.gap_train_config())["delta_hat"]
    lams, ok, tightest = (0.1, 1.0, 10.0), gap > 0, np.inf
    for tau in (0.0, 0.25, 0.5):
        excess = []
        for lam in lams:
            ex, sq = sc.converged_drift(data, lam, tau)
            excess.append(ex)
            ok &= ex <= 1.1 * gap / lam and sq <= 1.1 * (2 * tau**2 + 2 * gap / lam)
            tightest = min(tightest, 1.1 * gap / lam - ex)
        ok &= excess[0] >= excess[1] >= excess[2]
    report(5, bool(ok), f"gap estimate {gap:.3f}; 9 (tau, lambda) cells, smallest bound slack {tightest:.4f}")


def test_criterion_6_geometric_ambiguity():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 8))
    Z = ref.unit_rows(rng, 50, 8)
    y = rng.integers(0, 3, 50)
    rot = build_nullspace_rotation(W)
    rep = certify_ambiguity([W], [Z], [y], [rot])
    ok = (rep["max_orthogonality_residual"] <= 1e-10 and rep["max_logit_preservation_residual"] <= 1e-10
          and rep["mean_displacement"] > 0.1 and rep["max_ce_deviation"] <= 1e-12)
    report(6, ok, f"|R^T R - I| {rep['max_orthogonality_residual']:.1e}, |WR - W| {rep['max_logit_preservation_residual']:.1e}, "
                  f"mean |Rz - z| {rep['mean_displacement']:.3f}, CE change {rep['max_ce_deviation']:.1e}")


def test_criterion_7_algorithm_fidelity():
    err = sc.hand_step_error()
    data = generate_dataset(SyntheticDataConfig())
    a, ma, _ = train(data, TrainConfig(epochs=3, dagr=False))
    b, mb, _ = train(data, TrainConfig(epochs=3, dagr=True, use_pareto=True, beta=0.0))
    strip = lambda r: str({k: v for k, v in r.to_dict().items() if k not in ("config", "alpha")})
    same = strip(a) == strip(b) and np.array_equal(flat_params(ma), flat_params(mb))
    report(7, err <= 1e-10 and same, f"hand step max difference {err:.1e}; beta=0 report and parameters identical to baseline: {same}")


def test_criterion_8_diagnostics_oracles():
    rng = np.random.default_rng(99)
    bad = {"ks": 0, "recall": 0, "delta_sem": 0, "eff_rank": 0}
    for _ in range(1000):
        a = (rng.integers(-3, 4, rng.integers(1, 11)) / 3).tolist()
        b = (rng.integers(-3, 4, rng.integers(1, 11)) / 3).tolist()
        bad["ks"] += abs(ks_distance(SimilaritySamples(a, b)) - ref.ks(a, b)) > 1e-12
        B, d = int(rng.integers(2, 11)), int(rng.integers(1, 5))
        q, g = ref.unit_rows(rng, B, d), ref.unit_rows(rng, B, d)
        k = int(rng.integers(1, B + 1))
        bad["recall"] += abs(recall_at_k(q, g, k) - ref.recall_at_k(q, g, k)) > 1e-12
        labels = rng.integers(0, 3, B)
        labels[:2] = [0, 1]
        x = rng.standard_normal((B, d))
        bad["delta_sem"] += abs(semantic_margin(x, labels, normalize=False) - ref.delta_sem(x, labels.tolist())) > 1e-10
        bad["eff_rank"] += bool(abs(effective_rank(covariance(q)) - ref.effective_rank_from_rows(q)) > 1e-9)
    report(8, sum(bad.values()) == 0, f"1000 cases each, mismatches {bad}")


def test_criterion_9_imbalanced_trend():
    runs = {False: [], True: []}
    for seed in range(5):
        data = generate_dataset(SyntheticDataConfig(**{**sc.IMBALANCED_DATA.__dict__, "seed": seed}))
        for dagr in (False, True):
            rep, _, _ = train(data, TrainConfig(seed=seed, dagr=dagr))
            g = rep.geometry[-1]
            runs[dagr].append([rep.fused_acc[-1], np.mean(g["effective_rank"]), g["delta_mu"], g["ks_distance"]])
    base, ours = np.mean(runs[False], axis=0), np.mean(runs[True], axis=0)
    ok = ours[0] >= base[0] - 0.005 and all(ours[1:] > base[1:])
    report(9, bool(ok), "5 seeds, baseline vs regularized: fused acc {:.4f}/{:.4f}, eff rank {:.3f}/{:.3f}, "
                        "delta_mu {:.3f}/{:.3f}, KS {:.3f}/{:.3f}".format(*np.ravel(np.column_stack([base, ours]))))


def test_criterion_10_robustness():
    exact, drops, curves = True, {}, set()
    for kind in ("dropout", "gaussian", "missing"):
        drops[kind] = []
    for seed in range(5):
        data = generate_dataset(SyntheticDataConfig(seed=seed))
        _, model, _ = train(data, TrainConfig(seed=seed, diag_every=0))
        for kind in drops:
            res = robustness_sweep(data, model, CorruptionSpec(kind, target=0))
            exact &= res["unimodal"][0] == res["clean"]["unimodal"] and res["fused"][0] == res["clean"]["fused"]
            curves.add(kind)
            target = [u[0] for u in res["unimodal"]]
            drops[kind].append((target[0], target[-1]))
    means = {k: np.mean(v, axis=0) for k, v in drops.items()}
    ok = exact and curves == set(drops) and all(m[1] <= m[0] for m in means.values())
    detail = ", ".join(f"{k} {m[0]:.3f}->{m[1]:.3f}" for k, m in means.items())
    report(10, bool(ok), f"severity 0 exact: {exact}; mean target accuracy clean->max severity: {detail}")
