import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import reference as ref
from dagr.engine import ce_loss_and_grad
from dagr.errors import ShapeMismatch, TrivialNullSpace
from dagr.flow import (
    FlowConfig,
    build_nullspace_rotation,
    certify_ambiguity,
    flow_step,
    initial_state,
    maxent_violations,
    paired_state,
    run_flow,
)
from dagr.geom import modality_set


def test_config_validation():
    for bad in ({"eta": 0.0}, {"steps": 0}, {"projection": "euclid"}, {"init": "grid"}, {"B": 1}):
        with pytest.raises(ValueError):
            FlowConfig(**bad)
    with pytest.raises(ValueError):
        run_flow(FlowConfig(init="custom", steps=1))
    with pytest.raises(ShapeMismatch):
        run_flow(FlowConfig(M=2, steps=1), initial_state(FlowConfig(M=1)))


def test_zero_weights_leave_state_unchanged():
    cfg = FlowConfig(B=8, d=3, M=2, lambda_intra=0.0, lambda_inter=0.0, init="uniform")
    s0 = initial_state(cfg)
    s1 = flow_step(s0, cfg)
    for a, b in zip(s0.arrays(), s1.arrays()):
        np.testing.assert_allclose(b, a, atol=1e-15)


def test_uniform_init_zero_weights_constant_series():
    rec, _ = run_flow(FlowConfig(B=10, d=4, M=2, steps=20, lambda_intra=0.0, init="uniform"))
    assert len(rec) == 21
    for series in (rec.loss_disp, rec.loss_anchor, rec.min_pair_dist, rec.mean_sq_drift):
        np.testing.assert_allclose(series, series[0], atol=1e-12)
    np.testing.assert_allclose(rec.eff_rank, [rec.eff_rank[0]] * 21, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_near_coincident_pair_separates(seed):
    rng = np.random.default_rng(seed)
    a = ref.unit_rows(rng, 1, 3)[0]
    b = a + 1e-3 * rng.standard_normal(3)
    state = modality_set([np.stack([a, b / np.linalg.norm(b)])], normalized=True)
    rec, _ = run_flow(FlowConfig(B=2, d=3, eta=0.05, steps=1, init="custom"), state)
    assert rec.min_pair_dist[1] > rec.min_pair_dist[0]


@pytest.mark.parametrize("seed", range(5))
def test_pair_on_circle_becomes_antipodal(seed):
    rec, _ = run_flow(FlowConfig(B=2, d=2, eta=0.05, steps=2000, init="uniform", seed=seed))
    assert rec.min_pair_dist[-1] == pytest.approx(2.0, abs=1e-3)


def test_anchoring_pulls_pairs_together():
    state = paired_state(16, 4, 1.0, seed=3)
    np.testing.assert_allclose(np.linalg.norm(state.arrays()[0] - state.arrays()[1], axis=1), 1.0, atol=1e-12)
    cfg = FlowConfig(B=16, d=4, M=2, eta=0.05, steps=400, lambda_intra=0.0, lambda_inter=1.0, tau=0.0, init="custom")
    rec, _ = run_flow(cfg, state)
    assert rec.mean_sq_drift[0] == pytest.approx(1.0, abs=1e-12)
    assert all(b <= a for a, b in zip(rec.mean_sq_drift, rec.mean_sq_drift[1:]))
    assert rec.mean_sq_drift[-1] < 1e-4


def test_sphere_and_sign_invariants_along_a_run():
    rec, _ = run_flow(FlowConfig(B=16, d=5, M=2, eta=0.05, steps=100, lambda_inter=0.5, init="collapsed"))
    assert max(rec.max_norm_error) <= 1e-9
    assert min(rec.min_repulsion_weight) >= 0.0


def test_collapsed_stays_collapsed_without_dispersion():
    rec, _ = run_flow(FlowConfig(B=32, d=8, steps=200, lambda_intra=0.0, init="collapsed"))
    assert max(rec.eff_rank_series(0)) < 1.05


@pytest.mark.parametrize("seed", range(3))
def test_projection_modes_agree(seed):
    base = dict(B=12, d=4, M=2, lambda_inter=0.3, steps=30, init="uniform", seed=seed)
    a = run_flow(FlowConfig(projection="riemannian", **base))[1]
    b = run_flow(FlowConfig(projection="chain", **base))[1]
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(x, y, atol=1e-9)


def test_drift_bound_sweep_with_conflict_term():
    tau, excess = 0.25, []
    for lam in (0.1, 1.0, 10.0, 100.0):
        cfg = FlowConfig(B=32, d=4, M=2, eta=0.01 if lam < 100 else 0.002, steps=3000, lambda_intra=0.0,
                         lambda_inter=lam, tau=tau, init="uniform", conflict_weight=1.0, seed=0)
        rec, _ = run_flow(cfg)
        gap = rec.delta_hat
        assert gap > 0
        excess.append(rec.excess_drift[-1])
        assert rec.excess_drift[-1] <= gap / lam * 1.1
        assert rec.mean_sq_drift[-1] <= 2 * tau**2 + 2 * gap / lam * 1.1
    assert all(b <= a for a, b in zip(excess, excess[1:]))


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_renyi_proxy_rises_while_drift_has_slack(lam):
    rec, _ = run_flow(FlowConfig(B=32, d=4, M=2, eta=0.02, steps=1500, lambda_inter=lam, tau=0.25, init="uniform"))
    assert maxent_violations(rec, budget=0.05) == []


def test_csv_columns():
    rec, _ = run_flow(FlowConfig(B=4, d=3, M=2, steps=2, init="uniform"))
    lines = rec.to_csv().splitlines()
    assert lines[0] == ("step,loss_total,loss_disp,loss_anchor,min_pair_dist,eff_rank_m0,eff_rank_m1,"
                        "excess_drift,mean_sq_drift")
    assert len(lines) == 4


def test_rotation_hand_example():
    Q = np.array([[0.0, -1.0], [1.0, 0.0]])
    rot = build_nullspace_rotation(np.array([[1.0, 0.0, 0.0]]), Q)
    np.testing.assert_array_equal(rot.W @ rot.R, rot.W)
    np.testing.assert_allclose(rot.R @ np.array([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0], atol=1e-15)
    assert rot.orthogonality_residual() <= 1e-10 and rot.rank == 1


def test_identity_block_gives_identity():
    W = np.random.default_rng(0).standard_normal((2, 5))
    np.testing.assert_allclose(build_nullspace_rotation(W, "identity").R, np.eye(5), atol=1e-12)


def test_negate_null_preserves_cross_entropy():
    rng = np.random.default_rng(0)
    W, Z, y = rng.standard_normal((3, 6)), rng.standard_normal((10, 6)), rng.integers(0, 3, 10)
    rot = build_nullspace_rotation(W)
    ce0 = ce_loss_and_grad(W, Z, y)[0].value
    ce1 = ce_loss_and_grad(W, Z @ rot.R.T, y)[0].value
    assert abs(ce1 - ce0) <= 1e-12


def test_full_rank_refused():
    with pytest.raises(TrivialNullSpace):
        build_nullspace_rotation(np.eye(3))
    with pytest.raises(ShapeMismatch):
        build_nullspace_rotation(np.array([[1.0, 0.0, 0.0]]), np.eye(3))


def test_certify_ambiguity_examples():
    rng = np.random.default_rng(0)
    Ws = [rng.standard_normal((3, 8)) for _ in range(2)]
    Zs = [ref.unit_rows(rng, 20, 8) for _ in range(2)]
    ys = [rng.integers(0, 3, 20) for _ in range(2)]
    ident = certify_ambiguity(Ws, Zs, ys, [build_nullspace_rotation(W, "identity") for W in Ws])
    assert ident["max_logit_deviation"] <= 1e-12 and ident["mean_displacement"] <= 1e-12
    rep = certify_ambiguity(Ws, Zs, ys, [build_nullspace_rotation(W) for W in Ws])
    assert rep["max_logit_deviation"] <= 1e-10 and rep["max_ce_deviation"] <= 1e-12
    assert rep["mean_displacement"] > 0.1
    assert rep["max_orthogonality_residual"] <= 1e-10 and rep["max_logit_preservation_residual"] <= 1e-10


def _random_orthogonal(rng, k):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4))
def test_rotation_invariants(seed, K, extra):
    rng = np.random.default_rng(seed)
    d = K + extra
    W = rng.standard_normal((K, d))
    rot = build_nullspace_rotation(W, _random_orthogonal(rng, d - K))
    assert rot.orthogonality_residual() <= 1e-10
    assert rot.logit_residual() <= 1e-10
