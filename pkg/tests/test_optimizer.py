import itertools
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from renewal.matching import PooledEstimate
from renewal.optimizer import (
    FEEDBACK_NOTE,
    ActionSet,
    DoseResponse,
    FunctionResponse,
    PooledResponse,
    TableResponse,
    TrueResponse,
    _enumerate_paths,
    boundary_solutions,
    default_alphas,
    expected_outcome,
    expected_outcomes,
    frontier,
    frontier_from_matrices,
    frontier_tsv,
    margins,
    multiperiod,
    plan_json,
    price_competitiveness,
    realized_outcome,
    refinement_change,
    solve_cap,
    solve_profit_floor,
    solve_paths,
)
from renewal.portfolio import SynthConfig, TreatmentGrid, synth_generate
from renewal.propensity import constant_continuous_model
from renewal.response import DesignSpec, PooledLogisticModel, QuadraticDR


def random_instance(seed, N=8, A=5):
    rng = np.random.default_rng(seed)
    Y = rng.uniform(0.02, 0.6, size=(N, A))
    P = rng.uniform(200, 800, N)
    E = P * rng.uniform(0.6, 0.95, N)
    acts = np.sort(rng.uniform(-0.1, 0.27, A))
    return Y, P, E, acts


def brute_force(R, Y):
    N, A = R.shape
    combos = np.array(list(itertools.product(range(A), repeat=N)))
    rows = np.arange(N)
    return R[rows, combos].sum(axis=1), Y[rows, combos].mean(axis=1)


def test_action_sets():
    g = TreatmentGrid((-0.1, 0.0, 0.05, 0.3), (-0.03, 0.02, 0.1))
    assert ActionSet.discrete(g).actions == g.medians
    a = ActionSet.continuous(-0.0928, 0.2701, 0.001)
    v = a.values
    assert v[0] == -0.0928 and v[-1] == 0.2701
    assert np.all(np.diff(v) > 0) and np.all(np.diff(v) <= 0.001 + 1e-12)
    assert len(a.refined()) in (2 * len(a) - 1, 2 * len(a) - 2, 2 * len(a))
    with pytest.raises(TypeError):
        ActionSet.discrete(g).refined()
    with pytest.raises(ValueError):
        ActionSet("x", (0.1, 0.0))


def test_frontier_matches_brute_force():
    for seed in range(20):
        Y, P, E, acts = random_instance(seed)
        R = (1 - Y) * margins(P, E, acts)
        prof, churn = brute_force(R, Y)
        for alpha in np.quantile(churn, [0.02, 0.3, 0.6, 0.95]):
            pt = solve_cap(R, Y, alpha, acts)
            opt = prof[churn <= alpha + 1e-12].max()
            assert pt.feasible and pt.expected_churn <= alpha + 1e-9
            # duality sandwich: primal <= optimum <= primal + gap
            assert pt.expected_profit <= opt + 1e-7
            assert opt <= pt.expected_profit + pt.dual_gap + 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6), st.integers(2, 4))
def test_duality_sandwich_property(seed, N, A):
    Y, P, E, acts = random_instance(seed, N, A)
    R = (1 - Y) * margins(P, E, acts)
    prof, churn = brute_force(R, Y)
    alpha = float(np.random.default_rng(seed).uniform(churn.min(), churn.max()))
    pt = solve_cap(R, Y, alpha, acts)
    opt = prof[churn <= alpha + 1e-12].max()
    assert pt.expected_profit - 1e-7 <= opt <= pt.expected_profit + pt.dual_gap + 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(5, 200))
def test_frontier_monotone_and_feasible(seed, N):
    Y, P, E, acts = random_instance(seed, N, 5)
    alphas = np.linspace(Y.min(axis=1).mean(), Y.max(axis=1).mean(), 15)
    pts = frontier_from_matrices(Y, P, E, acts, alphas)
    profit = [p.expected_profit for p in pts]
    assert all(p.feasible for p in pts)
    assert np.all(np.diff(profit) >= -1e-9)
    for p in pts:
        assert p.expected_churn <= p.alpha + 1e-9
        R = (1 - Y) * margins(P, E, acts)
        assert p.expected_profit == pytest.approx(R[np.arange(N), p.choice].sum(), rel=1e-12)
        assert p.dual_gap >= 0


def test_frontier_churn_nondecreasing():
    Y, P, E, acts = random_instance(3, 300, 5)
    pts = frontier_from_matrices(Y, P, E, acts, np.linspace(0.1, 0.6, 30))
    c = np.array([p.expected_churn for p in pts if p.feasible])
    assert np.all(np.diff(c) >= -1e-9)


def test_constant_churn_picks_most_profitable_action():
    rng = np.random.default_rng(0)
    N = 50
    y = rng.uniform(0.1, 0.3, N)
    Y = np.repeat(y[:, None], 5, axis=1)
    P = rng.uniform(200, 500, N)
    E = 0.8 * P
    acts = np.array([-0.05, 0.0, 0.04, 0.08, 0.2])
    for alpha in (y.mean(), 0.5):
        pt = frontier_from_matrices(Y, P, E, acts, [alpha])[0]
        assert np.all(pt.plan == 0.2)
        assert pt.dual_gap == 0


def test_infeasible_cap_reported(caplog):
    Y, P, E, acts = random_instance(1)
    with caplog.at_level(logging.WARNING):
        pts = frontier_from_matrices(Y, P, E, acts, [Y.min(axis=1).mean() - 0.01, 0.5])
    assert not pts[0].feasible and pts[1].feasible
    assert "below the minimum" in caplog.text
    with pytest.raises(ValueError):
        frontier_from_matrices(Y, P, E, acts, [0.3, 0.2])


def test_frontier_tsv_and_plan_json():
    Y, P, E, acts = random_instance(2)
    pts = frontier_from_matrices(Y, P, E, acts, [0.2, 0.4])
    lines = frontier_tsv(pts).splitlines()
    assert lines[0] == "alpha\texpected_profit\texpected_churn\tdual_gap\tfeasible"
    assert len(lines) == 3
    doc = json.loads(plan_json(pts[0], np.arange(8) + 1, kind="continuous"))
    assert doc["kind"] == "continuous" and len(doc["rate_change"]) == 8


# ---------------------------------------------------------------------------
# boundary solutions


@pytest.fixture(scope="module")
def snapped():
    """Synthetic portfolio whose observed rate changes lie on a 5-point action set."""
    cfg = SynthConfig(n=3000)
    p = synth_generate(cfg, 11)
    acts = np.array([-0.04, 0.0, 0.04, 0.08, 0.2])
    t = acts[np.abs(p.rate_change[:, None] - acts).argmin(axis=1)]
    return cfg, p.with_columns(rate_change=t), ActionSet("discrete_medians", tuple(acts))


def test_boundary_solutions_with_true_model(snapped):
    cfg, p, acts = snapped
    resp = TrueResponse(cfg, p)
    b = boundary_solutions(p, resp, acts)
    ref_profit, ref_churn = realized_outcome(p, resp)
    assert b.A.feasible and b.B.feasible
    assert b.A.expected_profit >= ref_profit
    assert b.A.expected_churn <= ref_churn + 1e-9
    assert b.B.expected_churn <= ref_churn
    assert b.B.expected_profit >= ref_profit - 1e-6
    # both on the frontier: within the reported gaps of a frontier run at their churn
    for sol in (b.A, b.B):
        f = frontier(p, resp, acts, [sol.expected_churn])[0]
        assert abs(f.expected_profit - sol.expected_profit) <= f.dual_gap + sol.dual_gap + 1e-6
    assert "realized" in b.to_tsv()


def test_profit_floor_infeasible_and_trivial():
    Y, P, E, acts = random_instance(4, 30)
    R = (1 - Y) * margins(P, E, acts)
    B, _ = solve_profit_floor(R, Y, R.max(axis=1).sum() + 1.0, acts)
    assert not B.feasible
    # a floor every plan meets: the minimum-churn plan
    B, gap = solve_profit_floor(R, Y, R.min() * 30 - 1.0, acts)
    assert B.feasible and gap == 0
    np.testing.assert_allclose(B.expected_churn, Y.min(axis=1).mean())


def test_realized_outcome_sources(snapped):
    cfg, p, _ = snapped
    prof, churn = realized_outcome(p, source="observed")
    assert churn == pytest.approx(p.churn.mean())
    m = p.premium_old * (1 + p.rate_change) - p.expenses
    assert prof == pytest.approx(((1 - p.churn) * m).sum())
    with pytest.raises(ValueError):
        realized_outcome(p, source="nope")


def test_grid_refinement_check():
    cfg = SynthConfig(n=1000)
    p = synth_generate(cfg, 3)
    resp = TrueResponse(cfg, p)
    acts = ActionSet.continuous(*cfg.t_bounds, step=0.002)
    alpha = realized_outcome(p, resp)[1]
    assert refinement_change(p, resp, acts, alpha) < 1e-4


# ---------------------------------------------------------------------------
# multi-period


def small_feedback_instance(seed, N=4):
    rng = np.random.default_rng(seed)
    comp = rng.normal(-0.05, 0.2, N)
    b = rng.normal(-1.5, 0.3, N)

    def fn(t, c, idx):
        return 1 / (1 + np.exp(-(b[idx] + 6 * t + 1.5 * c)))

    P = rng.uniform(300, 700, N)
    E = P * rng.uniform(0.6, 0.9, N)
    return FunctionResponse(fn, comp), P, E, comp, rng


def test_multiperiod_matches_brute_force():
    acts = np.array([-0.04, 0.0, 0.04, 0.08, 0.2])
    for seed in range(8):
        resp, P, E, comp, rng = small_feedback_instance(seed)
        paths, V, Yp = _enumerate_paths(resp, P, E, comp, acts, 2, price_competitiveness, True,
                                        "cumulative")
        alphas = Yp[np.arange(4), rng.integers(0, 25, 4)].mean(axis=0)
        sel, obj, dual, feasible, _, _ = solve_paths(V, Yp, alphas)
        combos = np.array(list(itertools.product(range(25), repeat=4)))
        r = np.arange(4)
        vals = V[r, combos].sum(axis=1)
        ok = np.all(Yp[r, combos].mean(axis=1) <= alphas + 1e-12, axis=1)
        opt = vals[ok].max()
        assert feasible
        assert np.all(Yp[r, sel].mean(axis=0) <= alphas + 1e-9)
        assert obj <= opt + 1e-9
        assert (opt - obj) / abs(opt) <= 0.005
        assert dual >= opt - 1e-6


def test_path_enumeration_matches_direct_evaluation():
    resp, P, E, comp, _ = small_feedback_instance(5, N=3)
    acts = np.array([-0.02, 0.05, 0.1])
    paths, V, Yp = _enumerate_paths(resp, P, E, comp, acts, 3, price_competitiveness, True, "cumulative")
    for k in (0, 7, 26):
        rates = np.tile(acts[paths[k]], (3, 1))
        c = comp.copy()
        S = np.ones(3)
        g = np.ones(3)
        total = np.zeros(3)
        for j in range(3):
            y = resp.at(rates[:, j], c)
            np.testing.assert_allclose(Yp[:, k, j], y, rtol=1e-14)
            S = S * (1 - y)
            g = g * (1 + rates[:, j])
            total += S * (P * g - E)
            c = (1 + c) / (1 + rates[:, j]) - 1
        np.testing.assert_allclose(V[:, k], total, rtol=1e-13)


def _portfolio_for(P, E, comp, t=None, tenure=None):
    n = len(P)
    p = synth_generate(SynthConfig(n=n), 1)
    return p.with_columns(premium_old=np.asarray(P, float), expenses=np.asarray(E, float),
                          competitiveness=np.asarray(comp, float),
                          rate_change=np.zeros(n) if t is None else np.asarray(t, float),
                          tenure=np.full(n, 5) if tenure is None else np.asarray(tenure))


def test_tau_one_equals_frontier(snapped):
    cfg, p, acts = snapped
    resp = TrueResponse(cfg, p)
    alpha = realized_outcome(p, resp)[1]
    plan = multiperiod(p, resp, acts, 1, [alpha], min_tenure=1)
    f = frontier(p, resp, acts, [alpha])[0]
    np.testing.assert_array_equal(plan.rates[:, 0], f.plan)
    assert plan.objective == f.expected_profit
    assert plan.churn_by_year[0] == pytest.approx(f.expected_churn, rel=1e-12)


def test_separable_fixture_equals_two_single_period_problems():
    rng = np.random.default_rng(8)
    N = 200
    acts = np.array([-0.04, 0.0, 0.04, 0.08, 0.2])
    Y = np.sort(rng.uniform(0.05, 0.6, size=(N, 5)), axis=1)
    P = rng.uniform(300, 700, N)
    E = P * rng.uniform(0.6, 0.9, N)
    p = _portfolio_for(P, E, np.zeros(N))
    resp = TableResponse(Y, acts)
    alphas = [0.2, 0.35]
    plan = multiperiod(p, resp, ActionSet("discrete_medians", tuple(acts)), 2, alphas, feedback=None,
                       compound=False, weights="per_year")
    pts = frontier_from_matrices(Y, P, E, acts, alphas)
    for j in range(2):
        assert plan.churn_by_year[j] <= alphas[j] + 1e-9
        assert abs(plan.profit_by_year[j] - pts[j].expected_profit) <= pts[j].dual_gap + plan.dual_gap + 1e-6


def test_multiperiod_plan_properties(snapped):
    cfg, p, acts = snapped
    resp = TrueResponse(cfg, p)
    plan = multiperiod(p, resp, acts, 3)
    keep = p.tenure >= 3
    assert len(plan.ids) == keep.sum()
    np.testing.assert_array_equal(plan.ids, p.id[keep])
    sub = p.subset(np.flatnonzero(keep))
    np.testing.assert_allclose(plan.alphas, default_alphas(sub, TrueResponse(cfg, sub), 3))
    assert plan.feasible
    assert np.all(plan.churn_by_year <= plan.alphas + 1e-9)
    assert plan.dual_gap >= 0
    # the optimized plan beats repeating the observed offers under the same caps
    observed = np.repeat(sub.rate_change[:, None], 3, axis=1)
    prof_obs, _ = expected_outcomes(observed, sub, TrueResponse(cfg, sub))
    assert plan.objective >= prof_obs.sum()
    doc = json.loads(plan.to_json())
    assert FEEDBACK_NOTE in doc["assumptions"]
    assert plan.to_tsv().splitlines()[-1].startswith("# competitiveness feedback")


def test_multiperiod_rejects_bad_input(snapped):
    cfg, p, acts = snapped
    resp = TrueResponse(cfg, p)
    with pytest.raises(ValueError):
        multiperiod(p, resp, acts, 2, [0.3])
    with pytest.raises(ValueError):
        multiperiod(p, resp, acts, 0)
    with pytest.raises(ValueError):
        multiperiod(p, resp, acts, 2, min_tenure=10_000)
    with pytest.raises(ValueError):
        multiperiod(p, resp, ActionSet.continuous(-0.09, 0.27, 0.001), 3)


def test_multiperiod_infeasible_caps_warn(snapped, caplog):
    cfg, p, acts = snapped
    resp = TrueResponse(cfg, p)
    with caplog.at_level(logging.WARNING):
        plan = multiperiod(p, resp, acts, 2, [0.0, 0.0], max_iter=20)
    assert not plan.feasible
    assert "no plan meets" in caplog.text


# ---------------------------------------------------------------------------
# expected outcomes


def test_expected_outcomes_zero_churn():
    P = np.array([100.0, 250.0, 80.0])
    E = np.array([60.0, 200.0, 10.0])
    p = _portfolio_for(P, E, np.zeros(3))
    resp = FunctionResponse(lambda t, c, idx: np.zeros_like(t), np.zeros(3))
    profit, churn = expected_outcomes(np.zeros(3), p, resp)
    assert profit[0] == pytest.approx((P - E).sum())
    assert churn[0] == 0


def test_expected_outcomes_hand_example():
    p = _portfolio_for([100.0, 200.0], [50.0, 100.0], [0.0, 0.0])
    resp = FunctionResponse(lambda t, c, idx: np.array([0.1, 0.2])[idx], np.zeros(2))
    profit, churn = expected_outcomes(np.array([[0.1, 0.0], [0.0, 0.1]]), p, resp)
    # year 1: 0.9 * 60 + 0.8 * 100; year 2: 0.81 * 60 + 0.64 * 120
    np.testing.assert_allclose(profit, [134.0, 125.4], rtol=1e-12)
    np.testing.assert_allclose(churn, [0.15, 0.15], rtol=1e-12)


def test_expected_outcomes_linear_in_margins():
    rng = np.random.default_rng(2)
    P = rng.uniform(100, 500, 20)
    E = 0.7 * P
    p = _portfolio_for(P, E, np.zeros(20))
    y = rng.uniform(0, 0.5, 20)
    resp = FunctionResponse(lambda t, c, idx: y[idx], np.zeros(20))
    t = rng.uniform(-0.05, 0.2, (20, 3))
    a, _ = expected_outcomes(t, p, resp)
    b, _ = expected_outcomes(t, p.with_columns(premium_old=2 * P, expenses=2 * E), resp)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12)
    single, ch = expected_outcome(p, resp, t[:, 0])
    assert single == pytest.approx(a[0]) and ch == pytest.approx(y.mean())


# ---------------------------------------------------------------------------
# model-backed evaluators


def test_pooled_response_columns_follow_categories():
    grid = TreatmentGrid((-0.1, 0.0, 0.05, 0.1, 0.15, 0.3), (-0.04, 0.02, 0.07, 0.12, 0.2))
    design = DesignSpec.for_grid(grid)
    names = design.names()
    coef = np.zeros(len(names) + 1)
    coef[0] = -1.0
    coef[1 + names.index("competitiveness")] = 1.5
    for c, name in enumerate(n for n in names if n.startswith("rate_change=t") and ":" not in n):
        coef[1 + names.index(name)] = 0.3 * (c + 1)
    pooled = PooledEstimate(coef, np.eye(len(coef)), np.eye(len(coef)), np.zeros((len(coef),) * 2), 2)
    model = PooledLogisticModel(design, ["(intercept)"] + names, pooled, 0.1)
    p = synth_generate(SynthConfig(n=200), 4)
    resp = PooledResponse(model, p, grid)
    M = resp.matrix(grid.medians)
    np.testing.assert_allclose(M, model.churn_matrix(p), rtol=1e-14)
    # off-median rate changes fall back to their category
    t = np.clip(p.rate_change, grid.lower, grid.upper)
    np.testing.assert_allclose(resp.at(t), model.predict(p, grid.category_of(t)), rtol=1e-14)
    comp = p.competitiveness + 0.1
    assert not np.allclose(resp.matrix(grid.medians, comp), M)
    assert resp.take([0, 5]).n == 2


def test_dose_response_evaluator():
    rng = np.random.default_rng(1)
    t = rng.uniform(-0.09, 0.27, 400)
    grid = TreatmentGrid((-0.0928, 0.0, 0.05, 0.1, 0.2701), (-0.02, 0.02, 0.07, 0.15))
    ps = constant_continuous_model(t, grid, n_features=2)
    X = rng.normal(size=(50, 2))
    model = QuadraticDR(np.array([0.2, 0.1, 0.0, 1.0, 0.0, 0.0]))
    resp = DoseResponse(model, ps, X)
    acts = np.array([-0.05, 0.0, 0.1])
    M = resp.matrix(acts)
    for k, a in enumerate(acts):
        np.testing.assert_allclose(M[:, k], model.predict(a, ps.gps(np.full(50, a), X)))
        np.testing.assert_allclose(resp.at(np.full(50, a)), M[:, k])
    assert not resp.uses_competitiveness
