import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from renewal.matching import (
    ImputedResponseSet,
    cell_uniforms,
    find_all_donors,
    find_donors,
    impute,
    rubin_combine,
)


def brute_force_donors(scores, cat, I):
    n, C = scores.shape
    out = np.empty((n, C, I), dtype=np.int64)
    for i in range(n):
        for c in range(C):
            cands = [j for j in range(n) if cat[j] == c and j != i]
            cands.sort(key=lambda j: (abs(scores[i, c] - scores[j, c]), j))
            out[i, c] = cands[:I]
    return out


def test_donors_match_brute_force_n500():
    rng = np.random.default_rng(0)
    n, C, I = 500, 4, 10
    scores = rng.dirichlet(np.ones(C), size=n)
    cat = rng.integers(0, C, size=n)
    np.testing.assert_array_equal(find_all_donors(scores, cat, I), brute_force_donors(scores, cat, I))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(12, 60), st.integers(1, 5))
def test_donors_match_brute_force_with_ties(seed, n, I):
    rng = np.random.default_rng(seed)
    # few distinct score values force ties on both sides of the recipient
    scores = rng.integers(0, 4, size=(n, 2)) / 4.0
    cat = np.arange(n) % 2
    np.testing.assert_array_equal(find_all_donors(scores, cat, I), brute_force_donors(scores, cat, I))


def test_identical_scores_pick_lowest_indices():
    scores = np.full((12, 2), 0.5)
    cat = np.array([0, 1] * 6)
    d = find_donors(11, 0, scores, cat, 3)
    np.testing.assert_array_equal(d, [0, 2, 4])
    # self excluded
    np.testing.assert_array_equal(find_donors(0, 0, scores, cat, 3), [2, 4, 6])


def test_donors_exhaust_interval():
    scores = np.random.default_rng(1).uniform(size=(10, 2))
    cat = np.array([0] * 4 + [1] * 6)
    assert sorted(find_donors(9, 0, scores, cat, 4)) == [0, 1, 2, 3]


def test_too_few_donors():
    scores = np.full((6, 2), 0.5)
    cat = np.array([0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        find_donors(0, 0, scores, cat, 2)


def _fixture(n=300, C=3, seed=2):
    rng = np.random.default_rng(seed)
    scores = rng.dirichlet(np.ones(C), size=n)
    cat = rng.integers(0, C, size=n)
    y = rng.integers(0, 2, size=n)
    ids = rng.permutation(10 * n)[:n] + 1
    return scores, cat, y, ids


def test_observed_cells_copy_response():
    scores, cat, y, ids = _fixture()
    imp = impute(scores, cat, y, ids, I=10, M=10, seed=4)
    own = imp.draws[np.arange(len(y)), cat, :]
    np.testing.assert_array_equal(own.mean(axis=1), y)


def test_donor_invariants():
    scores, cat, y, ids = _fixture()
    imp = impute(scores, cat, y, ids, I=5, M=3, seed=4)
    for c in range(3):
        d = imp.donors[:, c, :]
        assert np.all(cat[d] == c)
        assert not np.any(d == np.arange(len(y))[:, None])


def test_all_churned_donors():
    scores, cat, _, ids = _fixture()
    y = np.ones(len(cat), dtype=int)
    imp = impute(scores, cat, y, ids, I=10, M=10, seed=0)
    assert imp.draws.min() == 1


def test_imputation_deterministic_and_permutation_equivariant():
    scores, cat, y, ids = _fixture()
    a = impute(scores, cat, y, ids, I=10, M=10, seed=9)
    b = impute(scores, cat, y, ids, I=10, M=10, seed=9)
    np.testing.assert_array_equal(a.draws, b.draws)
    perm = np.random.default_rng(5).permutation(len(y))
    inv = np.argsort(perm)
    # continuous random scores: no distance ties, so donor sets are unchanged
    p = impute(scores[perm], cat[perm], y[perm], ids[perm], I=10, M=10, seed=9)
    np.testing.assert_array_equal(p.draws[inv], a.draws)
    np.testing.assert_array_equal(perm[p.donors][inv], a.donors)


def test_draw_frequencies_match_donor_share():
    # one recipient, many draws: binomial check against the donor churn share
    n, I, M = 60, 10, 10_000
    scores = np.linspace(0, 1, n)[:, None].repeat(2, axis=1)
    cat = np.array([0, 1] * (n // 2))
    y = np.random.default_rng(6).integers(0, 2, size=n)
    imp = impute(scores, cat, y, np.arange(n) + 1, I=I, M=M, seed=12)
    for i in (0, 17, 30):
        c = 1 - cat[i]
        p = y[imp.donors[i, c]].mean()
        freq = imp.draws[i, c].mean()
        se = np.sqrt(max(p * (1 - p), 1e-12) / M)
        assert abs(freq - p) <= 3 * se + 1e-12


def test_cell_uniforms_key_only_on_cell():
    a = cell_uniforms(3, [10, 11, 12], 2, 4)
    b = cell_uniforms(3, [12, 10], 2, 4)
    np.testing.assert_array_equal(a[[2, 0]], b)
    assert np.all((a >= 0) & (a < 1))
    assert not np.array_equal(cell_uniforms(4, [10], 2, 4), a[:1])


def test_binary_round_trip_and_long_csv(tmp_path):
    scores, cat, y, ids = _fixture(n=40)
    imp = impute(scores, cat, y, ids, I=3, M=4, seed=1)
    imp.save(tmp_path / "imp.bin")
    back = ImputedResponseSet.load(tmp_path / "imp.bin")
    np.testing.assert_array_equal(back.draws, imp.draws)
    np.testing.assert_array_equal(back.donors, imp.donors)
    np.testing.assert_array_equal(back.ids, imp.ids)
    assert (back.seed, back.I, back.M) == (1, 3, 4)
    imp.to_long_csv(tmp_path / "imp.csv")
    lines = (tmp_path / "imp.csv").read_text().splitlines()
    assert len(lines) == 1 + 40 * 3 * 4


# ---------------------------------------------------------------------------
# Rubin's rule


def test_rubin_hand_example():
    r = rubin_combine([[0.0], [2.0]], [[[1.0]], [[3.0]]])
    assert r.delta_bar[0] == 1.0
    assert r.W_bar[0, 0] == 2.0
    assert r.B[0, 0] == 2.0
    assert r.var[0, 0] == 5.0


def test_rubin_identical_imputations():
    r = rubin_combine([[1.0, 2.0]] * 3, [np.diag([0.5, 0.2])] * 3)
    np.testing.assert_array_equal(r.B, 0.0)
    np.testing.assert_allclose(r.var, np.diag([0.5, 0.2]), rtol=1e-15, atol=0)


def test_rubin_scalar_spreadsheet():
    d = [0.31, -0.12, 0.57]
    w = [0.02, 0.03, 0.025]
    r = rubin_combine(d, w)
    mean = (0.31 - 0.12 + 0.57) / 3
    B = ((0.31 - mean) ** 2 + (-0.12 - mean) ** 2 + (0.57 - mean) ** 2) / 2
    W = (0.02 + 0.03 + 0.025) / 3
    assert abs(r.var[0, 0] - (W + (1 + 1 / 3) * B)) < 1e-12


def test_rubin_needs_two():
    with pytest.raises(ValueError):
        rubin_combine([[1.0]], [[[1.0]]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 4))
def test_rubin_affine_equivariance(seed, M, p):
    rng = np.random.default_rng(seed)
    est = rng.normal(size=(M, p))
    L = rng.normal(size=(M, p, p))
    cov = L @ np.transpose(L, (0, 2, 1))
    A = rng.normal(size=(p, p))
    b = rng.normal(size=p)
    r = rubin_combine(est, cov)
    t = rubin_combine(est @ A.T + b, A @ cov @ A.T)
    np.testing.assert_allclose(t.delta_bar, A @ r.delta_bar + b, atol=1e-9)
    np.testing.assert_allclose(t.var, A @ r.var @ A.T, atol=1e-9)
    assert np.linalg.eigvalsh(r.B).min() > -1e-10
