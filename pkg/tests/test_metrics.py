import math

import mpmath as mp
import numpy as np
import pytest
import scipy.sparse as sp

from infcf import metrics as M
from infcf.data import InteractionDataset


def brute_auc(scores, pos, masked=()):
    items = [i for i in range(len(scores)) if i not in masked]
    P = [i for i in items if i in pos]
    N = [i for i in items if i not in pos]
    total = 0.0
    for p in P:
        for n in N:
            total += 1.0 if scores[p] > scores[n] else 0.5 if scores[p] == scores[n] else 0.0
    return total / (len(P) * len(N))


def brute_ranking(scores, masked=()):
    # descending score, ties by ascending index
    return sorted((i for i in range(len(scores)) if i not in masked), key=lambda i: (-scores[i], i))


def brute_metrics(scores, pos, k, counts, n_total, masked=()):
    pos = set(pos) - set(masked)
    top = brute_ranking(scores, masked)[:k]
    hits = [i for i in top if i in pos]
    dcg = sum(1 / math.log2(r + 2) for r, i in enumerate(top) if i in pos)
    idcg = sum(1 / math.log2(r + 2) for r in range(len(pos)))
    C = (math.log(n_total) - 1) * 2.5 ** 0.55
    phi = [1 / (1 + C * math.exp(-0.55 * math.log(c + 1.5))) for c in counts]
    upsp = sum(1 / phi[i] for i in hits) / k
    mpsp = sum(1 / phi[i] for i in pos)
    return len(hits) / len(pos), dcg / idcg, upsp / mpsp


def random_instance(rng, n_items=10, ties=False):
    scores = rng.integers(0, 4, n_items).astype(float) if ties else rng.normal(size=n_items)
    n_pos = rng.integers(1, 5)
    pos = set(rng.choice(n_items, n_pos, replace=False).tolist())
    rest = [i for i in range(n_items) if i not in pos]
    masked = set(rng.choice(rest, rng.integers(0, 3), replace=False).tolist())
    return scores, pos, masked


def test_auc_examples():
    assert M.auc([2.0, 1.0], [0]) == 1.0
    assert M.auc(np.ones(6), [1, 3]) == 0.5


def test_hr_examples():
    assert M.hr_at_k([3, 1, 2], [1, 3], 2) == 1.0
    assert M.hr_at_k([0, 2], [1, 3], 2) == 0.0
    assert M.hr_at_k(list(range(10)), [0, 5, 11, 12], 10) == 0.5


def test_ndcg_examples():
    assert M.ndcg_at_k([4, 1], [4], 10) == 1.0
    assert M.ndcg_at_k([0, 4], [4], 2) == pytest.approx(1 / math.log2(3), abs=1e-15)
    # untruncated ideal DCG over three positives
    assert M.ndcg_at_k([0, 1, 2], [0, 1, 2], 2) == pytest.approx(0.76536, abs=5e-6)
    assert M.ndcg_at_k([0, 1, 2], [0, 1, 2], 2, standard=True) == 1.0


def test_propensity_matches_high_precision_closed_form():
    model = M.PropensityModel(np.array([10.0]), 1000)
    mp.mp.dps = 40
    C = (mp.log(1000) - 1) * mp.power(mp.mpf("2.5"), mp.mpf("0.55"))
    oracle = 1 / (1 + C * mp.e ** (-mp.mpf("0.55") * mp.log(mp.mpf(10) + mp.mpf("1.5"))))
    assert abs(M.propensity(model, 0) - float(oracle)) < 1e-12


def test_propensity_limits_and_errors():
    model = M.PropensityModel(np.array([1e300]), 10**6)
    assert model.phi()[0] == pytest.approx(1.0)
    with pytest.raises(ValueError, match="e interactions"):
        M.PropensityModel(np.array([1.0, 1.0]), 2)


def test_psp_with_equal_frequencies_matches_direct_formula():
    model = M.PropensityModel(np.full(5, 4.0), 20)
    phi = model.phi()[0]
    ranked = [2, 0, 4, 1, 3]
    got = M.psp_at_k(ranked, [0, 3], 2, model)
    assert got == pytest.approx((1 / phi / 2) / (2 / phi), abs=1e-15)


def test_random_instances_against_brute_force():
    rng = np.random.default_rng(0)
    n_total = 500
    for trial in range(100):
        scores, pos, masked = random_instance(rng, ties=trial % 2 == 1)
        counts = rng.integers(0, 50, 10).astype(float)
        model = M.PropensityModel(counts, n_total)
        k = int(rng.integers(1, 11))
        hr, ndcg, psp = brute_metrics(scores, pos, k, counts, n_total, masked)
        assert abs(M.auc(scores, pos, masked) - brute_auc(scores, pos, masked)) < 1e-10
        ranked = M.rank_items(scores, masked)
        assert list(ranked) == brute_ranking(scores, masked)
        live = pos - masked
        assert abs(M.hr_at_k(ranked, live, k) - hr) < 1e-10
        assert abs(M.ndcg_at_k(ranked, live, k) - ndcg) < 1e-10
        assert abs(M.psp_at_k(ranked, live, k, model) - psp) < 1e-10
        # batched route
        P = np.zeros((1, 10))
        P[0, list(pos)] = 1
        Mk = np.zeros((1, 10))
        Mk[0, list(masked)] = 1
        out = M.user_metrics(scores[None, :], sp.csr_matrix(P), (k,), sp.csr_matrix(Mk), model)
        assert abs(out["auc"][0] - brute_auc(scores, pos, masked)) < 1e-10
        assert abs(out[f"hr@{k}"][0] - hr) < 1e-10
        assert abs(out[f"ndcg@{k}"][0] - ndcg) < 1e-10
        assert abs(out[f"psp@{k}"][0] - psp) < 1e-10


def test_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(20, 30))
    P = sp.csr_matrix((rng.random((20, 30)) < 0.2).astype(float))
    a = M.user_metrics(S, P, (5, 10))
    b = M.user_metrics(np.exp(3 * S) + 1, P, (5, 10))
    for name in a:
        np.testing.assert_array_equal(np.isnan(a[name]), np.isnan(b[name]))
        np.testing.assert_allclose(a[name], b[name], equal_nan=True, atol=1e-15)


def test_monotone_in_k():
    rng = np.random.default_rng(4)
    S = rng.normal(size=(40, 50))
    P = sp.csr_matrix((rng.random((40, 50)) < 0.2).astype(float))
    out = M.user_metrics(S, P, (1, 5, 10, 20, 50))
    for fam in ("hr", "ndcg"):
        vals = np.array([out[f"{fam}@{k}"] for k in (1, 5, 10, 20, 50)])
        ok = ~np.isnan(vals[0])
        assert np.all(np.diff(vals[:, ok], axis=0) >= -1e-15)


def test_users_without_positives_are_skipped():
    S = np.arange(8.0).reshape(2, 4)
    P = sp.csr_matrix(np.array([[0, 0, 0, 1], [0, 0, 0, 0.0]]))
    rep = M.evaluate_scores(S, P, (2,))
    assert rep.n_users == 1
    assert rep["hr@2"] == 1.0


def _toy_train(counts_per_user, n_items=6):
    rows, cols = [], []
    for u, c in enumerate(counts_per_user):
        rows += [u] * c
        cols += list(range(c))
    X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(counts_per_user), n_items))
    return InteractionDataset([f"u{u}" for u in range(len(counts_per_user))], [f"i{i}" for i in range(n_items)], X)


def test_stratify_single_bucket_equals_global():
    rng = np.random.default_rng(5)
    train = _toy_train([3, 1, 4, 2, 5])
    S = rng.normal(size=(5, 6))
    P = (rng.random((5, 6)) < 0.4).astype(float)
    P[0, 5] = 1
    P = sp.csr_matrix(P)
    whole = M.evaluate_scores(S, P, (2, 4))
    (only,) = M.stratify(train, S, P, 1, (2, 4))
    for name, v in whole.values.items():
        assert only[name] == pytest.approx(v, abs=1e-15)


def test_stratify_splits_by_frequency():
    train = _toy_train([4, 1, 3, 2])
    S = np.tile(np.arange(6.0)[::-1], (4, 1))
    P = sp.csr_matrix(np.eye(4, 6))
    cold, warm = M.stratify(train, S, P, 2, (1,))
    assert cold.meta["size"] == warm.meta["size"] == 2
    # item 0 always ranks first; only user 0 (warm half, with user 2) holds it
    assert cold["hr@1"] == 0.0 and warm["hr@1"] == 0.5


def test_bucket_average_recomposes_global_hr():
    rng = np.random.default_rng(6)
    train = _toy_train(list(rng.integers(1, 6, 40)))
    S = rng.normal(size=(40, 6))
    P = (rng.random((40, 6)) < 0.4).astype(float)
    P[np.arange(40), np.arange(40) % 6] = 1
    P = sp.csr_matrix(P)
    whole = M.evaluate_scores(S, P, (3,))
    parts = M.stratify(train, S, P, 4, (3,))
    avg = sum(p["hr@3"] * p.n_users for p in parts) / sum(p.n_users for p in parts)
    assert avg == pytest.approx(whole["hr@3"], abs=1e-12)


def test_report_serialization_is_stable():
    rep = M.MetricsReport({"auc": 0.5, "hr@10": 0.25}, 3, meta={"b": 1, "a": 2})
    assert rep.to_csv() == "metric,value\nauc,0.5\nhr@10,0.25\n"
    assert rep.to_json() == M.MetricsReport({"auc": 0.5, "hr@10": 0.25}, 3, meta={"a": 2, "b": 1}).to_json()
    assert "25.00" in rep.format_table()


def test_cutoff_beyond_item_count():
    S = np.array([[0.3, 0.9, 0.1]])
    P = sp.csr_matrix(np.array([[1.0, 0, 1]]))
    out = M.user_metrics(S, P, (2, 100))
    assert out["hr@100"][0] == 1.0
    assert out["ndcg@100"][0] == pytest.approx(M.ndcg_at_k([1, 0, 2], [0, 2], 100), abs=1e-15)
