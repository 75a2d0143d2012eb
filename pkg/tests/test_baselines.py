import numpy as np
import pytest
import scipy.sparse as sp

from infcf import baselines, data, infae


def test_poprec_examples():
    X = sp.csr_matrix(np.array([[1, 0, 1], [1, 0, 1], [1, 1, 0.0]]))
    m = baselines.poprec_fit(X)
    assert m.item_scores.tolist() == [3, 1, 2]
    from infcf.metrics import rank_items

    assert rank_items(m.score(np.zeros((1, 3)))[0]).tolist() == [0, 2, 1]
    tie = baselines.poprec_fit(sp.csr_matrix(np.array([[1, 1, 0.0]])))
    assert rank_items(tie.score(np.zeros(3))[0]).tolist() == [0, 1, 2]
    assert baselines.poprec_predict(m).tolist() == [3, 1, 2]


def _ease_oracle(X, lam):
    # column j: ridge regression of item j on every other item
    G = X.T @ X
    n = X.shape[1]
    B = np.zeros((n, n))
    for j in range(n):
        rest = [k for k in range(n) if k != j]
        B[rest, j] = np.linalg.solve(G[np.ix_(rest, rest)] + lam * np.eye(n - 1), G[rest, j])
    return B


@pytest.mark.parametrize("lam", [0.5, 10.0])
def test_ease_matches_constrained_least_squares(lam):
    rng = np.random.default_rng(int(lam))
    for n_items in (3, 8):
        X = (rng.random((20, n_items)) < 0.4).astype(float)
        got = baselines.ease_fit(sp.csr_matrix(X), lam).B
        np.testing.assert_allclose(got, _ease_oracle(X, lam), rtol=0, atol=1e-8)
        assert np.all(np.diag(got) == 0)


def test_ease_large_regularizer_decouples_items():
    X = sp.csr_matrix(np.array([[1, 0.0], [0, 1.0]]))
    B = baselines.ease_fit(X, 1e12).B
    assert np.abs(B).max() < 1e-10


def test_ease_singular_gram_is_reported():
    with pytest.raises(infae.FactorizationError):
        baselines.ease_fit(sp.csr_matrix(np.array([[1, 0.0]])), 0.0)


def _bias_oracle(users, items, targets, n_users, n_items, l2):
    n_obs = len(targets)
    A = np.zeros((n_obs, 1 + n_users + n_items))
    A[:, 0] = 1
    A[np.arange(n_obs), 1 + users] = 1
    A[np.arange(n_obs), 1 + n_users + items] = 1
    reg = np.sqrt(l2) * np.eye(1 + n_users + n_items)[1:]
    theta = np.linalg.lstsq(np.vstack([A, reg]), np.concatenate([targets, np.zeros(n_users + n_items)]), rcond=None)[0]
    r = targets - A @ theta
    return theta, float(r @ r + l2 * theta[1:] @ theta[1:])


@pytest.mark.parametrize("l2", [0.0, 0.3, 2.0])
def test_bias_fit_reaches_least_squares_optimum(l2):
    rng = np.random.default_rng(1)
    X = sp.csr_matrix((rng.random((12, 9)) < 0.35).astype(float))
    u, i, t = baselines.training_observations(X, seed=3)
    m = baselines.fit_bias_observations(u, i, t, 12, 9, l2, tol=1e-14)
    theta, best = _bias_oracle(u, i, t, 12, 9, l2)
    assert m.meta["loss"] == pytest.approx(best, rel=1e-8, abs=1e-10)
    pred = theta[0] + theta[1 + u] + theta[1 + 12 + i]
    np.testing.assert_allclose(m.predict(u, i), pred, rtol=0, atol=1e-4)


def test_single_observation_pair_is_fit_exactly():
    m = baselines.fit_bias_observations([0, 0], [0, 1], [1.0, 0.0], 1, 2, 0.0)
    np.testing.assert_allclose(m.predict([0, 0], [0, 1]), [1.0, 0.0], atol=1e-6)


def test_bias_limits():
    m = baselines.fit_bias_observations([0, 1, 1], [0, 0, 1], [1.0, 1.0, 1.0], 2, 2, 0.0)
    np.testing.assert_allclose(m.predict([0, 1, 1], [0, 0, 1]), 1.0, atol=1e-12)
    t = np.array([1.0, 0.0, 1.0, 1.0])
    heavy = baselines.fit_bias_observations([0, 0, 1, 1], [0, 1, 0, 1], t, 2, 2, 1e12)
    assert heavy.alpha_global == pytest.approx(t.mean(), abs=1e-9)
    assert np.abs(heavy.beta_user).max() < 1e-9 and np.abs(heavy.beta_item).max() < 1e-9


def test_coordinate_updates_never_increase_loss():
    rng = np.random.default_rng(4)
    X = sp.csr_matrix((rng.random((30, 15)) < 0.3).astype(float))
    u, i, t = baselines.training_observations(X, seed=0)
    losses = [baselines.fit_bias_observations(u, i, t, 30, 15, 0.5, tol=-1, max_sweeps=s).meta["loss"]
              for s in range(1, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_negative_sampling():
    rng = np.random.default_rng(5)
    X = (rng.random((10, 12)) < 0.4).astype(float)
    X[0] = 1.0
    X = sp.csr_matrix(X)
    u, i, t = baselines.training_observations(X, seed=2)
    neg = t == 0
    assert neg.sum() == X.nnz - X[0].nnz
    assert np.all(np.asarray(X[u[neg], i[neg]]).ravel() == 0)
    assert 0 not in set(u[neg].tolist())
    again = baselines.training_observations(X, seed=2)
    assert all(np.array_equal(a, b) for a, b in zip((u, i, t), again))


def test_sgd_epoch_lowers_loss():
    rng = np.random.default_rng(6)
    X = sp.csr_matrix((rng.random((20, 10)) < 0.3).astype(float))
    u, i, t = baselines.training_observations(X, seed=1)
    m = baselines.BiasModel(0.0, np.zeros(20), np.zeros(10))
    before = baselines.bias_loss(m, u, i, t, 0.01)
    baselines.bias_sgd_epoch(m, u, i, t, 0.01, 0.05, np.random.default_rng(0))
    assert baselines.bias_loss(m, u, i, t, 0.01) < before


def test_bias_score_on_foreign_rows_drops_user_offset():
    m = baselines.BiasModel(0.5, np.array([1.0, 2.0]), np.array([0.1, 0.2, 0.3]))
    np.testing.assert_allclose(m.score(np.zeros((2, 3)), np.array([0, 1])), [[1.6, 1.7, 1.8], [2.6, 2.7, 2.8]])
    np.testing.assert_allclose(m.score(np.zeros((1, 3)), np.array([5])), [[0.6, 0.7, 0.8]])


@pytest.mark.parametrize("kind", ["poprec", "bias", "ease"])
def test_baseline_round_trip(tmp_path, kind):
    split = data.split_per_user(data.synthetic_interactions(40, 25, seed=8), seed=1)
    model = {"poprec": lambda X: baselines.poprec_fit(X), "bias": lambda X: baselines.bias_fit(X, 1.0),
             "ease": lambda X: baselines.ease_fit(X, 10.0)}[kind](split.train.matrix)
    baselines.save_baseline(model, tmp_path / "b.npz")
    back = baselines.load_baseline(tmp_path / "b.npz")
    H = split.train.matrix[:5]
    rows = np.arange(5)
    assert np.array_equal(model.score(H, rows), back.score(H, rows))
