import json

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import log_softmax

from infcf import _gumbel, distill
from infcf.distill import DistillConfig, SupportPrior
from infcf.kernel import KernelConfig
from oracles import central_difference, gradient_instance, reconstruction_loss, relative_error, relaxed_replay


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_central_differences(seed):
    prior, batch, cfg, lam, lambda2 = gradient_instance(seed)
    _, grad = distill.distill_loss_and_grad(prior, batch, cfg, cfg.seed, ("fd",), lam, lambda2)
    fd = central_difference(prior, batch, cfg, lam, lambda2)
    assert relative_error(grad, fd) < 1e-4


def test_summary_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    S = rng.random((4, 9))
    B = (rng.random((3, 9)) < 0.4).astype(float)
    _, g = distill.summary_loss_and_grad(S, B, 0.5, 1e-3, KernelConfig(2))
    fd = np.zeros_like(S)
    for idx in np.ndindex(S.shape):
        hi, lo = S.copy(), S.copy()
        hi[idx] += 1e-6
        lo[idx] -= 1e-6
        f = lambda M: distill.summary_loss_and_grad(M, B, 0.5, 1e-3, KernelConfig(2), with_grad=False)[0]
        fd[idx] = (f(hi) - f(lo)) / 2e-6
    assert relative_error(g, fd) < 1e-6


@pytest.mark.parametrize("depth", [1, 3])
def test_loss_matches_fitted_model_oracle(depth):
    rng = np.random.default_rng(depth)
    S = rng.random((6, 15))
    B = (rng.random((5, 15)) < 0.3).astype(float)
    got, _ = distill.summary_loss_and_grad(S, B, 1.0, 0.0, KernelConfig(depth), with_grad=False)
    assert got == pytest.approx(reconstruction_loss(S, B, 1.0, depth), rel=1e-10)


def test_sparsity_term_is_isolated():
    rng = np.random.default_rng(11)
    S = rng.random((5, 12))
    S[0, :3] = 0.0
    B = (rng.random((4, 12)) < 0.3).astype(float)
    l0, g0 = distill.summary_loss_and_grad(S, B, 1.0, 0.0)
    l1, g1 = distill.summary_loss_and_grad(S, B, 1.0, 0.01)
    assert l1 - l0 == pytest.approx(0.01 * np.abs(S).sum(), rel=1e-12)
    np.testing.assert_allclose(g1 - g0, 0.01 * np.sign(S), rtol=0, atol=1e-15)


def test_relaxed_sums_replay_from_per_draw_noise():
    prior, _, cfg, _, _ = gradient_instance(3)
    cfg = DistillConfig(mu=prior.mu, gamma=7, tau=0.4, seed=5)
    total, rec = relaxed_replay(prior, cfg, ("replay",))
    np.testing.assert_allclose(rec.sums, total, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sum(rec.draw(k) for k in range(cfg.gamma)), total, rtol=0, atol=1e-12)


def test_noise_kernel_matches_reference():
    logp = np.ascontiguousarray(log_softmax(np.random.default_rng(0).normal(size=(6, 40)), axis=1))
    for tau in (0.05, 0.5, 1.0, 2.0):
        sums = _gumbel.relaxed_sums(logp, 99, tau, 4)
        ref = np.zeros_like(logp)
        for k in range(4):
            z = (logp + _gumbel.gumbel_noise_reference(99, k, logp.shape)) / tau
            z = np.exp(z - z.max(axis=1, keepdims=True))
            ref += z / z.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(sums, ref, rtol=0, atol=1e-12)


def test_gumbel_noise_is_standard_gumbel():
    g = _gumbel.gumbel_noise_reference(1234, 0, (400, 500)).ravel()
    assert g.mean() == pytest.approx(np.euler_gamma, abs=0.01)
    assert g.var() == pytest.approx(np.pi ** 2 / 6, abs=0.03)


def test_clamped_summary_bounds():
    prior = SupportPrior(np.random.default_rng(2).normal(scale=3, size=(8, 25)))
    X, rec = distill.gumbel_sample_summary(prior, 0.5, 20, seed=1)
    assert X.min() >= 0 and X.max() <= 1
    np.testing.assert_array_equal(X, np.minimum(rec.sums, 1))
    # each draw is a distribution over items, so the unclamped rows sum to gamma
    np.testing.assert_allclose(rec.sums.sum(axis=1), 20, rtol=1e-12)


def test_small_temperature_approaches_one_hot():
    logits = np.random.default_rng(4).normal(scale=3, size=(10, 30))
    _, rec = distill.gumbel_sample_summary(SupportPrior(logits), 1e-3, 1, seed=2)
    z = rec.log_probs + rec.noise(0)
    top2 = np.sort(z, axis=1)[:, -2:]
    clear = top2[:, 1] - top2[:, 0] > 0.05
    onehot = np.eye(30)[z.argmax(axis=1)]
    assert clear.sum() >= 5
    np.testing.assert_allclose(rec.sums[clear], onehot[clear], atol=1e-6)


def test_hard_draws_match_gumbel_argmax_union():
    logits = np.random.default_rng(5).normal(scale=2, size=(12, 40))
    gamma = 6
    H = distill.hard_summary(SupportPrior(logits), gamma, seed=3, key=("x",))
    key = distill.noise_key(3, "hard-draw", ("x",))
    logp = log_softmax(logits, axis=1)
    ref = np.zeros_like(logits)
    for k in range(gamma):
        ref[np.arange(12), (logp + _gumbel.gumbel_noise_reference(key, k, logp.shape)).argmax(axis=1)] = 1
    np.testing.assert_array_equal(H.toarray(), ref)
    per_row = np.diff(H.indptr)
    assert per_row.min() >= 1 and per_row.max() <= gamma
    assert set(np.unique(H.data)) == {1.0}


def test_loss_and_gradient_are_deterministic():
    prior, batch, cfg, lam, lambda2 = gradient_instance(9)
    a = distill.distill_loss_and_grad(prior, batch, cfg, 1, ("k", 1), lam, lambda2)
    b = distill.distill_loss_and_grad(prior, batch, cfg, 1, ("k", 1), lam, lambda2)
    c = distill.distill_loss_and_grad(prior, batch, cfg, 1, ("k", 2), lam, lambda2)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert a[0] != c[0]


def test_gradient_step_descends():
    prior, batch, cfg, lam, lambda2 = gradient_instance(12)
    loss, g = distill.distill_loss_and_grad(prior, batch, cfg, 0, ("d",), lam, lambda2)
    moved = SupportPrior(prior.logits - 1e-3 * g / np.abs(g).max())
    after, _ = distill.distill_loss_and_grad(moved, batch, cfg, 0, ("d",), lam, lambda2, with_grad=False)
    assert after < loss


def test_zero_steps_return_seed_users(small_split):
    cfg = DistillConfig(mu=10, gamma=5, max_outer=0, lambda_grid=(1.0,))
    s = distill.synthesize(small_split, cfg, hard_draw=False)
    seed_rows = small_split.train.matrix[s.meta["seed_users"]]
    assert (s.matrix != seed_rows).nnz == 0
    assert s.meta["outer_iterations"] == 0


def test_synthesize_is_deterministic_and_sparse(small_split):
    cfg = DistillConfig(mu=12, gamma=8, max_outer=6, val_every=3, batch_size=32, lambda_grid=(0.1, 1.0))
    a = distill.synthesize(small_split, cfg)
    b = distill.synthesize(small_split, cfg)
    assert a.equals(b)
    assert a.mu == 12 and a.item_ids == small_split.train.item_ids
    per_row = np.diff(a.matrix.indptr)
    assert per_row.min() >= 1 and per_row.max() <= 8


def test_resume_reproduces_uninterrupted_run(small_split, tmp_path):
    cfg = DistillConfig(mu=8, gamma=6, max_outer=5, val_every=2, batch_size=40, lambda_grid=(1.0,), optimizer="adam")
    full = distill.synthesize(small_split, cfg)

    class Stop(Exception):
        pass

    def interrupt(t, loss):
        if t == 3:
            raise Stop

    ck = tmp_path / "ck.npz"
    with pytest.raises(Stop):
        distill.synthesize(small_split, cfg, checkpoint=ck, callback=interrupt)
    assert ck.exists()
    resumed = distill.synthesize(small_split, cfg, checkpoint=ck, resume=True)
    assert resumed.equals(full)
    assert json.dumps(resumed.meta, sort_keys=True) == json.dumps(full.meta, sort_keys=True)
    # a finished checkpoint resumes straight to the final draw
    again = distill.synthesize(small_split, cfg, checkpoint=ck, resume=True)
    assert again.equals(full)


def test_checkpoint_rejects_other_config(small_split, tmp_path):
    cfg = DistillConfig(mu=6, gamma=3, max_outer=1, lambda_grid=(1.0,))
    ck = tmp_path / "ck.npz"
    distill.synthesize(small_split, cfg, checkpoint=ck)
    with pytest.raises(ValueError, match="different distill config"):
        distill.synthesize(small_split, DistillConfig(mu=6, gamma=4, max_outer=1, lambda_grid=(1.0,)),
                           checkpoint=ck, resume=True)


def test_non_finite_losses_abort(small_split, monkeypatch):
    def broken(prior, *a, **k):
        return float("nan"), np.full_like(prior.logits, np.nan)

    monkeypatch.setattr(distill, "distill_loss_and_grad", broken)
    s = distill.synthesize(small_split, DistillConfig(mu=5, gamma=3, max_outer=10, lambda_grid=(1.0,)))
    assert s.meta["aborted"] is True
    assert s.meta["outer_iterations"] == 1


def test_default_sparsity_weight(small_split):
    cfg = DistillConfig(mu=5)
    per_user = small_split.train.n_interactions / small_split.train.n_users
    assert distill.resolve_lambda2(small_split, cfg) == pytest.approx(1e-3 / per_user)
    assert distill.resolve_lambda2(small_split, DistillConfig(mu=5, lambda2=0.5)) == 0.5


def test_config_and_input_errors(small_split):
    with pytest.raises(ValueError):
        DistillConfig(tau=0)
    with pytest.raises(ValueError):
        DistillConfig(optimizer="rmsprop")
    with pytest.raises(ValueError, match="exceeds"):
        distill.initial_prior(small_split, DistillConfig(mu=10 ** 6))
    with pytest.raises(ValueError):
        SupportPrior(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        distill.gumbel_sample_summary(SupportPrior(np.zeros((2, 3))), 0.5, 0, seed=0)


def test_distilled_summary_is_usable_for_training(small_split):
    from infcf import infae

    s = distill.synthesize(small_split, DistillConfig(mu=20, gamma=10, max_outer=4, val_every=2,
                                                      batch_size=50, lambda_grid=(1.0,)))
    dp = infae.fit(s.matrix, 1.0)
    rep = infae.evaluate(dp, small_split, (10,))
    assert 0.0 <= rep["hr@10"] <= 1.0
    assert sp.issparse(s.matrix)
