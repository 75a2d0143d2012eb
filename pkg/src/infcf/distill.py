"""Data distillation for collaborative filtering via multi-step Gumbel sampling.

A learnable logit matrix (one row per synthetic user) defines a sampling
prior over items. Each outer step draws a relaxed binary summary from it by
summing ``gamma`` Gumbel-softmax samples per row and clamping at one, fits
the infinite-width autoencoder on that summary in closed form, scores a batch
of real users, and moves the logits down the gradient of the reconstruction
loss plus an L1 sparsity penalty.

The gradient is written out by hand. The Gumbel part is replayed draw by
draw from keyed noise streams, so memory stays at one draw's worth of
``mu x |I|`` arrays whatever ``gamma`` is.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from . import _gumbel, infae
from .data import SampledSummary, SplitDataset
from .kernel import KernelConfig, correlation, normalize_rows, ntk_and_derivative, row_norms
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """Distillation hyper-parameters.

    ``lambda2=None`` resolves to ``1e-3 / (mean train interactions per user)``.
    ``batch_size``, ``max_outer``, ``val_every``, ``patience`` and the
    initialization scale are unconstrained by the method itself; the defaults
    here are choices.
    """

    mu: int = 500
    gamma: int = 200
    tau: float = 0.5
    lam: float = 1.0
    lambda2: float | None = None
    batch_size: int = 512
    step_size: float = 0.04
    max_outer: int = 500
    val_every: int = 20
    patience: int = 5
    seed: int = 42
    lambda_grid: tuple = (1e-5, 1e-3, 0.1, 1.0, 5.0, 50.0)
    init_scale: float = 5.0
    init_noise: float = 0.01
    optimizer: str = "sgd"
    depth: int = 1
    val_metric: str = "ndcg@100"

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        positive = {
            "mu": self.mu, "gamma": self.gamma, "tau": self.tau, "batch_size": self.batch_size,
            "step_size": self.step_size, "val_every": self.val_every, "patience": self.patience,
        }
        for name, v in positive.items():
            if not v > 0:
                raise ValueError(f"distill config: {name} must be positive, got {v}")
        if self.max_outer < 0 or self.lam < 0 or (self.lambda2 is not None and self.lambda2 < 0):
            raise ValueError("distill config: max_outer, lam and lambda2 must be nonnegative")
        if not self.lambda_grid:
            raise ValueError("distill config: lambda_grid must not be empty")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"distill config: optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(depth=self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_grid"] = list(self.lambda_grid)
        return d


@dataclass(eq=False)
class SupportPrior:
    """Real-valued ``mu x |I|`` logits of the per-row item sampling distributions."""

    logits: np.ndarray
    item_ids: tuple | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or not np.all(np.isfinite(self.logits)):
            raise ValueError("prior logits must be a finite 2-d array")

    @property
    def mu(self) -> int:
        return self.logits.shape[0]

    def copy(self) -> "SupportPrior":
        return SupportPrior(self.logits.copy(), self.item_ids)


# ---------------------------------------------------------------------------
# Gumbel sampling


@dataclass(eq=False)
class GumbelRecord:
    """Everything needed to replay a relaxed draw: the noise key and the pre-clamp sums."""

    noise_key: int
    tau: float
    gamma: int
    log_probs: np.ndarray
    sums: np.ndarray

    def noise(self, k: int) -> np.ndarray:
        return _gumbel.gumbel_noise_reference(self.noise_key, k, self.log_probs.shape)

    def draw(self, k: int) -> np.ndarray:
        """The k-th relaxed one-hot matrix, recomputed from its noise."""
        return softmax((self.log_probs + self.noise(k)) / self.tau, axis=1)


def noise_key(seed: int, tag: str, key: tuple = ()) -> int:
    return derive_seed(seed, tag, *key)


def gumbel_sample_summary(
    prior: SupportPrior, tau: float, gamma: int, seed: int, key: tuple = ()
) -> tuple[np.ndarray, GumbelRecord]:
    """Relaxed summary ``min(1, sum_k softmax((log softmax(logits) + g_k) / tau))``.

    Returns the clamped ``mu x |I|`` matrix and the record used for replay.
    """
    if tau <= 0 or gamma < 1:
        raise ValueError("tau must be > 0 and gamma >= 1")
    logp = np.ascontiguousarray(log_softmax(prior.logits, axis=1))
    nk = noise_key(seed, "gumbel", tuple(key))
    sums = _gumbel.relaxed_sums(logp, nk, float(tau), int(gamma))
    rec = GumbelRecord(nk, float(tau), int(gamma), logp, sums)
    # hard-tanh on nonnegative input: clamp at one
    return np.minimum(sums, 1.0), rec


def hard_summary(prior: SupportPrior, gamma: int, seed: int, key: tuple = ()) -> sp.csr_matrix:
    """Union of ``gamma`` categorical (Gumbel-argmax) draws per row, with replacement."""
    logp = np.ascontiguousarray(log_softmax(prior.logits, axis=1))
    return sp.csr_matrix(_gumbel.hard_draws(logp, noise_key(seed, "hard-draw", tuple(key)), int(gamma)))


# ---------------------------------------------------------------------------
# Loss and gradient


def _dense(x) -> np.ndarray:
    if hasattr(x, "matrix") and not isinstance(x, np.ndarray):
        x = x.matrix
    return x.toarray() if sp.issparse(x) else np.asarray(x, dtype=np.float64)


def summary_loss_and_grad(
    support: np.ndarray,
    batch,
    lam: float,
    lambda2: float = 0.0,
    kernel: KernelConfig = KernelConfig(),
    with_grad: bool = True,
):
    """Reconstruction loss of a batch given a real-valued support matrix, and its gradient.

    loss = mean over batch users of
    ``-sum_i [x_i log p_i + (1 - x_i) log(1 - p_i)]`` with
    ``p = softmax(K(batch, support) alpha)``, ``alpha = (K(support) + lam I)^-1 support``,
    plus ``lambda2 * |support|_1``. Logs are clipped at ``LOG_EPS``.
    Returns ``(loss, d loss / d support)``.
    """
    S = np.asarray(support, dtype=np.float64)
    B = _dense(batch)
    b = B.shape[0]
    Sn = normalize_rows(S)
    Bn = normalize_rows(B)

    rho_ss = correlation(S, S, same=True)
    rho_bs = correlation(B, S)
    K_ss, dK_ss = ntk_and_derivative(rho_ss, kernel.depth)
    K_bs, dK_bs = ntk_and_derivative(rho_bs, kernel.depth)

    chol = infae.factor_spd(K_ss, lam)
    alpha = scipy.linalg.cho_solve(chol, S)
    F = K_bs @ alpha
    logp = log_softmax(F, axis=1)
    P = np.exp(logp)
    Q = 1.0 - P
    pos_ok = P > LOG_EPS
    neg_ok = Q > LOG_EPS
    log_p = np.where(pos_ok, logp, math.log(LOG_EPS))
    log_q = np.log(np.maximum(Q, LOG_EPS))
    bce = -(B * log_p + (1.0 - B) * log_q).sum(axis=1)
    loss = float(bce.mean() + lambda2 * np.abs(S).sum())
    if not with_grad:
        return loss, None

    # p * dL/dp, written so the 1/p factor never materializes
    g = (-B * pos_ok + (1.0 - B) * np.where(neg_ok, P / np.where(neg_ok, Q, 1.0), 0.0)) / b
    dF = g - P * g.sum(axis=1, keepdims=True)

    d_alpha = K_bs.T @ dF
    d_Kbs = dF @ alpha.T
    # alpha = A^-1 S: S_bar = A^-1 alpha_bar, A_bar = -S_bar alpha^T
    d_S = scipy.linalg.cho_solve(chol, d_alpha)
    d_Kss = -(d_S @ alpha.T)
    d_Kss = 0.5 * (d_Kss + d_Kss.T)

    d_rho_ss = d_Kss * dK_ss
    # unit-norm rows keep the diagonal fixed at one
    np.fill_diagonal(d_rho_ss, 0.0)
    d_rho_bs = d_Kbs * dK_bs
    d_Sn = 2.0 * (d_rho_ss @ Sn) + d_rho_bs.T @ Bn

    norms = row_norms(S)
    radial = np.einsum("ij,ij->i", d_Sn, Sn)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    d_S += (d_Sn - Sn * radial[:, None]) * inv[:, None]
    d_S += lambda2 * np.sign(S)
    return loss, d_S


def distill_loss_and_grad(
    prior: SupportPrior,
    batch,
    cfg: DistillConfig,
    seed: int,
    key: tuple = (),
    lam: float | None = None,
    lambda2: float | None = None,
    with_grad: bool = True,
):
    """Loss of the relaxed summary drawn from ``prior`` and its gradient w.r.t. the logits.

    The noise is keyed by ``(seed, key)``: the same arguments always give the
    same loss, which is what finite-difference checks rely on.
    """
    lam = cfg.lam if lam is None else lam
    lambda2 = (cfg.lambda2 or 0.0) if lambda2 is None else lambda2
    X_s, rec = gumbel_sample_summary(prior, cfg.tau, cfg.gamma, seed, key)
    loss, d_X = summary_loss_and_grad(X_s, batch, lam, lambda2, cfg.kernel, with_grad)
    if not with_grad:
        return loss, None
    # clamp subgradient: zero where the sum was cut at one
    d_sum = np.where(rec.sums <= 1.0, d_X, 0.0)
    d_logp = _gumbel.relaxed_sums_backward(rec.log_probs, rec.noise_key, rec.tau, rec.gamma, d_sum)
    p = np.exp(rec.log_probs)
    grad = d_logp - p * d_logp.sum(axis=1, keepdims=True)
    return loss, grad


# ---------------------------------------------------------------------------
# Outer loop


@dataclass
class _State:
    logits: np.ndarray
    best_logits: np.ndarray
    lam: float
    best_lam: float
    best_score: float = -np.inf
    bad_cycles: int = 0
    step: int = 0
    bad_losses: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    history: list = field(default_factory=list)
    finished: bool = False
    aborted: bool = False


def initial_prior(split: SplitDataset, cfg: DistillConfig) -> tuple[SupportPrior, np.ndarray]:
    """Logits ``c * x_u + N(0, noise^2)`` for ``mu`` users drawn without replacement."""
    X = split.train.matrix
    if cfg.mu > X.shape[0]:
        raise ValueError(f"mu={cfg.mu} exceeds the {X.shape[0]} training users")
    rng = stream(cfg.seed, "distill-init")
    users = np.sort(rng.choice(X.shape[0], size=cfg.mu, replace=False))
    logits = cfg.init_scale * X[users].toarray() + cfg.init_noise * rng.standard_normal((cfg.mu, X.shape[1]))
    return SupportPrior(logits, split.train.item_ids), users


def resolve_lambda2(split: SplitDataset, cfg: DistillConfig) -> float:
    if cfg.lambda2 is not None:
        return float(cfg.lambda2)
    return 1e-3 / (split.train.n_interactions / split.train.n_users)


def _validate(split: SplitDataset, prior: SupportPrior, cfg: DistillConfig, t: int):
    summary = hard_summary(prior, cfg.gamma, cfg.seed, ("validate", t))
    dp, scores = infae.select_lambda(split, cfg.lambda_grid, cfg.kernel, train=summary, metric=cfg.val_metric)
    return dp.lam, scores[dp.lam]


def _save_checkpoint(path, st: _State, cfg: DistillConfig, lambda2: float) -> None:
    arrays = {"logits": st.logits, "best_logits": st.best_logits}
    if st.m is not None:
        arrays.update(m=st.m, v=st.v)
    meta = {
        "version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "lambda2": lambda2,
        "lam": st.lam, "best_lam": st.best_lam, "best_score": st.best_score,
        "bad_cycles": st.bad_cycles, "step": st.step, "bad_losses": st.bad_losses,
        "history": st.history, "finished": st.finished, "aborted": st.aborted,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def _load_checkpoint(path, cfg: DistillConfig) -> _State:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} unsupported")
        if meta["config"] != cfg.to_dict():
            raise ValueError(f"{path}: checkpoint was written with a different distill config")
        return _State(
            z["logits"].copy(), z["best_logits"].copy(), meta["lam"], meta["best_lam"],
            meta["best_score"], meta["bad_cycles"], meta["step"], meta["bad_losses"],
            z["m"].copy() if "m" in z else None, z["v"].copy() if "v" in z else None,
            meta["history"], meta["finished"], meta["aborted"],
        )


def synthesize(
    split: SplitDataset,
    cfg: DistillConfig = DistillConfig(),
    hard_draw: bool = True,
    checkpoint: str | Path | None = None,
    resume: bool = False,
    callback: Callable[[int, float], None] | None = None,
) -> SampledSummary:
    """Distill ``split.train`` into a ``cfg.mu``-row binary summary.

    Every ``val_every`` steps (starting at step 0) a hard summary is drawn
    from the current prior, the inner lambda is re-chosen from
    ``cfg.lambda_grid`` on validation ``cfg.val_metric``, and the best prior
    so far is kept. Training stops after ``max_outer`` steps or ``patience``
    validation cycles without improvement. With ``hard_draw=False`` the final
    prior is thresholded at half the initialization scale instead of
    sampled, which returns the seeding users' rows when no step was taken.
    """
    t0 = time.time()
    lambda2 = resolve_lambda2(split, cfg)
    prior0, seed_users = initial_prior(split, cfg)
    if resume and checkpoint and Path(checkpoint).exists():
        st = _load_checkpoint(checkpoint, cfg)
        log.info("resuming distillation at step %d", st.step)
    else:
        st = _State(prior0.logits, prior0.logits.copy(), cfg.lam, cfg.lam)
        if cfg.optimizer == "adam":
            st.m, st.v = np.zeros_like(st.logits), np.zeros_like(st.logits)

    X = split.train.matrix
    n_users = X.shape[0]
    b = min(cfg.batch_size, n_users)
    while not st.finished and st.step <= cfg.max_outer:
        t = st.step
        if t % cfg.val_every == 0 or t == cfg.max_outer:
            lam, score = _validate(split, SupportPrior(st.logits), cfg, t)
            st.lam = lam
            st.history.append({"step": t, "lambda": lam, cfg.val_metric: score})
            log.info("step %d: val %s=%.5f (lambda=%g)", t, cfg.val_metric, score, lam)
            if score > st.best_score:
                st.best_score, st.best_logits, st.best_lam, st.bad_cycles = score, st.logits.copy(), lam, 0
            else:
                st.bad_cycles += 1
            if st.bad_cycles >= cfg.patience:
                log.info("early exit at step %d", t)
                st.finished = True
        if t == cfg.max_outer:
            st.finished = True
        if not st.finished:
            batch = X[np.sort(stream(cfg.seed, "distill-batch", t).choice(n_users, size=b, replace=False))]
            loss, grad = distill_loss_and_grad(
                SupportPrior(st.logits), batch, cfg, cfg.seed, ("outer", t), lam=st.lam, lambda2=lambda2
            )
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                st.bad_losses += 1
                log.warning("non-finite loss at step %d", t)
                if st.bad_losses >= 2:
                    st.aborted = st.finished = True
            else:
                st.bad_losses = 0
                if cfg.optimizer == "adam":
                    st.m = 0.9 * st.m + 0.1 * grad
                    st.v = 0.999 * st.v + 0.001 * grad * grad
                    mh = st.m / (1 - 0.9 ** (t + 1))
                    vh = st.v / (1 - 0.999 ** (t + 1))
                    st.logits = st.logits - cfg.step_size * mh / (np.sqrt(vh) + 1e-8)
                else:
                    st.logits = st.logits - cfg.step_size * grad
                if callback is not None:
                    callback(t, loss)
            if not st.finished:
                st.step += 1
        # written after the step so a resumed run never repeats a validation
        if checkpoint and (st.finished or t % cfg.val_every == 0):
            _save_checkpoint(checkpoint, st, cfg, lambda2)

    best = SupportPrior(st.best_logits, split.train.item_ids)
    if hard_draw:
        matrix = hard_summary(best, cfg.gamma, cfg.seed, ("final",))
    else:
        matrix = sp.csr_matrix((best.logits > cfg.init_scale / 2.0).astype(np.float64))
    meta = {
        "source": split.train.fingerprint(),
        "mu": cfg.mu, "gamma": cfg.gamma, "tau": cfg.tau, "lambda": st.best_lam,
        "lambda2": lambda2, "seed": cfg.seed, "outer_iterations": int(st.step),
        "best_val": None if not np.isfinite(st.best_score) else st.best_score,
        "aborted": st.aborted, "config": cfg.to_dict(), "seed_users": seed_users.tolist(),
    }
    log.info("distillation finished in %.1fs", time.time() - t0)
    return SampledSummary(matrix, split.train.item_ids, meta)
