"""Reference recommenders: popularity, bias-only regression and EASE.

Every model exposes ``score(histories, rows)``, returning one dense score row
per history, so all of them plug into :func:`infcf.infae.evaluate_scorer`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .infae import FactorizationError
from .rng import stream

BASELINE_FORMAT = "infcf-baseline"
BASELINE_VERSION = 1
EASE_GRID = (1.0, 10.0, 100.0, 1e3, 1e4)


def _csr(train) -> sp.csr_matrix:
    m = getattr(train, "matrix", train)
    return sp.csr_matrix(m, dtype=np.float64)


def _rows_of(histories) -> int:
    return histories.shape[0] if histories.ndim == 2 else 1


# ---------------------------------------------------------------------------
# Popularity


@dataclass(eq=False)
class PopRec:
    item_scores: np.ndarray

    def score(self, histories, rows=None) -> np.ndarray:
        return np.tile(self.item_scores, (_rows_of(histories), 1))


def poprec_fit(train) -> PopRec:
    X = _csr(train)
    return PopRec(np.bincount(X.indices, minlength=X.shape[1]).astype(np.float64))


def poprec_predict(model: PopRec, history=None) -> np.ndarray:
    return model.item_scores.copy()


# ---------------------------------------------------------------------------
# Bias-only regression


@dataclass(eq=False)
class BiasModel:
    alpha_global: float
    beta_user: np.ndarray
    beta_item: np.ndarray
    meta: dict = field(default_factory=dict)

    def predict(self, users, items) -> np.ndarray:
        return self.alpha_global + self.beta_user[users] + self.beta_item[items]

    def score(self, histories, rows=None) -> np.ndarray:
        n = _rows_of(histories)
        user = np.zeros(n)
        # a model fitted on a sample has no offsets for the evaluated rows; the
        # user offset never changes that user's ranking
        if rows is not None and len(self.beta_user) and np.max(rows) < len(self.beta_user):
            user = self.beta_user[np.asarray(rows, dtype=np.int64)]
        return self.alpha_global + user[:, None] + self.beta_item[None, :]


def sample_negatives(X: sp.csr_matrix, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One uniformly drawn unobserved item per stored positive, in row-major order.

    Users whose history covers every item get no negatives.
    """
    n_items = X.shape[1]
    users, items = [], []
    u01 = rng.random(X.nnz)
    for u in range(X.shape[0]):
        lo, hi = X.indptr[u], X.indptr[u + 1]
        free = np.setdiff1d(np.arange(n_items), X.indices[lo:hi], assume_unique=True)
        if hi == lo or free.size == 0:
            continue
        users.append(np.full(hi - lo, u))
        items.append(free[(u01[lo:hi] * free.size).astype(np.int64)])
    if not users:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(users), np.concatenate(items)


def training_observations(X: sp.csr_matrix, seed: int, negatives: bool = True, tag=("bias",)):
    """(users, items, targets): the positives plus one negative each."""
    X = sp.csr_matrix(X)
    X.sort_indices()
    coo = X.tocoo()
    users, items = coo.row.astype(np.int64), coo.col.astype(np.int64)
    targets = np.ones(users.size)
    if negatives:
        nu, ni = sample_negatives(X, stream(seed, "negatives", *tag))
        users = np.concatenate([users, nu])
        items = np.concatenate([items, ni])
        targets = np.concatenate([targets, np.zeros(nu.size)])
    return users, items, targets


def bias_loss(model: BiasModel, users, items, targets, l2: float) -> float:
    r = targets - model.predict(users, items)
    return float(r @ r + l2 * (model.beta_user @ model.beta_user + model.beta_item @ model.beta_item))


def fit_bias_observations(
    users, items, targets, n_users: int, n_items: int, l2: float = 0.0,
    tol: float = 1e-8, max_sweeps: int = 10_000,
) -> BiasModel:
    """Exact block-coordinate minimization of the regularized squared loss.

    Each sweep sets the global offset, then all user biases, then all item
    biases to their closed-form minimizers given the rest, so the loss never
    increases. Stops once a sweep lowers it by less than ``tol``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if users.size == 0:
        raise ValueError("no observations to fit")
    nu = np.bincount(users, minlength=n_users)
    ni = np.bincount(items, minlength=n_items)
    m = BiasModel(0.0, np.zeros(n_users), np.zeros(n_items))
    prev = bias_loss(m, users, items, targets, l2)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        m.alpha_global = float(np.mean(targets - m.beta_user[users] - m.beta_item[items]))
        r = targets - m.alpha_global - m.beta_item[items]
        den = nu + l2
        m.beta_user = np.divide(np.bincount(users, r, n_users), den, out=np.zeros(n_users), where=den > 0)
        r = targets - m.alpha_global - m.beta_user[users]
        den = ni + l2
        m.beta_item = np.divide(np.bincount(items, r, n_items), den, out=np.zeros(n_items), where=den > 0)
        cur = bias_loss(m, users, items, targets, l2)
        if prev - cur < tol:
            break
        prev = cur
    m.meta = {"sweeps": sweeps, "loss": cur, "l2": l2}
    return m


def bias_fit(train, l2: float = 1.0, seed: int = 0) -> BiasModel:
    X = _csr(train)
    u, i, t = training_observations(X, seed)
    return fit_bias_observations(u, i, t, X.shape[0], X.shape[1], l2)


def bias_sgd_epoch(
    model: BiasModel, users, items, targets, l2: float, lr: float, rng: np.random.Generator
) -> None:
    """One in-place pass of per-observation SGD in a random order."""
    a, bu, bi = model.alpha_global, model.beta_user, model.beta_item
    for k in rng.permutation(len(users)):
        u, i = users[k], items[k]
        e = targets[k] - (a + bu[u] + bi[i])
        a += lr * e
        bu[u] += lr * (e - l2 * bu[u])
        bi[i] += lr * (e - l2 * bi[i])
    model.alpha_global = a


# ---------------------------------------------------------------------------
# EASE


@dataclass(eq=False)
class EaseModel:
    B: np.ndarray
    lam: float

    def score(self, histories, rows=None) -> np.ndarray:
        H = histories.toarray() if sp.issparse(histories) else np.atleast_2d(np.asarray(histories, np.float64))
        return H @ self.B


def ease_fit(train, lam: float = 100.0) -> EaseModel:
    """Item-item weights ``B = I - P diag(1 / diag P)`` with ``P = (X^T X + lam I)^-1``."""
    X = _csr(train)
    G = (X.T @ X).toarray() + lam * np.eye(X.shape[1])
    try:
        c = scipy.linalg.cho_factor(G, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(
            f"X^T X + lambda*I is singular for lambda={lam} and {X.shape[1]} items"
        ) from exc
    P = scipy.linalg.cho_solve(c, np.eye(X.shape[1]))
    B = -P / np.diag(P)[None, :]
    np.fill_diagonal(B, 0.0)
    return EaseModel(B, float(lam))


def ease_predict(model: EaseModel, history) -> np.ndarray:
    return model.score(history)[0]


# ---------------------------------------------------------------------------
# Persistence


def save_baseline(model, path) -> None:
    if isinstance(model, PopRec):
        kind, arrays, extra = "poprec", {"item_scores": model.item_scores}, {}
    elif isinstance(model, BiasModel):
        kind = "bias"
        arrays = {"beta_user": model.beta_user, "beta_item": model.beta_item}
        extra = {"alpha_global": model.alpha_global, "meta": model.meta}
    elif isinstance(model, EaseModel):
        kind, arrays, extra = "ease", {"B": model.B}, {"lambda": model.lam}
    else:
        raise TypeError(f"not a baseline model: {type(model).__name__}")
    meta = {"format": BASELINE_FORMAT, "version": BASELINE_VERSION, "kind": kind, **extra}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_baseline(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != BASELINE_FORMAT or meta.get("version") != BASELINE_VERSION:
            raise ValueError(f"{path}: not a version-{BASELINE_VERSION} baseline file")
        kind = meta["kind"]
        if kind == "poprec":
            return PopRec(z["item_scores"])
        if kind == "bias":
            return BiasModel(meta["alpha_global"], z["beta_user"], z["beta_item"], meta["meta"])
        if kind == "ease":
            return EaseModel(z["B"], meta["lambda"])
    raise ValueError(f"{path}: unknown baseline kind {kind!r}")
