"""Infinite-width autoencoder: closed-form kernel ridge regression with the NTK.

Training solves ``alpha = (K + lambda I)^-1 X`` over the training users'
gramian ``K``; a user with history ``x`` is scored by ``softmax(k(x) alpha)``
where ``k(x)`` holds the kernel values against every training user.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from . import metrics
from .data import InteractionDataset, SplitDataset
from .kernel import KernelConfig, gramian
from .rng import stream

log = logging.getLogger(__name__)

MODEL_FORMAT = "infcf-model"
MODEL_VERSION = 1
LAMBDA_GRID = (0.0, 1.0, 5.0, 20.0, 50.0, 100.0)
SELECTION_METRIC = "ndcg@100"


class FactorizationError(np.linalg.LinAlgError):
    pass


def factor_spd(K: np.ndarray, lam: float, jitter_retries: int = 3):
    """Cholesky factor of ``K + lam I``, escalating diagonal jitter on failure.

    The first retry adds ``1e-8 * trace(K) / n``; each further retry multiplies
    the jitter by ten.
    """
    n = K.shape[0]
    base = 1e-8 * float(np.trace(K)) / max(n, 1)
    jitter = 0.0
    for attempt in range(jitter_retries + 1):
        A = K + (lam + jitter) * np.eye(n)
        try:
            c = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
            if attempt:
                log.info("Cholesky needed jitter %.3g (lambda=%g, n=%d)", jitter, lam, n)
            return c
        except (np.linalg.LinAlgError, ValueError):
            jitter = base if attempt == 0 else jitter * 10.0
    raise FactorizationError(
        f"K + lambda*I is not positive definite for lambda={lam} and a {n}x{n} gramian, "
        f"even after {jitter_retries} jitter retries"
    )


def solve_spd(K: np.ndarray, lam: float, rhs, jitter_retries: int = 3) -> np.ndarray:
    """Solve ``(K + lam I) x = rhs`` through :func:`factor_spd`."""
    rhs = rhs.toarray() if sp.issparse(rhs) else np.asarray(rhs, dtype=np.float64)
    return scipy.linalg.cho_solve(factor_spd(K, lam, jitter_retries), rhs)


@dataclass(frozen=True, eq=False)
class DualParameters:
    alpha: np.ndarray
    train_matrix: object
    lam: float
    kernel: KernelConfig = field(default_factory=KernelConfig)
    item_ids: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_items(self) -> int:
        return self.alpha.shape[1]


def _matrix(train):
    if isinstance(train, InteractionDataset):
        return train.matrix
    if sp.issparse(train):
        return sp.csr_matrix(train, dtype=np.float64)
    return np.asarray(train, dtype=np.float64)


def fit(train, lam: float = 1.0, cfg: KernelConfig = KernelConfig()) -> DualParameters:
    """Closed-form fit on the rows of ``train`` (a dataset, sparse or dense matrix)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    X = _matrix(train)
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty training set")
    K = gramian(X, cfg=cfg).matrix
    alpha = solve_spd(K, lam, X)
    meta = {}
    if isinstance(train, InteractionDataset):
        meta["dataset"] = train.fingerprint()
    return DualParameters(alpha, X, float(lam), cfg, getattr(train, "item_ids", None), meta)


def subsample_users(train, max_users: int | None, seed: int):
    """At most ``max_users`` training rows, chosen uniformly without replacement.

    Keeps the original row order; returns ``train`` untouched when it already fits.
    """
    X = _matrix(train)
    if not max_users or X.shape[0] <= max_users:
        return X
    keep = np.sort(stream(seed, "max-train-users").choice(X.shape[0], int(max_users), replace=False))
    return X[keep]


def predict_scores(dp: DualParameters, histories) -> np.ndarray:
    """Raw (pre-softmax) scores ``k(x) alpha`` for each history row."""
    H = _matrix(histories)
    if H.ndim == 1:
        H = H[None, :]
    if H.shape[1] != dp.n_items:
        raise ValueError(f"history has {H.shape[1]} items, model has {dp.n_items}")
    k = gramian(H, dp.train_matrix, cfg=dp.kernel).matrix
    return k @ dp.alpha


def predict(dp: DualParameters, history) -> np.ndarray:
    """Probability vector over items for one user history (may be empty)."""
    h = history
    if not sp.issparse(h) and not isinstance(h, InteractionDataset):
        h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    return softmax(predict_scores(dp, h)[0])


def predict_log_proba(dp: DualParameters, histories) -> np.ndarray:
    return log_softmax(predict_scores(dp, histories), axis=1)


def evaluate(
    dp: DualParameters,
    split: SplitDataset,
    ks: Sequence[int] = metrics.DEFAULT_KS,
    mask_train: bool = True,
    target: str = "test",
    propensity: metrics.PropensityModel | None = None,
    standard_ndcg: bool = False,
    chunk: int = 1024,
    keep_per_user: bool = False,
    history: InteractionDataset | None = None,
) -> metrics.MetricsReport:
    """Score every user from their train history and rank against ``target`` positives.

    Ranking uses log-softmax scores, which order items exactly like the
    softmax output but cannot underflow into artificial ties.
    """
    return evaluate_scorer(
        lambda H: predict_log_proba(dp, H), split, ks, mask_train, target,
        propensity, standard_ndcg, chunk, keep_per_user, history,
        meta={"model": "infae", "lambda": dp.lam, "kernel": dp.kernel.to_dict()},
    )


def evaluate_scorer(
    score_fn,
    split: SplitDataset,
    ks: Sequence[int] = metrics.DEFAULT_KS,
    mask_train: bool = True,
    target: str = "test",
    propensity: metrics.PropensityModel | None = None,
    standard_ndcg: bool = False,
    chunk: int = 1024,
    keep_per_user: bool = False,
    history: InteractionDataset | None = None,
    meta: dict | None = None,
    rows_arg: bool = False,
) -> metrics.MetricsReport:
    """Shared evaluation loop: ``score_fn(history_rows[, row_indices]) -> scores``."""
    truth = getattr(split, target).matrix
    hist = (history or split.train).matrix
    if propensity is None:
        propensity = metrics.PropensityModel.from_dataset(split.train)
    users = np.flatnonzero(np.diff(truth.indptr) > 0)
    if len(users) == 0:
        raise ValueError(f"the {target} split has no interactions")
    parts: dict[str, list] = {}
    for lo in range(0, len(users), chunk):
        rows = users[lo:lo + chunk]
        H = hist[rows]
        S = score_fn(H, rows) if rows_arg else score_fn(H)
        pu = metrics.user_metrics(S, truth[rows], ks, H if mask_train else None, propensity, standard_ndcg)
        for name, vec in pu.items():
            parts.setdefault(name, []).append(vec)
    per_user = {name: np.concatenate(v) for name, v in parts.items()}
    m = dict(meta or {})
    m.update({"target": target, "mask_train": mask_train, "ks": list(ks), "split": split.fingerprint()})
    return metrics.MetricsReport.from_user_metrics(per_user, keep_per_user, m)


def select_lambda(
    split: SplitDataset,
    grid: Sequence[float] = LAMBDA_GRID,
    cfg: KernelConfig = KernelConfig(),
    train=None,
    metric: str = SELECTION_METRIC,
    ks: Sequence[int] = metrics.DEFAULT_KS,
    mask_train: bool = True,
) -> tuple[DualParameters, dict]:
    """Fit one model per lambda, keep the best by validation ``metric``.

    ``train`` overrides the fitting data (a sample or a summary) while the
    validation users are still scored from ``split.train`` histories. Lambdas
    whose factorization fails are skipped.
    """
    train = split.train if train is None else train
    X = _matrix(train)
    K = gramian(X, cfg=cfg).matrix
    scores: dict[float, float] = {}
    best = None
    for lam in grid:
        try:
            alpha = solve_spd(K, lam, X)
        except FactorizationError as exc:
            log.warning("skipping lambda=%g: %s", lam, exc)
            continue
        dp = DualParameters(alpha, X, float(lam), cfg, split.train.item_ids)
        rep = evaluate(dp, split, ks=ks, mask_train=mask_train, target="val")
        scores[float(lam)] = rep[metric]
        if best is None or rep[metric] > scores[best.lam]:
            best = dp
    if best is None:
        raise FactorizationError(f"no lambda in {list(grid)} gave a usable factorization")
    return best, scores


# ---------------------------------------------------------------------------
# Persistence


def save_model(dp: DualParameters, path) -> None:
    X = dp.train_matrix
    arrays = {"alpha": dp.alpha}
    if sp.issparse(X):
        X = sp.csr_matrix(X)
        arrays.update(x_data=X.data, x_indices=X.indices, x_indptr=X.indptr, x_shape=np.array(X.shape))
    else:
        arrays["x_dense"] = np.asarray(X)
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "lambda": dp.lam,
        "kernel": dp.kernel.to_dict(),
        "item_ids": list(dp.item_ids) if dp.item_ids is not None else None,
        "meta": dp.meta,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> DualParameters:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != MODEL_FORMAT or meta.get("version") != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model format/version {meta.get('format')}/{meta.get('version')}")
        if "x_dense" in z:
            X = z["x_dense"]
        else:
            X = sp.csr_matrix((z["x_data"], z["x_indices"], z["x_indptr"]), shape=tuple(z["x_shape"]))
        alpha = z["alpha"]
    items = tuple(meta["item_ids"]) if meta["item_ids"] is not None else None
    return DualParameters(alpha, X, meta["lambda"], KernelConfig(**meta["kernel"]), items, meta["meta"])
