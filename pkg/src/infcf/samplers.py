"""Down-sampling strategies: random interactions, random users, head users and SVP-CF.

A sample keeps the item universe of its source. User-level samplers keep
whole histories and add users until the budget is met; the last user added
may overshoot it.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .baselines import BiasModel, bias_sgd_epoch, training_observations
from .data import InteractionDataset
from .rng import stream

STRATEGIES = ("interaction-rns", "user-rns", "head-user", "svp-cf")


@dataclass(frozen=True)
class SampleBudget:
    """``p_percent`` of the interactions (or of the users), or an absolute ``count``."""

    p_percent: float = 100.0
    unit: str = "interactions"
    count: int | None = None

    def __post_init__(self):
        if self.unit not in ("interactions", "users"):
            raise ValueError(f"budget unit must be 'interactions' or 'users', got {self.unit!r}")
        if self.count is None and not 0 < self.p_percent <= 100:
            raise ValueError(f"budget percent must be in (0, 100], got {self.p_percent}")
        if self.count is not None and self.count < 1:
            raise ValueError(f"budget count must be positive, got {self.count}")

    @classmethod
    def parse(cls, text) -> "SampleBudget":
        """``"10%"`` is a share of interactions, ``"500"`` (or ``500``) a user count."""
        if isinstance(text, (int, np.integer)):
            return cls(unit="users", count=int(text))
        m = re.fullmatch(r"\s*([0-9.]+)\s*%\s*", str(text))
        if m:
            return cls(float(m.group(1)))
        if re.fullmatch(r"\s*\d+\s*", str(text)):
            return cls(unit="users", count=int(text))
        raise ValueError(f"cannot parse budget {text!r}: use 'P%' or a user count")

    def target(self, ds: InteractionDataset) -> int:
        if self.count is not None:
            return self.count
        n = ds.n_interactions if self.unit == "interactions" else ds.n_users
        return math.ceil(self.p_percent * n / 100.0)

    def label(self) -> str:
        return str(self.count) if self.count is not None else f"{self.p_percent:g}%"


def _fill_users(ds: InteractionDataset, order, budget: SampleBudget) -> InteractionDataset:
    target = budget.target(ds)
    counts = ds.user_counts()
    chosen, size = [], 0
    for u in order:
        if size >= target:
            break
        chosen.append(int(u))
        size += 1 if budget.unit == "users" else int(counts[u])
    return ds.take_users(np.sort(np.asarray(chosen, dtype=np.int64)))


def interaction_rns(ds: InteractionDataset, budget: SampleBudget, seed: int = 0) -> InteractionDataset:
    if budget.unit != "interactions":
        raise ValueError("interaction-level sampling needs an interaction budget")
    rows, cols = ds.entries()
    n = min(budget.target(ds), len(rows))
    keep = np.sort(stream(seed, "interaction-rns").choice(len(rows), size=n, replace=False))
    sub = ds.with_matrix(_select_entries(ds, rows[keep], cols[keep]))
    return sub.take_users(np.flatnonzero(sub.user_counts() > 0))


def _select_entries(ds, rows, cols):
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=ds.matrix.shape)


def user_rns(ds: InteractionDataset, budget: SampleBudget, seed: int = 0) -> InteractionDataset:
    return _fill_users(ds, stream(seed, "user-rns").permutation(ds.n_users), budget)


def head_user(ds: InteractionDataset, budget: SampleBudget, seed: int = 0) -> InteractionDataset:
    order = np.argsort(-ds.user_counts(), kind="stable")
    return _fill_users(ds, order, budget)


def sampled_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Share of (positive, negative) pairs ordered correctly; ties count one half."""
    neg = np.sort(neg_scores)
    below = np.searchsorted(neg, pos_scores, side="left")
    not_above = np.searchsorted(neg, pos_scores, side="right")
    return float((below + 0.5 * (not_above - below)).sum() / (len(pos_scores) * len(neg)))


def svp_scores(
    ds: InteractionDataset, epochs: int = 5, seed: int = 0, n_negatives: int = 100,
    lr: float = 0.05, l2: float = 0.01,
) -> np.ndarray:
    """Per-user difficulty: mean over proxy epochs of ``1 - AUC``.

    The proxy is the bias-only model trained by per-observation SGD on the
    positives plus one fresh negative each per epoch. After every epoch each
    user's positives are ranked against ``n_negatives`` unobserved items.
    Users with no unobserved item score zero.
    """
    if epochs < 1:
        raise ValueError(f"SVP-CF needs at least one proxy epoch, got {epochs}")
    X = ds.matrix
    model = BiasModel(0.0, np.zeros(ds.n_users), np.zeros(ds.n_items))
    all_items = np.arange(ds.n_items)
    total = np.zeros(ds.n_users)
    for e in range(epochs):
        u, i, t = training_observations(X, seed, tag=("svp", e))
        bias_sgd_epoch(model, u, i, t, l2, lr, stream(seed, "svp-order", e))
        for row in range(ds.n_users):
            pos = X.indices[X.indptr[row]:X.indptr[row + 1]]
            free = np.setdiff1d(all_items, pos, assume_unique=True)
            if pos.size == 0 or free.size == 0:
                continue
            neg = stream(seed, "svp-auc", e, row).choice(free, size=min(n_negatives, free.size), replace=False)
            # the user and global offsets shift every item equally
            total[row] += 1.0 - sampled_auc(model.beta_item[pos], model.beta_item[neg])
    return total / epochs


def svp_cf_user(
    ds: InteractionDataset, budget: SampleBudget, proxy_epochs: int = 5, seed: int = 0, **proxy
) -> InteractionDataset:
    scores = svp_scores(ds, proxy_epochs, seed, **proxy)
    return _fill_users(ds, np.argsort(-scores, kind="stable"), budget)


def sample(strategy: str, ds: InteractionDataset, budget: SampleBudget, seed: int = 0, **kw) -> InteractionDataset:
    fns = {
        "interaction-rns": interaction_rns, "user-rns": user_rns,
        "head-user": head_user, "svp-cf": svp_cf_user,
    }
    if strategy not in fns:
        raise ValueError(f"unknown sampling strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    return fns[strategy](ds, budget, seed=seed, **kw)
