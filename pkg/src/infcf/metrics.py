"""Full-ranking evaluation metrics for implicit feedback.

AUC, HR@k (recall), nDCG@k and propensity-scored precision PSP@k. Ranking
ties are broken by ascending item index; AUC counts ties as one half.
Metric values are fractions in [0, 1]; text output multiplies by 100.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata

DEFAULT_KS = (10, 100)


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """Item propensities phi(i) = 1 / (1 + C exp(-A ln(n_i + B)))."""

    item_counts: np.ndarray
    n_total: int
    A: float = 0.55
    B: float = 1.5

    def __post_init__(self):
        if self.n_total <= math.e:
            raise ValueError(
                f"propensity model needs more than e interactions (got N={self.n_total}): "
                "C = (ln N - 1)(B + 1)^A would not be positive"
            )

    @classmethod
    def from_dataset(cls, ds, A: float = 0.55, B: float = 1.5) -> "PropensityModel":
        return cls(np.asarray(ds.item_counts(), dtype=np.float64), int(ds.n_interactions), A, B)

    @property
    def C(self) -> float:
        return (math.log(self.n_total) - 1.0) * (self.B + 1.0) ** self.A

    def phi(self, items=None) -> np.ndarray:
        n = self.item_counts if items is None else self.item_counts[np.asarray(items)]
        return 1.0 / (1.0 + self.C * np.exp(-self.A * np.log(n + self.B)))


def propensity(model: PropensityModel, item: int) -> float:
    return float(model.phi([item])[0])


# ---------------------------------------------------------------------------
# Single-user metrics


def rank_items(scores, masked: Iterable[int] = ()) -> np.ndarray:
    """Item indices by descending score (ties: ascending index), masked items dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    masked = set(int(i) for i in masked)
    if masked:
        order = np.array([i for i in order if i not in masked], dtype=np.int64)
    return order


def auc(scores, positives, masked: Iterable[int] = ()) -> float:
    """Probability a positive outranks a negative; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    masked = set(int(i) for i in masked)
    pos = np.array(sorted(set(int(i) for i in positives) - masked), dtype=np.int64)
    keep = np.array([i for i in range(len(scores)) if i not in masked], dtype=np.int64)
    is_pos = np.isin(keep, pos)
    n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores[keep])
    return float((ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hr_at_k(ranked: Sequence[int], positives, k: int) -> float:
    positives = set(int(i) for i in positives)
    hits = sum(1 for i in list(ranked)[:k] if int(i) in positives)
    return hits / len(positives)


def _idcg(n_pos: int, k: int, standard: bool) -> float:
    n = min(n_pos, k) if standard else n_pos
    return float(np.sum(1.0 / np.log2(np.arange(2, n + 2))))


def ndcg_at_k(ranked: Sequence[int], positives, k: int, standard: bool = False) -> float:
    """DCG@k over an ideal DCG summed across all positives (or the first k when ``standard``)."""
    positives = set(int(i) for i in positives)
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(list(ranked)[:k]) if int(i) in positives)
    return dcg / _idcg(len(positives), k, standard)


def psp_at_k(ranked: Sequence[int], positives, k: int, model: PropensityModel) -> float:
    positives = sorted(set(int(i) for i in positives))
    inv = 1.0 / model.phi()
    pos = set(positives)
    upsp = sum(inv[int(i)] for i in list(ranked)[:k] if int(i) in pos) / k
    mpsp = float(np.sum(inv[positives]))
    return upsp / mpsp


# ---------------------------------------------------------------------------
# Batched metrics


def metric_names(ks: Sequence[int], with_psp: bool = True) -> list[str]:
    names = ["auc"]
    names += [f"hr@{k}" for k in ks]
    names += [f"ndcg@{k}" for k in ks]
    if with_psp:
        names += [f"psp@{k}" for k in ks]
    return names


def user_metrics(
    scores: np.ndarray,
    positives,
    ks: Sequence[int] = DEFAULT_KS,
    masked=None,
    propensity: PropensityModel | None = None,
    standard_ndcg: bool = False,
) -> dict[str, np.ndarray]:
    """Per-user metric vectors for a block of score rows.

    ``positives`` and ``masked`` are sparse (or dense boolean) matrices shaped
    like ``scores``. Masked items are excluded from ranking and from the AUC
    negatives. Users without (unmasked) positives get NaN.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    pos = positives.toarray() > 0 if sp.issparse(positives) else np.asarray(positives) > 0
    n_users, n_items = scores.shape
    if masked is not None:
        mask = masked.toarray() > 0 if sp.issparse(masked) else np.asarray(masked) > 0
        scores[mask] = -np.inf
        pos = pos & ~mask
        n_masked = mask.sum(axis=1)
    else:
        n_masked = np.zeros(n_users, dtype=np.int64)
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    out: dict[str, np.ndarray] = {}

    # masked items tie at -inf below everything else, so unmasked ranks shift by n_masked
    ranks = rankdata(scores, axis=1)
    n_neg = n_items - n_masked - n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        rank_sum = np.where(pos, ranks, 0.0).sum(axis=1) - n_masked * n_pos
        out["auc"] = np.where(valid & (n_neg > 0), (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg), np.nan)

    kmax = max(ks)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
    hits = np.take_along_axis(pos, order, axis=1)
    # k may exceed the item count; the ranking is then simply shorter
    discounts = 1.0 / np.log2(np.arange(2, order.shape[1] + 2))
    inv_phi = None if propensity is None else 1.0 / propensity.phi()
    with np.errstate(invalid="ignore", divide="ignore"):
        for k in ks:
            out[f"hr@{k}"] = np.where(valid, hits[:, :k].sum(axis=1) / n_pos, np.nan)
        cum_disc = np.concatenate([[0.0], np.cumsum(discounts)])
        for k in ks:
            dcg = (hits[:, :k] * discounts[:k]).sum(axis=1)
            n_ideal = np.minimum(n_pos, k) if standard_ndcg else n_pos
            idcg = _idcg_vector(n_ideal, cum_disc)
            out[f"ndcg@{k}"] = np.where(valid, dcg / idcg, np.nan)
        if inv_phi is not None:
            mpsp = np.where(pos, inv_phi[None, :], 0.0).sum(axis=1)
            gains = hits * inv_phi[order]
            for k in ks:
                out[f"psp@{k}"] = np.where(valid, gains[:, :k].sum(axis=1) / k / mpsp, np.nan)
    return out


def _idcg_vector(n: np.ndarray, cum_disc: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    if n.size and n.max() >= len(cum_disc):
        cum_disc = np.concatenate([[0.0], np.cumsum(1.0 / np.log2(np.arange(2, n.max() + 2)))])
    return cum_disc[n]


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    values: dict
    n_users: int = 0
    per_user: dict | None = None
    strata: list | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_user_metrics(cls, per_user: dict, keep_per_user: bool = False, meta: dict | None = None):
        values, n = {}, 0
        for name, vec in per_user.items():
            ok = ~np.isnan(vec)
            values[name] = float(np.mean(vec[ok])) if ok.any() else float("nan")
            n = max(n, int(ok.sum()))
        return cls(values, n, per_user if keep_per_user else None, None, dict(meta or {}))

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_dict(self) -> dict:
        d = {"values": self.values, "n_users": self.n_users, "meta": self.meta}
        if self.strata is not None:
            d["strata"] = [s.to_dict() for s in self.strata]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in self.values.items():
            w.writerow([name, repr(float(v))])
        return buf.getvalue()

    def format_table(self) -> str:
        lines = []
        for name, v in self.values.items():
            shown = f"{v:.4f}" if name == "auc" else f"{100 * v:.2f}"
            lines.append(f"{name:>10}  {shown}")
        return "\n".join(lines)


def evaluate_scores(
    scores: np.ndarray,
    positives,
    ks: Sequence[int] = DEFAULT_KS,
    masked=None,
    propensity: PropensityModel | None = None,
    standard_ndcg: bool = False,
    keep_per_user: bool = False,
    meta: dict | None = None,
) -> MetricsReport:
    per_user = user_metrics(scores, positives, ks, masked, propensity, standard_ndcg)
    return MetricsReport.from_user_metrics(per_user, keep_per_user, meta)


def stratify(
    train,
    scores: np.ndarray,
    positives,
    n_buckets: int,
    ks: Sequence[int] = DEFAULT_KS,
    by: str = "users",
    masked=None,
    propensity: PropensityModel | None = None,
    standard_ndcg: bool = False,
) -> list[MetricsReport]:
    """Metrics per popularity bucket, coldest bucket first.

    ``by="users"`` sorts users by train-history length and splits them into
    ``n_buckets`` equal groups. ``by="items"`` does the same for items by
    train frequency and scores each user only on positives inside the bucket.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    positives = sp.csr_matrix(positives)
    reports = []
    if by == "users":
        order = np.argsort(train.user_counts(), kind="stable")
        for b, rows in enumerate(np.array_split(order, n_buckets)):
            rows = np.sort(rows)
            rep = evaluate_scores(
                scores[rows], positives[rows], ks,
                None if masked is None else sp.csr_matrix(masked)[rows],
                propensity, standard_ndcg,
            )
            rep.meta = {"bucket": b, "by": by, "size": int(len(rows))}
            reports.append(rep)
    elif by == "items":
        order = np.argsort(train.item_counts(), kind="stable")
        for b, cols in enumerate(np.array_split(order, n_buckets)):
            keep = np.zeros(positives.shape[1])
            keep[cols] = 1.0
            bucket_pos = positives @ sp.diags(keep)
            rep = evaluate_scores(scores, bucket_pos, ks, masked, propensity, standard_ndcg)
            rep.meta = {"bucket": b, "by": by, "size": int(len(cols))}
            reports.append(rep)
    else:
        raise ValueError(f"stratify by 'users' or 'items', not {by!r}")
    return reports
