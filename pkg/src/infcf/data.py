"""Interaction matrices: loading, per-user splits, noise injection, summaries.

All matrices are CSR with float64 entries equal to exactly 1.0; rows are users
and columns are items. Every function returns a new value and leaves its
inputs untouched.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .rng import stream

SUMMARY_FORMAT = "infcf-summary"
SUMMARY_VERSION = 1
FORMATS = ("tsv", "csv", "ml-delim")
_DELIMS = {"tsv": "\t", "csv": ",", "ml-delim": "::"}


class DataError(ValueError):
    """Raised for unreadable, malformed or empty interaction data."""


class SummaryFormatError(DataError):
    pass


def _binary_csr(rows, cols, shape) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)
    m.sum_duplicates()
    m.data[:] = 1.0
    m.sort_indices()
    return m


def _canonical(matrix) -> sp.csr_matrix:
    m = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
    m.eliminate_zeros()
    m.sum_duplicates()
    m.sort_indices()
    m.data[:] = 1.0
    return m


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Sparse binary user-item matrix plus the external ids of its rows and columns."""

    user_ids: tuple
    item_ids: tuple
    matrix: sp.csr_matrix

    def __post_init__(self):
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "matrix", _canonical(self.matrix))
        if self.matrix.shape != (len(self.user_ids), len(self.item_ids)):
            raise DataError(
                f"matrix shape {self.matrix.shape} does not match "
                f"{len(self.user_ids)} users x {len(self.item_ids)} items"
            )
        if len(set(self.user_ids)) != len(self.user_ids) or len(set(self.item_ids)) != len(self.item_ids):
            raise DataError("user and item ids must be unique")

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_interactions(self) -> int:
        return int(self.matrix.nnz)

    def user_counts(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.matrix.indices, minlength=self.n_items)

    def entries(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) index arrays of the stored ones, in row-major order."""
        coo = self.matrix.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64)

    def take_users(self, rows: Sequence[int]) -> "InteractionDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return InteractionDataset(
            tuple(self.user_ids[r] for r in rows), self.item_ids, self.matrix[rows]
        )

    def with_matrix(self, matrix) -> "InteractionDataset":
        return InteractionDataset(self.user_ids, self.item_ids, matrix)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([list(map(str, self.user_ids)), list(map(str, self.item_ids))]).encode())
        h.update(self.matrix.indptr.astype(np.int64).tobytes())
        h.update(self.matrix.indices.astype(np.int64).tobytes())
        return h.hexdigest()[:16]

    def equals(self, other: "InteractionDataset") -> bool:
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and self.matrix.shape == other.matrix.shape
            and np.array_equal(self.matrix.indptr, other.matrix.indptr)
            and np.array_equal(self.matrix.indices, other.matrix.indices)
        )

    __eq__ = equals
    __hash__ = None

    def __repr__(self):
        return f"InteractionDataset({self.n_users} users, {self.n_items} items, {self.n_interactions} interactions)"


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionDataset
    val: InteractionDataset
    test: InteractionDataset
    seed: int
    ratios: tuple = (0.8, 0.1, 0.1)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def with_train(self, train: InteractionDataset) -> "SplitDataset":
        if train.user_ids != self.train.user_ids or train.item_ids != self.train.item_ids:
            raise DataError("replacement train set must share the split's index spaces")
        return SplitDataset(train, self.val, self.test, self.seed, self.ratios)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            "|".join(d.fingerprint() for d in (self.train, self.val, self.test)).encode()
        ).hexdigest()[:16]


@dataclass(eq=False)
class SampledSummary:
    """A binary mu x |I| synthetic data summary and its provenance record."""

    matrix: sp.csr_matrix
    item_ids: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = _canonical(self.matrix)
        self.item_ids = tuple(self.item_ids)
        if self.matrix.shape[1] != len(self.item_ids):
            raise DataError("summary column count does not match its item universe")

    @property
    def mu(self) -> int:
        return self.matrix.shape[0]

    def as_dataset(self) -> InteractionDataset:
        return InteractionDataset(
            tuple(f"synthetic-{i}" for i in range(self.mu)), self.item_ids, self.matrix
        )

    def equals(self, other: "SampledSummary") -> bool:
        return (
            self.item_ids == other.item_ids
            and self.matrix.shape == other.matrix.shape
            and np.array_equal(self.matrix.indptr, other.matrix.indptr)
            and np.array_equal(self.matrix.indices, other.matrix.indices)
            and self.meta == other.meta
        )

    __eq__ = equals
    __hash__ = None


# ---------------------------------------------------------------------------
# Loading


def _parse_lines(lines: Iterable[str], delim: str, columns: Sequence[str], path) -> Iterable[tuple]:
    try:
        ui, ii, ri = columns.index("user"), columns.index("item"), columns.index("rating")
    except ValueError:
        raise DataError(f"columns {columns!r} must name 'user', 'item' and 'rating'") from None
    need = max(ui, ii, ri) + 1
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split(delim)
        if delim == "\t" and len(parts) < need:
            parts = line.split()
        if len(parts) < need:
            raise DataError(f"{path}:{lineno}: expected at least {need} fields, got {len(parts)}")
        try:
            rating = float(parts[ri])
        except ValueError:
            if lineno == 1:
                continue  # header line
            raise DataError(f"{path}:{lineno}: rating {parts[ri]!r} is not a number") from None
        user, item = parts[ui].strip(), parts[ii].strip()
        if not user or not item:
            raise DataError(f"{path}:{lineno}: empty user or item id")
        yield user, item, rating


def from_pairs(pairs: Iterable[tuple[str, str]]) -> InteractionDataset:
    """Dataset from (user, item) pairs; ids get dense indices in first-seen order."""
    users: dict = {}
    items: dict = {}
    rows, cols = [], []
    for u, i in pairs:
        rows.append(users.setdefault(u, len(users)))
        cols.append(items.setdefault(i, len(items)))
    if not rows:
        raise DataError("dataset is empty")
    return InteractionDataset(tuple(users), tuple(items), _binary_csr(rows, cols, (len(users), len(items))))


def load_interactions(
    path,
    format: str = "tsv",
    rating_threshold: float | None = None,
    columns: Sequence[str] = ("user", "item", "rating", "timestamp"),
) -> InteractionDataset:
    """Read ``user item rating [timestamp]`` records into a binary dataset.

    Records with ``rating >= rating_threshold`` become ones (all records when
    no threshold is given). Repeated (user, item) pairs collapse to one entry.
    A first line whose rating field is not numeric is treated as a header.
    ``columns`` reorders fields for files such as the Amazon ratings dumps,
    which put the item first.
    """
    if format not in _DELIMS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        records = _parse_lines(fh, _DELIMS[format], tuple(columns), path)
        pairs = ((u, i) for u, i, r in records if rating_threshold is None or r >= rating_threshold)
        try:
            return from_pairs(pairs)
        except DataError as exc:
            if "empty" in str(exc):
                raise DataError(f"{path}: no interactions survive loading") from None
            raise


def write_interactions(ds: InteractionDataset, path) -> None:
    """Write ``user<TAB>item<TAB>1`` lines in row-major order."""
    rows, cols = ds.entries()
    with open(path, "w", encoding="utf-8") as fh:
        for r, c in zip(rows.tolist(), cols.tolist()):
            fh.write(f"{ds.user_ids[r]}\t{ds.item_ids[c]}\t1\n")


# ---------------------------------------------------------------------------
# Splitting and noise


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes for a user with ``n`` interactions."""
    n_val = max(1, _round_half_up(ratios[1] * n))
    n_test = max(1, _round_half_up(ratios[2] * n))
    return n - n_val - n_test, n_val, n_test


def split_per_user(
    ds: InteractionDataset,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    min_interactions: int = 3,
    seed: int = 42,
) -> SplitDataset:
    """Randomly split each user's history into train/val/test.

    Users with fewer than ``min_interactions`` entries are dropped; items are
    never pruned. Each user's shuffle comes from its own keyed stream.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be three nonnegative fractions summing to 1, got {ratios}")
    if min_interactions < 3:
        raise DataError("min_interactions must be at least 3 so every split gets one entry")
    counts = ds.user_counts()
    keep = np.flatnonzero(counts >= min_interactions)
    if len(keep) == 0:
        raise DataError(f"every user has fewer than {min_interactions} interactions")

    parts: list[list[list[int]]] = [[[], []], [[], []], [[], []]]
    m = ds.matrix
    for new_row, row in enumerate(keep.tolist()):
        items = m.indices[m.indptr[row]:m.indptr[row + 1]]
        n = len(items)
        n_train, n_val, n_test = split_sizes(n, ratios)
        if n_train < 1:
            raise DataError(f"ratios {ratios} leave no training entries for a user with {n} interactions")
        perm = stream(seed, "split", row).permutation(items)
        chunks = (perm[n_val + n_test:], perm[n_test:n_test + n_val], perm[:n_test])
        for part, chunk in zip(parts, chunks):
            part[0].extend([new_row] * len(chunk))
            part[1].extend(chunk.tolist())

    users = tuple(ds.user_ids[r] for r in keep)
    shape = (len(keep), ds.n_items)
    train, val, test = (InteractionDataset(users, ds.item_ids, _binary_csr(r, c, shape)) for r, c in parts)
    return SplitDataset(train, val, test, seed, ratios)


def inject_noise(ds: InteractionDataset, x_percent: float, seed: int) -> InteractionDataset:
    """Flip ``round(x% of |I|)`` distinct random items in every user row."""
    if not 0 <= x_percent <= 100:
        raise DataError(f"noise level must lie in [0, 100], got {x_percent}")
    n_flip = _round_half_up(x_percent / 100.0 * ds.n_items)
    if n_flip == 0:
        return ds.with_matrix(ds.matrix)
    rows = np.repeat(np.arange(ds.n_users), n_flip)
    cols = np.concatenate(
        [stream(seed, "noise", u).choice(ds.n_items, size=n_flip, replace=False) for u in range(ds.n_users)]
    )
    flips = _binary_csr(rows, cols, ds.matrix.shape)
    # symmetric difference: X + F - 2 X*F
    out = ds.matrix + flips - 2 * ds.matrix.multiply(flips)
    return ds.with_matrix(out)


# ---------------------------------------------------------------------------
# Persistence


def write_summary(s: SampledSummary, path) -> None:
    """One JSON header line, then ``row<TAB>col`` per entry sorted by (row, col)."""
    coo = s.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    header = {
        "format": SUMMARY_FORMAT,
        "version": SUMMARY_VERSION,
        "n_rows": int(s.mu),
        "n_entries": int(coo.nnz),
        "item_ids": list(s.item_ids),
        "meta": s.meta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r, c in zip(coo.row[order].tolist(), coo.col[order].tolist()):
            fh.write(f"{r}\t{c}\n")


def read_summary(path) -> SampledSummary:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise SummaryFormatError(f"{path}: bad header: {exc}") from None
        if header.get("format") != SUMMARY_FORMAT or header.get("version") != SUMMARY_VERSION:
            raise SummaryFormatError(
                f"{path}: unsupported summary format {header.get('format')!r} "
                f"version {header.get('version')!r} (expected {SUMMARY_VERSION})"
            )
        rows, cols = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                r, c = line.split("\t")
                rows.append(int(r))
                cols.append(int(c))
            except ValueError:
                raise SummaryFormatError(f"{path}:{lineno}: malformed pair line") from None
    if len(rows) != header["n_entries"]:
        raise SummaryFormatError(
            f"{path}: entry count {len(rows)} does not match header count {header['n_entries']}"
        )
    shape = (header["n_rows"], len(header["item_ids"]))
    return SampledSummary(_binary_csr(rows, cols, shape), tuple(header["item_ids"]), header["meta"])


def save_split(split: SplitDataset, directory) -> None:
    """Write a split as ``users.txt``, ``items.txt`` and one TSV per part."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "users.txt").write_text("".join(f"{u}\n" for u in split.train.user_ids), encoding="utf-8")
    (d / "items.txt").write_text("".join(f"{i}\n" for i in split.train.item_ids), encoding="utf-8")
    for name in ("train", "val", "test"):
        write_interactions(getattr(split, name), d / f"{name}.tsv")
    meta = {"seed": split.seed, "ratios": list(split.ratios), "fingerprint": split.fingerprint()}
    (d / "split.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def _read_part(path, users: dict, items: dict) -> sp.csr_matrix:
    rows, cols = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: malformed record")
            try:
                rows.append(users[parts[0]])
                cols.append(items[parts[1]])
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown id {exc.args[0]!r}") from None
    return _binary_csr(rows, cols, (len(users), len(items)))


def load_split(directory) -> SplitDataset:
    d = Path(directory)
    if not (d / "split.json").exists():
        raise DataError(f"{d} is not a prepared split directory")
    user_ids = tuple((d / "users.txt").read_text(encoding="utf-8").splitlines())
    item_ids = tuple((d / "items.txt").read_text(encoding="utf-8").splitlines())
    users = {u: k for k, u in enumerate(user_ids)}
    items = {i: k for k, i in enumerate(item_ids)}
    meta = json.loads((d / "split.json").read_text(encoding="utf-8"))
    parts = [InteractionDataset(user_ids, item_ids, _read_part(d / f"{n}.tsv", users, items))
             for n in ("train", "val", "test")]
    return SplitDataset(*parts, seed=meta["seed"], ratios=tuple(meta["ratios"]))


# ---------------------------------------------------------------------------
# Synthetic data


def synthetic_interactions(
    n_users: int = 600,
    n_items: int = 300,
    n_clusters: int = 8,
    mean_activity: float = 25.0,
    popularity_skew: float = 0.8,
    affinity: float = 3.0,
    seed: int = 0,
) -> InteractionDataset:
    """Clustered implicit-feedback data with Zipfian item popularity.

    Each user belongs to a taste cluster; an item's sampling weight is its
    popularity times ``exp(affinity * match)``. Only used for tests and demos
    when no public dataset is at hand.
    """
    rng = stream(seed, "synthetic")
    pop = 1.0 / np.arange(1, n_items + 1) ** popularity_skew
    pop = pop[rng.permutation(n_items)]
    item_cluster = rng.integers(n_clusters, size=n_items)
    user_cluster = rng.integers(n_clusters, size=n_users)
    activity = np.clip(rng.lognormal(np.log(mean_activity), 0.6, size=n_users).astype(int), 3, n_items // 2)
    rows, cols = [], []
    for u in range(n_users):
        w = pop * np.exp(affinity * (item_cluster == user_cluster[u]))
        picked = rng.choice(n_items, size=activity[u], replace=False, p=w / w.sum())
        rows.extend([u] * len(picked))
        cols.extend(picked.tolist())
    return InteractionDataset(
        tuple(f"u{u}" for u in range(n_users)),
        tuple(f"i{i}" for i in range(n_items)),
        _binary_csr(rows, cols, (n_users, n_items)),
    )


def dataset_from_env(var: str, format: str = "ml-delim", **kw) -> InteractionDataset | None:
    """Load the dataset named by environment variable ``var``, if set."""
    path = os.environ.get(var)
    if not path:
        return None
    return load_interactions(path, format=os.environ.get(var + "_FORMAT", format), **kw)
