"""Interaction logs: loading, binarization, leave-one-out splits, negative sampling.

A :class:`Dataset` stores interactions column-wise as numpy arrays with dense
0-based ids. Raw ids from the source file are kept in ``user_ids`` /
``item_ids`` so that outputs can be mapped back.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

EXPLICIT = "explicit"
IMPLICIT = "implicit"
RULES = ("rating_ge_4", "watch_ratio_ge_2", "passthrough")
NO_TIMESTAMP = -1

DEFAULT_SCHEMA = {"user": "user", "item": "item", "value": "value", "timestamp": "timestamp"}


class DataError(ValueError):
    """Raised for malformed or inconsistent interaction data."""


class Interaction(NamedTuple):
    user: int
    item: int
    value: float
    timestamp: int = NO_TIMESTAMP


@dataclass(frozen=True)
class Dataset:
    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray
    feedback_kind: str = EXPLICIT
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.values) == len(self.timestamps) == n):
            raise DataError("interaction columns have different lengths")
        if n and (self.users.max() >= self.n_users or self.items.max() >= self.n_items):
            raise DataError("ids out of range")
        if n and (self.users.min() < 0 or self.items.min() < 0):
            raise DataError("negative ids")
        if not np.all(np.isfinite(self.values)):
            raise DataError("non-finite interaction value")
        if self.feedback_kind not in (EXPLICIT, IMPLICIT):
            raise DataError(f"unknown feedback kind {self.feedback_kind!r}")

    def __len__(self):
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, v, t in zip(self.users, self.items, self.values, self.timestamps):
            yield Interaction(int(u), int(i), float(v), int(t))

    @classmethod
    def from_arrays(cls, n_users, n_items, users, items, values=None, timestamps=None,
                    feedback_kind=IMPLICIT) -> "Dataset":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        values = np.ones(len(users)) if values is None else np.asarray(values, dtype=np.float64)
        if timestamps is None:
            timestamps = np.full(len(users), NO_TIMESTAMP, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        return cls(int(n_users), int(n_items), users, items, values, timestamps, feedback_kind)

    def positives_mask(self) -> np.ndarray:
        """Rows counted as positive feedback (value 1 for implicit data, all rows otherwise)."""
        if self.feedback_kind == IMPLICIT:
            return self.values > 0.5
        return np.ones(len(self), dtype=bool)

    def user_positives(self) -> list[np.ndarray]:
        """Sorted positive item ids for every user."""
        mask = self.positives_mask()
        return _group(self.users[mask], self.items[mask], self.n_users)

    def subset(self, mask: np.ndarray) -> "Dataset":
        return replace(self, users=self.users[mask], items=self.items[mask],
                       values=self.values[mask], timestamps=self.timestamps[mask])


def _group(keys: np.ndarray, vals: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.lexsort((vals, keys))
    keys, vals = keys[order], vals[order]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    return [vals[bounds[k]:bounds[k + 1]] for k in range(n)]


@dataclass
class Split:
    train: Dataset
    valid: dict[int, list[int]] = field(default_factory=dict)
    test: dict[int, list[int]] = field(default_factory=dict)
    seed: int = 0
    rule: str = "passthrough"

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def train_positives(self) -> list[np.ndarray]:
        return self.train.user_positives()


@dataclass(frozen=True)
class InteractionMatrix:
    axis: str
    rows: np.ndarray


# ---------------------------------------------------------------------------
# loading / saving


def load_interactions(path, format: str = "csv", schema: dict | None = None) -> Dataset:
    """Read a delimited interaction log and re-index ids densely.

    Raw ids must be integers. They are mapped to ``0..n-1`` in ascending raw
    order. Duplicate (user, item) pairs keep the row with the largest
    timestamp (the last such row on ties).
    """
    if format not in ("csv", "tsv"):
        raise DataError(f"unknown format {format!r}; expected csv or tsv")
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    delimiter = "," if format == "csv" else "\t"
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    users, items, values, stamps = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        try:
            iu, ii, iv = (header.index(cols[k]) for k in ("user", "item", "value"))
        except ValueError:
            raise DataError(f"{path}: header {header} lacks one of "
                            f"{cols['user']},{cols['item']},{cols['value']}") from None
        it = header.index(cols["timestamp"]) if cols["timestamp"] in header else None
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                users.append(int(row[iu]))
                items.append(int(row[ii]))
                v = float(row[iv])
                if not np.isfinite(v):
                    raise ValueError("non-finite value")
                values.append(v)
                stamps.append(int(float(row[it])) if it is not None and row[it].strip() else NO_TIMESTAMP)
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {lineno}: malformed row {row!r} ({exc})") from None
    if not users:
        raise DataError(f"{path}: no interactions")
    return _reindex(np.array(users), np.array(items), np.array(values, dtype=np.float64),
                    np.array(stamps, dtype=np.int64))


def load_dense_ratings(path, missing: float = 0.0) -> Dataset:
    """Read a whitespace-separated user x item rating matrix (e.g. Coat's ``train.ascii``).

    Entries equal to ``missing`` are unobserved. Row/column indices become the raw ids.
    """
    mat = np.loadtxt(path, ndmin=2)
    u, i = np.nonzero(mat != missing)
    return Dataset(mat.shape[0], mat.shape[1], u.astype(np.int64), i.astype(np.int64),
                   mat[u, i].astype(np.float64), np.full(len(u), NO_TIMESTAMP, dtype=np.int64),
                   EXPLICIT, np.arange(mat.shape[0]), np.arange(mat.shape[1]))


def _reindex(raw_users, raw_items, values, stamps) -> Dataset:
    user_ids, users = np.unique(raw_users, return_inverse=True)
    item_ids, items = np.unique(raw_items, return_inverse=True)
    # stable sort by timestamp so the later file row wins ties
    order = np.lexsort((np.arange(len(users)), stamps, items, users))
    users, items, values, stamps = users[order], items[order], values[order], stamps[order]
    last = np.ones(len(users), dtype=bool)
    last[:-1] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
    n_dup = int((~last).sum())
    if n_dup:
        logger.info("collapsed %d duplicate (user, item) rows", n_dup)
    return Dataset(len(user_ids), len(item_ids), users[last].astype(np.int64),
                   items[last].astype(np.int64), values[last], stamps[last], EXPLICIT,
                   user_ids, item_ids)


def save_interactions(d: Dataset, path) -> None:
    """Write ``d`` with dense ids, plus ``<path>.map.json`` holding the raw id tables."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "value", "timestamp"])
        for row in d:
            w.writerow([row.user, row.item, _fmt(row.value), row.timestamp])
    mapping = {
        "n_users": d.n_users,
        "n_items": d.n_items,
        "feedback_kind": d.feedback_kind,
        "user_ids": None if d.user_ids is None else [int(x) for x in d.user_ids],
        "item_ids": None if d.item_ids is None else [int(x) for x in d.item_ids],
    }
    with open(str(path) + ".map.json", "w", encoding="utf-8") as fh:
        json.dump(mapping, fh)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# binarization


def binarize(d: Dataset, rule: str) -> Dataset:
    if rule not in RULES:
        raise DataError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}")
    v = d.values
    if rule == "rating_ge_4":
        if np.any(v < 0):
            raise DataError("negative rating under rule rating_ge_4")
        out = (v >= 4.0).astype(np.float64)
    elif rule == "watch_ratio_ge_2":
        if np.any(v < 0):
            raise DataError("negative watch ratio under rule watch_ratio_ge_2")
        out = (v >= 2.0).astype(np.float64)
    else:
        out = v.copy()
    kind = IMPLICIT if np.all((out == 0) | (out == 1)) else d.feedback_kind
    n_pos = int((out == 1).sum())
    logger.info("binarize(%s): %d positives, %d negatives", rule, n_pos, len(out) - n_pos)
    return replace(d, values=out, feedback_kind=kind)


# ---------------------------------------------------------------------------
# splitting


def leave_one_out_split(d: Dataset, seed: int = 0, rule: str = "passthrough") -> Split:
    """Hold out each user's latest positive for test and second-latest for validation.

    Positives are ordered by timestamp after a seeded shuffle, so missing or
    tied timestamps fall back to a random but reproducible order. Users with
    fewer than three positives are kept entirely in train.
    """
    rng = np.random.default_rng(seed)
    pos_idx = np.flatnonzero(d.positives_mask())
    perm = rng.permutation(len(pos_idx))
    pos_idx = pos_idx[perm]
    # stable: timestamp order, shuffle order within ties
    pos_idx = pos_idx[np.argsort(d.timestamps[pos_idx], kind="stable")]
    pos_idx = pos_idx[np.argsort(d.users[pos_idx], kind="stable")]

    keep = np.ones(len(d), dtype=bool)
    valid, test = {}, {}
    users = d.users[pos_idx]
    bounds = np.searchsorted(users, np.arange(d.n_users + 1))
    for u in range(d.n_users):
        rows = pos_idx[bounds[u]:bounds[u + 1]]
        if len(rows) < 3:
            continue
        test[u] = [int(d.items[rows[-1]])]
        valid[u] = [int(d.items[rows[-2]])]
        keep[rows[-2:]] = False
    return Split(d.subset(keep), valid, test, seed, rule)


def save_split(s: Split, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_interactions(s.train, os.path.join(out_dir, "train.csv"))
    for name, held in (("valid", s.valid), ("test", s.test)):
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "item"])
            for u in sorted(held):
                for i in held[u]:
                    w.writerow([u, i])
    meta = {"n_users": s.n_users, "n_items": s.n_items, "seed": s.seed, "rule": s.rule,
            "feedback_kind": s.train.feedback_kind}
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_split(split_dir) -> Split:
    meta_path = os.path.join(split_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"{split_dir}: no meta.json (not a split directory)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    train = load_interactions(os.path.join(split_dir, "train.csv"))
    # ids are already dense; restore the full id space (users may have no train rows)
    train = Dataset(meta["n_users"], meta["n_items"], train.user_ids[train.users],
                    train.item_ids[train.items], train.values, train.timestamps,
                    meta["feedback_kind"])
    held = []
    for name in ("valid", "test"):
        table: dict[int, list[int]] = {}
        with open(os.path.join(split_dir, f"{name}.csv"), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                table.setdefault(int(row["user"]), []).append(int(row["item"]))
        held.append(table)
    return Split(train, held[0], held[1], meta["seed"], meta["rule"])


# ---------------------------------------------------------------------------
# model inputs


def interaction_matrix(s: Split | Dataset, axis: str = "by_user") -> InteractionMatrix:
    d = s.train if isinstance(s, Split) else s
    mat = np.zeros((d.n_users, d.n_items))
    mask = d.positives_mask()
    mat[d.users[mask], d.items[mask]] = 1.0
    if axis == "by_item":
        mat = np.ascontiguousarray(mat.T)
    elif axis != "by_user":
        raise DataError(f"unknown axis {axis!r}")
    return InteractionMatrix(axis, mat)


def epoch_seed(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def sample_negatives(s: Split, ratio: int = 4, seed: int = 0, epoch: int = 0,
                     positives: list[np.ndarray] | None = None):
    """One epoch of (user, item, label) triples as three aligned arrays.

    Every train positive appears once, followed by ``ratio`` uniform negatives
    per positive drawn from items outside the user's train positives. Users
    whose positives cover the catalogue contribute positives only.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    rng = epoch_seed(seed, epoch)
    pos = s.train_positives() if positives is None else positives
    n_items = s.n_items
    counts = np.array([len(p) for p in pos], dtype=np.int64)
    free = n_items - counts
    for u in np.flatnonzero((counts > 0) & (free == 0)):
        logger.warning("user %d has interacted with every item; no negatives", u)
    pos_users = np.repeat(np.arange(len(pos)), counts)
    pos_items = np.concatenate(pos).astype(np.int64) if len(pos) else np.zeros(0, np.int64)
    if not len(pos_items):
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    n_neg = np.where(free > 0, ratio * counts, 0)
    neg_users = np.repeat(np.arange(len(pos)), n_neg)
    # draw ranks in each user's complement, then shift past the sorted positives:
    # the k-th positive minus k counts the free slots before it
    ranks = rng.integers(0, free[neg_users]) if len(neg_users) else np.zeros(0, np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)])
    width = n_items + 1
    keys = pos_users * width + (pos_items - (np.arange(len(pos_items)) - starts[pos_users]))
    shift = np.searchsorted(keys, neg_users * width + ranks, side="right") - starts[neg_users]
    neg_items = ranks + shift
    users = np.concatenate([pos_users, neg_users])
    items = np.concatenate([pos_items, neg_items])
    labels = np.concatenate([np.ones(len(pos_items)), np.zeros(len(neg_items))])
    order = np.argsort(users, kind="stable")  # per user: positives, then negatives
    return users[order].astype(np.int64), items[order].astype(np.int64), labels[order]


def iter_triples(s: Split, ratio: int = 4, seed: int = 0, epoch: int = 0):
    """Stream form of :func:`sample_negatives`."""
    for u, i, y in zip(*sample_negatives(s, ratio, seed, epoch)):
        yield int(u), int(i), float(y)
