"""Top-K ranking evaluation: Recall@K and NDCG@K over all non-train items."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Split
from .model import MfModel

DEFAULT_KS = (10, 20, 30)


@dataclass
class EvalReport:
    metrics: dict[int, dict[str, float]]
    n_users_evaluated: int
    config_digest: str = ""
    wall_time: float = 0.0
    label_source: str = "heldout"
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"label_source": self.label_source, "n_users": self.n_users_evaluated,
               "config_digest": self.config_digest, "wall_time": round(self.wall_time, 4)}
        for k in sorted(self.metrics):
            row[f"recall@{k}"] = self.metrics[k]["recall"]
            row[f"ndcg@{k}"] = self.metrics[k]["ndcg"]
        row.update(self.extra)
        return row

    def to_json(self, path) -> None:
        doc = {"metrics": {str(k): v for k, v in self.metrics.items()},
               "n_users_evaluated": self.n_users_evaluated, "config_digest": self.config_digest,
               "wall_time": self.wall_time, "label_source": self.label_source, "extra": self.extra}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls({int(k): v for k, v in doc["metrics"].items()}, doc["n_users_evaluated"],
                   doc["config_digest"], doc["wall_time"], doc["label_source"], doc.get("extra", {}))

    def append_csv(self, path) -> None:
        row = self.flat()
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)


def digest(config) -> str:
    return hashlib.sha1(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# single-user primitives


def rank_items(m_or_scores, u: int | None = None, exclude=()) -> np.ndarray:
    """Items by descending score, ties by ascending id, with ``exclude`` removed.

    Accepts either an :class:`MfModel` plus a user id, or a 1-d score vector.
    """
    scores = m_or_scores.V @ m_or_scores.W[u] if isinstance(m_or_scores, MfModel) else np.asarray(m_or_scores)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude)))]
    return order


def recall_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    hits = sum(1 for i in ranked[:k] if int(i) in test)
    return hits / len(test)


def ndcg_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(int(t) for t in test_items)
    if not test:
        raise ValueError("empty test set")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:k]) if int(i) in test)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(test))))
    return dcg / idcg


# ---------------------------------------------------------------------------
# batched evaluation


def topk_matrix(scores: np.ndarray, exclude_mask: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` item ids per row, excluded entries removed, ties by ascending id."""
    s = np.where(exclude_mask, -np.inf, scores)
    n = s.shape[1]
    if k >= n:
        return np.argsort(-s, axis=1, kind="stable")[:, :k]
    part = np.argpartition(-s, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(s, part, axis=1)
    # order the k candidates by (-score, id)
    top = np.take_along_axis(part, np.lexsort((part, -vals), axis=1), axis=1)
    # a tie straddling the cutoff may have kept a larger id; redo those rows exactly
    kth = np.take_along_axis(s, top[:, -1:], axis=1)
    n_ge = (s >= kth).sum(axis=1)
    bad = np.flatnonzero(n_ge > k)
    if len(bad):
        top[bad] = np.argsort(-s[bad], axis=1, kind="stable")[:, :k]
    return top


def metrics_from_topk(top: np.ndarray, targets, ks) -> dict[int, dict[str, float]]:
    """Mean recall/NDCG at each cutoff for rows of ``top`` against ``targets``.

    ``targets`` is a list of item collections aligned with the rows of
    ``top``, or a boolean relevance matrix with the same row count.
    """
    kmax = top.shape[1]
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    cum = np.cumsum(discounts)
    if isinstance(targets, np.ndarray):
        rel = targets
    else:
        n_cols = max([int(top.max(initial=0))] + [max(t, default=0) for t in targets]) + 1
        rel = relevance_matrix(targets, n_cols)
    sizes = rel.sum(axis=1)
    hits = np.take_along_axis(rel, top, axis=1)
    out = {}
    for k in ks:
        h = hits[:, :k]
        recall = h.sum(axis=1) / sizes
        dcg = (h * discounts[:k]).sum(axis=1)
        idcg = cum[np.minimum(k, sizes).astype(int) - 1]
        out[int(k)] = {"recall": float(recall.mean()), "ndcg": float((dcg / idcg).mean())}
    return out


def relevance_matrix(targets, n_items: int) -> np.ndarray:
    rel = np.zeros((len(targets), n_items), dtype=bool)
    for r, t in enumerate(targets):
        rel[r, np.asarray(list(t), dtype=np.int64)] = True
    return rel


def train_mask(split: Split) -> np.ndarray:
    mask = np.zeros((split.n_users, split.n_items), dtype=bool)
    pos = split.train.positives_mask()
    mask[split.train.users[pos], split.train.items[pos]] = True
    return mask


def evaluate(m, split: Split, ks=DEFAULT_KS, label_source: str = "heldout", labels=None,
             which: str = "test", config=None, exclude: np.ndarray | None = None) -> EvalReport:
    """Average Recall@K / NDCG@K over users with a non-empty label set.

    ``m`` is an :class:`MfModel` or a full user x item score matrix.
    ``label_source="external"`` ranks against ``labels`` (user -> items)
    instead of the held-out ``which`` set.
    """
    t0 = time.perf_counter()
    if label_source == "heldout":
        held = split.test if which == "test" else split.valid
    elif label_source == "external":
        if labels is None:
            raise ValueError("external evaluation needs a label set")
        missing = sorted(u for u in labels if not 0 <= int(u) < split.n_users)
        if missing:
            raise ValueError(f"label users missing from the split: {missing}")
        held = labels
    else:
        raise ValueError(f"unknown label source {label_source!r}")
    users = np.array(sorted(u for u, items in held.items() if len(items)), dtype=np.int64)
    ks = sorted(int(k) for k in ks)
    if not len(users):
        return EvalReport({k: {"recall": 0.0, "ndcg": 0.0} for k in ks}, 0,
                          digest(config or {}), time.perf_counter() - t0, label_source)
    scores = m.W[users] @ m.V.T if isinstance(m, MfModel) else np.asarray(m)[users]
    mask = (train_mask(split) if exclude is None else exclude)[users]
    top = topk_matrix(scores, mask, ks[-1])
    metrics = metrics_from_topk(top, [held[int(u)] for u in users], ks)
    return EvalReport(metrics, len(users), digest(config or {}), time.perf_counter() - t0,
                      label_source)


def load_labels(path) -> dict[int, list[int]]:
    """Read a ``user,item`` CSV of external relevance labels."""
    table: dict[int, list[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table.setdefault(int(row["user"]), []).append(int(row["item"]))
    return table


def save_labels(labels: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item"])
        for u in sorted(labels):
            for i in labels[u]:
                w.writerow([u, i])
