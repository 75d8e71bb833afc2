"""Synthetic confounded-feedback worlds with known true preferences.

Each user and item has a true factor vector and an independently drawn
confounder vector. Observed feedback on an exposed pair is Bernoulli with logit

    s_true + conf_strength * (conf_user_u . true_item_i + conf_item_i . true_user_u)

Round 1 exposes uniformly random items. Later rounds expose the top items of
a plain MF recommender fit to everything observed so far, so its own bias
feeds the next round of data.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import IMPLICIT, Dataset, Split
from .model import MfModel, sigmoid
from .optim import Adam
from .train import loss_normal


@dataclass
class SynthConfig:
    n_users: int = 500
    n_items: int = 1000
    d_true: int = 16
    conf_strength: float = 2.0
    exposure_k: int = 20
    rounds: int = 3
    density: float = 0.1
    seed: int = 0
    true_mean: float = 0.1
    true_std: float = 0.35
    conf_mean: float = 0.1
    conf_std: float = 0.1
    rec_d: int = 16
    rec_epochs: int = 30
    rec_lr: float = 0.01

    def __post_init__(self):
        if self.exposure_k > self.n_items:
            raise ValueError("exposure_k cannot exceed n_items")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.density <= 1:
            raise ValueError("density must be in (0, 1]")
        if self.conf_strength < 0:
            raise ValueError("conf_strength must be >= 0")


@dataclass
class SynthWorld:
    true_user: np.ndarray
    true_item: np.ndarray
    conf_user: np.ndarray
    conf_item: np.ndarray
    true_label: np.ndarray

    @property
    def n_users(self) -> int:
        return self.true_user.shape[0]

    @property
    def n_items(self) -> int:
        return self.true_item.shape[0]

    def true_scores(self) -> np.ndarray:
        return self.true_user @ self.true_item.T

    def confounder_scores(self) -> np.ndarray:
        """``conf_user_u . true_item_i + conf_item_i . true_user_u`` for every pair."""
        return self.conf_user @ self.true_item.T + self.true_user @ self.conf_item.T

    def observation_probs(self, conf_strength: float) -> np.ndarray:
        return sigmoid(self.true_scores() + conf_strength * self.confounder_scores())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **asdict(self))

    @classmethod
    def load(cls, path) -> "SynthWorld":
        with np.load(path) as z:
            return cls(*(z[k].copy() for k in ("true_user", "true_item", "conf_user",
                                               "conf_item", "true_label")))


@dataclass
class RoundStats:
    round: int
    false_positive_rate: float
    false_negative_rate: float
    positive_rate: float


def _streams(seed: int):
    names = ("true", "conf", "exposure", "feedback", "recommender")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5))))


def top_fraction_labels(scores: np.ndarray, density: float) -> np.ndarray:
    """Binary matrix marking each row's top ``round(density * n_cols)`` entries (ties by id)."""
    k = max(1, int(round(density * scores.shape[1])))
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = np.zeros(scores.shape, dtype=np.int8)
    np.put_along_axis(out, order, 1, axis=1)
    return out


def generate_world(cfg: SynthConfig) -> SynthWorld:
    rs = _streams(cfg.seed)
    tu = rs["true"].normal(cfg.true_mean, cfg.true_std, (cfg.n_users, cfg.d_true))
    ti = rs["true"].normal(cfg.true_mean, cfg.true_std, (cfg.n_items, cfg.d_true))
    cu = rs["conf"].normal(cfg.conf_mean, cfg.conf_std, (cfg.n_users, cfg.d_true))
    ci = rs["conf"].normal(cfg.conf_mean, cfg.conf_std, (cfg.n_items, cfg.d_true))
    return SynthWorld(tu, ti, cu, ci, top_fraction_labels(tu @ ti.T, cfg.density))


def _round_stats(r, y, truth) -> RoundStats:
    neg, pos = truth == 0, truth == 1
    fpr = float(y[neg].mean()) if neg.any() else 0.0
    fnr = float(1.0 - y[pos].mean()) if pos.any() else 0.0
    return RoundStats(r, fpr, fnr, float(y.mean()))


def fit_former_recommender(n_users, n_items, users, items, labels, cfg: SynthConfig, rng) -> MfModel:
    """Plain MF on every observed (user, item, label) triple, fixed number of epochs."""
    m = MfModel.init(n_users, n_items, cfg.rec_d, rng, 0.1)
    opt = Adam(m.params(), lr=cfg.rec_lr)
    for _ in range(cfg.rec_epochs):
        order = rng.permutation(len(users))
        for start in range(0, len(order), 1024):
            sl = order[start:start + 1024]
            _, g = loss_normal(m, (users[sl], items[sl], labels[sl]), IMPLICIT, 1e-4,
                               return_grads=True)
            opt.step(g)
    return m


def simulate_exposure(world: SynthWorld, cfg: SynthConfig, return_models: bool = False):
    """Run the feedback loop; returns the observed implicit :class:`Dataset` and per-round stats.

    The dataset timestamp of each observation is its round index (1-based).
    """
    rs = _streams(cfg.seed)
    probs = world.observation_probs(cfg.conf_strength)
    n_u, n_i, k = world.n_users, world.n_items, cfg.exposure_k
    seen = np.zeros((n_u, n_i), dtype=bool)
    users, items, labels, stamps, stats, models = [], [], [], [], [], []
    for r in range(1, cfg.rounds + 1):
        if r == 1:
            keys = rs["exposure"].random((n_u, n_i))
            shown = np.argsort(keys, axis=1)[:, :k]
        else:
            u_all, i_all, y_all = (np.concatenate(a) for a in (users, items, labels))
            rec = fit_former_recommender(n_u, n_i, u_all, i_all, y_all, cfg, rs["recommender"])
            models.append(rec)
            scores = np.where(seen, -np.inf, rec.all_scores())
            shown = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        uu = np.repeat(np.arange(n_u), shown.shape[1])
        ii = shown.ravel()
        seen[uu, ii] = True
        y = (rs["feedback"].random(len(uu)) < probs[uu, ii]).astype(np.float64)
        stats.append(_round_stats(r, y, world.true_label[uu, ii]))
        users.append(uu)
        items.append(ii)
        labels.append(y)
        stamps.append(np.full(len(uu), r))
    d = Dataset.from_arrays(n_u, n_i, np.concatenate(users), np.concatenate(items),
                            np.concatenate(labels), np.concatenate(stamps), IMPLICIT)
    return (d, stats, models) if return_models else (d, stats)


def true_label_testset(world: SynthWorld, split: Split | Dataset):
    """True positives per user minus the user's observed train positives.

    Returns ``(labels, n_excluded)`` where users left with no label are dropped.
    """
    d = split.train if isinstance(split, Split) else split
    mask = world.true_label.astype(bool).copy()
    pos = d.positives_mask()
    mask[d.users[pos], d.items[pos]] = False
    labels, excluded = {}, 0
    for u in range(world.n_users):
        items = np.flatnonzero(mask[u])
        if len(items):
            labels[u] = [int(i) for i in items]
        else:
            excluded += 1
    return labels, excluded


def true_score_model(world: SynthWorld) -> MfModel:
    """An MF model whose scores are the true preferences (ranking upper bound)."""
    return MfModel(world.true_user.copy(), world.true_item.copy())


def save_round_stats(stats: list[RoundStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "fpr", "fnr", "positive_rate"])
        for s in stats:
            w.writerow([s.round, s.false_positive_rate, s.false_negative_rate, s.positive_rate])


def save_world(world: SynthWorld, cfg: SynthConfig, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    world.save(os.path.join(out_dir, "world.npz"))
    with open(os.path.join(out_dir, "synth_config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
