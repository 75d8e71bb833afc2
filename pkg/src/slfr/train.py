"""Stage-2 training: preference fit, confounder-aware fit, and their weighted sum.

Losses take a batch ``(users, items, labels)`` of aligned arrays and return
the scalar loss, or ``(loss, grads)`` with dense gradients for ``W`` and ``V``
when ``return_grads`` is set. Confounder representations are constants here.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .data import EXPLICIT, IMPLICIT, Split, sample_negatives
from .evaluation import metrics_from_topk, relevance_matrix, topk_matrix, train_mask
from .model import COMPOSITIONS, MfModel
from .optim import Adam, DivergenceError
from .vae import ConfounderReps

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_normal", "loss_bias", "loss_total", "valid_recall@10",
               "valid_ndcg@10", "seconds")


@dataclass
class TrainConfig:
    gamma: float = 0.0
    lr: float = 1e-3
    l2: float = 1e-6
    d: int = 64
    epochs: int = 500
    patience: int = 10
    neg_ratio: int = 4
    batch: int = 1024
    seed: int = 0
    feedback_kind: str = IMPLICIT
    composition: str = "literal"
    l2_full: bool = False
    ips_eta: float = 0.0
    init_std: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}")
        if self.feedback_kind not in (EXPLICIT, IMPLICIT):
            raise ValueError(f"unknown feedback kind {self.feedback_kind!r}")


# ---------------------------------------------------------------------------
# losses


@numba.njit(cache=True, error_model="numpy", inline="always")
def _crit(t, y, implicit):
    """Per-sample loss and d loss / d t."""
    if implicit:
        e = np.exp(-abs(t))
        sig = 1.0 / (1.0 + e) if t >= 0.0 else e / (1.0 + e)
        return max(t, 0.0) + np.log1p(e) - y * t, sig - y
    return (t - y) * (t - y), 2.0 * (t - y)


@numba.njit(cache=True, error_model="numpy", inline="always")
def _row_l2(A, r, seen, grad, k, want_grad):
    """Sum of squares of row ``r`` (first visit only); adds ``k * A[r]`` to ``grad``."""
    if seen[r]:
        return 0.0
    seen[r] = True
    d = A.shape[1]
    a0 = a1 = a2 = a3 = 0.0
    for j in range(0, d - d % 4, 4):
        a0 += A[r, j] * A[r, j]
        a1 += A[r, j + 1] * A[r, j + 1]
        a2 += A[r, j + 2] * A[r, j + 2]
        a3 += A[r, j + 3] * A[r, j + 3]
    for j in range(d - d % 4, d):
        a0 += A[r, j] * A[r, j]
    if want_grad:
        for j in range(d):
            grad[r, j] += k * A[r, j]
    return (a0 + a1) + (a2 + a3)


@numba.njit(cache=True, error_model="numpy")
def _batch_kernel(W, V, users, items, y, weights, RU, RI, c_normal, c_bias, use_bias,
                  implicit, literal, l2, gW, gV, want_grad):
    """Forward and backward of both criteria over one batch.

    Gradients are accumulated as ``c_normal * d(loss_normal) + c_bias * d(loss_bias)``
    in batch order; L2 on touched rows is part of loss_normal.
    """
    B = users.shape[0]
    d = W.shape[1]
    if want_grad:
        gW[:] = 0.0
        gV[:] = 0.0
    ln = 0.0
    lb = 0.0
    for b in range(B):
        u = users[b]
        i = items[b]
        s = 0.0
        for j in range(d):
            s += W[u, j] * V[i, j]
        loss, dt = _crit(s, y[b], implicit)
        ln += loss * weights[b]
        cn = c_normal * dt * weights[b] / B
        if use_bias:
            sbu = 0.0
            sbi = 0.0
            for j in range(d):
                sbu += RU[u, j] * V[i, j]
                sbi += RI[i, j] * W[u, j]
            if literal:
                t = s * sbi * sbu
            else:
                t = s + sbi + sbu
            lossb, dtb = _crit(t, y[b], implicit)
            lb += lossb
            cb = c_bias * dtb / B
        if want_grad:
            if use_bias and literal:
                ab = sbi * sbu
                sb = s * sbu
                sa = s * sbi
                for j in range(d):
                    wj = W[u, j]
                    vj = V[i, j]
                    gW[u, j] += cn * vj + cb * (ab * vj + sb * RI[i, j])
                    gV[i, j] += cn * wj + cb * (ab * wj + sa * RU[u, j])
            elif use_bias:
                for j in range(d):
                    wj = W[u, j]
                    vj = V[i, j]
                    gW[u, j] += cn * vj + cb * (vj + RI[i, j])
                    gV[i, j] += cn * wj + cb * (wj + RU[u, j])
            else:
                for j in range(d):
                    wj = W[u, j]
                    gW[u, j] += cn * V[i, j]
                    gV[i, j] += cn * wj
    reg = 0.0
    if l2 != 0.0:
        seen_u = np.zeros(W.shape[0], dtype=np.bool_)
        seen_i = np.zeros(V.shape[0], dtype=np.bool_)
        k = c_normal * 2.0 * l2
        for b in range(B):
            reg += _row_l2(W, users[b], seen_u, gW, k, want_grad)
            reg += _row_l2(V, items[b], seen_i, gV, k, want_grad)
    return ln / B + l2 * reg, lb / B


_EMPTY = np.zeros((1, 1))


def _run(m: MfModel, batch, kind, weights, reps, c_normal, c_bias, use_bias, composition, l2,
         want_grad):
    users, items, y = batch
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if len(users) == 0:
        raise ValueError("empty batch")
    w = np.ones(len(users)) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    if use_bias:
        if reps.d != m.d:
            raise ValueError(f"confounder dim {reps.d} != embedding dim {m.d}")
        if users.max() >= reps.r_users.shape[0] or items.max() >= reps.r_items.shape[0]:
            raise IndexError("batch references a user or item without a confounder row")
        RU, RI = reps.r_users, reps.r_items
    else:
        RU = RI = _EMPTY
    gW = np.empty_like(m.W) if want_grad else _EMPTY
    gV = np.empty_like(m.V) if want_grad else _EMPTY
    ln, lb = _batch_kernel(m.W, m.V, users, items, y, w, RU, RI, c_normal, c_bias, use_bias,
                           kind == IMPLICIT, kind == IMPLICIT and composition == "literal", l2,
                           gW, gV, want_grad)
    return ln, lb, gW, gV


def _full_l2(m: MfModel, l2):
    return l2 * (np.sum(m.W ** 2) + np.sum(m.V ** 2)), 2.0 * l2 * m.W, 2.0 * l2 * m.V


def loss_normal(m: MfModel, batch, kind: str = IMPLICIT, l2: float = 0.0, weights=None,
                l2_full: bool = False, return_grads: bool = False):
    """Mean BCE on sigmoid(w.v) (implicit) or mean squared error (explicit), plus L2.

    L2 covers the embedding rows touched by the batch, or every row with ``l2_full``.
    """
    ln, _, gW, gV = _run(m, batch, kind, weights, None, 1.0, 0.0, False, "literal",
                         0.0 if l2_full else l2, return_grads)
    if l2_full and l2:
        reg, rW, rV = _full_l2(m, l2)
        ln += reg
        if return_grads:
            gW += rW
            gV += rV
    if not np.isfinite(ln):
        raise DivergenceError(f"loss_normal is {ln}")
    return (ln, {"W": gW, "V": gV}) if return_grads else ln


def loss_bias(m: MfModel, reps: ConfounderReps, batch, kind: str = IMPLICIT,
              composition: str = "literal", return_grads: bool = False):
    """Same criterion as :func:`loss_normal` on the confounder-composed score, no L2.

    Implicit: BCE(sigmoid(s * sb_i * sb_u), y); explicit: (s + sb_i + sb_u - y)^2,
    with s = w.v, sb_u = r_u.v, sb_i = r_i.w.
    """
    if composition not in COMPOSITIONS:
        raise ValueError(f"unknown composition {composition!r}")
    _, lb, gW, gV = _run(m, batch, kind, None, reps, 0.0, 1.0, True, composition, 0.0,
                         return_grads)
    if not np.isfinite(lb):
        raise DivergenceError(f"loss_bias is {lb}")
    return (lb, {"W": gW, "V": gV}) if return_grads else lb


def loss_slfr(m: MfModel, reps: ConfounderReps | None, batch, cfg: TrainConfig, weights=None,
              return_grads: bool = False):
    """``loss_normal + gamma * loss_bias``; ``(loss, grads, parts)`` with ``return_grads``."""
    use_bias = cfg.gamma > 0.0
    if use_bias and reps is None:
        raise ValueError("gamma > 0 requires confounder representations")
    ln, lb, gW, gV = _run(m, batch, cfg.feedback_kind, weights, reps, 1.0, cfg.gamma, use_bias,
                          cfg.composition, 0.0 if cfg.l2_full else cfg.l2, return_grads)
    if cfg.l2_full and cfg.l2:
        reg, rW, rV = _full_l2(m, cfg.l2)
        ln += reg
        if return_grads:
            gW += rW
            gV += rV
    total = ln + cfg.gamma * lb
    if not np.isfinite(total):
        raise DivergenceError(f"loss_slfr is {total} (normal {ln}, bias {lb})")
    if not return_grads:
        return total
    return total, {"W": gW, "V": gV}, {"loss_normal": ln, "loss_bias": lb}


# ---------------------------------------------------------------------------
# IPS baseline


def item_popularity(split: Split) -> np.ndarray:
    """Train-positive counts per item with add-one smoothing."""
    pos = split.train.positives_mask()
    return np.bincount(split.train.items[pos], minlength=split.n_items) + 1.0


def ips_reweight(items, item_popularity, eta: float, clip: float = 100.0) -> np.ndarray:
    """Inverse-propensity weights ``(pop / max_pop) ** -eta`` clipped to ``[1, clip]``."""
    pop = np.asarray(item_popularity, dtype=float)
    if np.any(pop < 1):
        raise ValueError("popularity counts must be >= 1 (add-one smoothed)")
    w = (pop[np.asarray(items)] / pop.max()) ** (-eta)
    return np.clip(w, 1.0, clip)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: MfModel
    log: list[dict]
    best_epoch: int
    best_valid_ndcg: float
    config: TrainConfig

    def save_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.log:
                w.writerow(row)

    def save(self, prefix) -> None:
        """Write ``<prefix>.npz``, ``<prefix>.config.json`` and ``<prefix>.log.csv``."""
        self.model.save(f"{prefix}.npz", {"best_epoch": self.best_epoch,
                                           "seed": self.config.seed})
        with open(f"{prefix}.config.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self.config), fh, indent=2, sort_keys=True)
        self.save_log(f"{prefix}.log.csv")


def _explicit_triples(split: Split):
    d = split.train
    return d.users.copy(), d.items.copy(), d.values.copy()


def _valid_metrics(m: MfModel, split: Split, users, targets, mask):
    if not len(users):
        return 0.0, 0.0
    top = topk_matrix(m.W[users] @ m.V.T, mask, 10)
    r = metrics_from_topk(top, targets, (10,))[10]
    return r["recall"], r["ndcg"]


def train_slfr(split: Split, reps: ConfounderReps | None = None, cfg: TrainConfig | None = None,
               epoch_callback=None) -> TrainResult:
    """Minibatch Adam on the combined loss with early stopping on validation NDCG@10.

    Three independent random streams drive initialization, negative sampling
    and batch shuffling. The returned model is the best-validation checkpoint.
    """
    cfg = cfg or TrainConfig()
    if cfg.gamma > 0 and reps is None:
        raise ValueError("gamma > 0 requires confounder representations")
    if reps is not None and cfg.gamma > 0 and reps.d != cfg.d:
        raise ValueError(f"confounder dim {reps.d} != embedding dim {cfg.d}")
    init_ss, sample_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = MfModel.init(split.n_users, split.n_items, cfg.d, np.random.default_rng(init_ss),
                         cfg.init_std)
    sample_seed = int(sample_ss.generate_state(1)[0])
    shuffle_rng = np.random.default_rng(shuffle_ss)
    opt = Adam(model.params(), lr=cfg.lr)

    positives = split.train_positives()
    pop = item_popularity(split) if cfg.ips_eta > 0 else None
    valid_users = np.array(sorted(split.valid), dtype=np.int64)
    valid_targets = relevance_matrix([split.valid[int(u)] for u in valid_users], split.n_items)
    vmask = train_mask(split)[valid_users]

    best = (-1.0, -1, model.copy())
    log = []
    since_best = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.feedback_kind == IMPLICIT:
            users, items, labels = sample_negatives(split, cfg.neg_ratio, sample_seed, epoch, positives)
        else:
            users, items, labels = _explicit_triples(split)
        order = shuffle_rng.permutation(len(users))
        users, items, labels = users[order], items[order], labels[order]
        sums = np.zeros(3)
        for start in range(0, len(users), cfg.batch):
            sl = slice(start, start + cfg.batch)
            batch = (users[sl], items[sl], labels[sl])
            weights = ips_reweight(batch[1], pop, cfg.ips_eta) if pop is not None else None
            try:
                total, grads, parts = loss_slfr(model, reps, batch, cfg, weights, return_grads=True)
            except DivergenceError as exc:
                err = DivergenceError(f"{exc} at epoch {epoch}")
                err.model = best[2]  # last good checkpoint
                raise err from exc
            opt.step(grads)
            n = len(batch[0])
            sums += n * np.array([parts["loss_normal"], parts["loss_bias"], total])
        sums /= max(1, len(users))
        recall, ndcg = _valid_metrics(model, split, valid_users, valid_targets, vmask)
        row = {"epoch": epoch, "loss_normal": sums[0], "loss_bias": sums[1], "loss_total": sums[2],
               "valid_recall@10": recall, "valid_ndcg@10": ndcg,
               "seconds": time.perf_counter() - t0}
        log.append(row)
        if epoch_callback is not None:
            epoch_callback(model, row)
        if ndcg > best[0]:
            best = (ndcg, epoch, model.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    logger.info("train_slfr gamma=%g: best epoch %d, valid ndcg@10 %.4f", cfg.gamma, best[1], best[0])
    return TrainResult(best[2], log, best[1], best[0], cfg)


# ---------------------------------------------------------------------------
# numerics QA


def gradient_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray] | None = None,
                   step: float = 1e-4, n_coords: int = 200, seed: int = 0,
                   floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` evaluates the loss at the current contents of ``params``;
    ``grads`` holds the analytic gradient at that point. Coordinates are
    sampled at random across all parameters (all of them if there are
    fewer than ``n_coords``). Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if grads is None:
        out = loss_fn(return_grads=True)
        grads = out[1]
    rng = np.random.default_rng(seed)
    coords = [(k, idx) for k, p in params.items() for idx in np.ndindex(p.shape)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p[idx]
        p[idx] = orig + step
        lp = _scalar(loss_fn())
        p[idx] = orig - step
        lm = _scalar(loss_fn())
        p[idx] = orig
        num = (lp - lm) / (2.0 * step)
        ana = float(grads[k][idx])
        denom = max(abs(num), abs(ana), floor)
        worst = max(worst, abs(num - ana) / denom)
    return worst


def _scalar(out) -> float:
    return float(out[0] if isinstance(out, tuple) else out)
