"""VAE block with an alpha-weighted decomposed KL, and confounder extraction.

The KL term of the ELBO is split into index-code mutual information, total
correlation and dimension-wise KL. Aggregate-posterior densities are
estimated on the minibatch with importance weights: the datum's own posterior
gets weight ``1/N`` and each of the other ``M - 1`` posteriors
``(N - 1) / (N (M - 1))``, where ``N`` is the dataset size. With ``M == N``
this is the exact mixture over the data.

Gradients are derived by hand; :func:`vae_loss` returns them on request.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import InteractionMatrix
from .optim import Adam, DivergenceError

logger = logging.getLogger(__name__)

LOG2PI = float(np.log(2.0 * np.pi))
LOGVAR_CLAMP = 20.0

PARAM_NAMES = ("We", "be", "Wmu", "bmu", "Wlv", "blv", "Wd", "bd", "Wo", "bo")


@dataclass
class VaeConfig:
    alpha: float = 5.0
    d_z: int = 64
    hidden: int = 200
    lr: float = 1e-3
    epochs: int = 100
    batch: int = 128
    seed: int = 0


@dataclass
class VaeBlock:
    input_dim: int
    hidden_dim: int
    latent_dim: int
    params: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int = 200, latent_dim: int = 64, seed=0) -> "VaeBlock":
        rng = np.random.default_rng(seed)

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, (n_in, n_out))

        p = {
            "We": glorot(input_dim, hidden_dim), "be": np.zeros(hidden_dim),
            "Wmu": glorot(hidden_dim, latent_dim), "bmu": np.zeros(latent_dim),
            "Wlv": glorot(hidden_dim, latent_dim), "blv": np.zeros(latent_dim),
            "Wd": glorot(latent_dim, hidden_dim), "bd": np.zeros(hidden_dim),
            "Wo": glorot(hidden_dim, input_dim), "bo": np.zeros(input_dim),
        }
        return cls(input_dim, hidden_dim, latent_dim, p)

    def save(self, path, meta: dict | None = None) -> None:
        header = {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                  "latent_dim": self.latent_dim, **(meta or {})}
        with open(path, "wb") as fh:
            np.savez(fh, header=json.dumps(header), **self.params)

    @classmethod
    def load(cls, path) -> "VaeBlock":
        with np.load(path) as z:
            h = json.loads(str(z["header"]))
            params = {k: z[k].copy() for k in PARAM_NAMES}
        return cls(h["input_dim"], h["hidden_dim"], h["latent_dim"], params)


@dataclass
class LatentGaussian:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class KlTerms:
    index_code_mi: float
    total_correlation: float
    dimension_kl: float

    def total(self) -> float:
        return self.index_code_mi + self.total_correlation + self.dimension_kl


@dataclass
class ConfounderReps:
    """Per-user and per-item confounder vectors; read-only once built."""

    r_users: np.ndarray
    r_items: np.ndarray

    def __post_init__(self):
        self.r_users = np.array(self.r_users, dtype=np.float64)
        self.r_items = np.array(self.r_items, dtype=np.float64)
        if self.r_users.shape[1] != self.r_items.shape[1]:
            raise ValueError("user and item confounder dims differ")
        if not (np.all(np.isfinite(self.r_users)) and np.all(np.isfinite(self.r_items))):
            raise ValueError("non-finite confounder representation")
        self.r_users.setflags(write=False)
        self.r_items.setflags(write=False)

    @property
    def d(self) -> int:
        return self.r_users.shape[1]

    def save(self, path, meta: dict | None = None) -> None:
        header = {"n_users": self.r_users.shape[0], "n_items": self.r_items.shape[0],
                  "d": self.d, **(meta or {})}
        with open(path, "wb") as fh:
            np.savez(fh, header=json.dumps(header), r_users=self.r_users, r_items=self.r_items)

    @classmethod
    def load(cls, path) -> "ConfounderReps":
        with np.load(path) as z:
            return cls(z["r_users"], z["r_items"])


# ---------------------------------------------------------------------------
# forward pieces


def encode(b: VaeBlock, x) -> LatentGaussian:
    """Posterior parameters for one row (1-d) or a batch of rows (2-d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != b.input_dim:
        raise ValueError(f"input has {x.shape[-1]} columns, block expects {b.input_dim}")
    p = b.params
    h = np.tanh(x @ p["We"] + p["be"])
    mu = h @ p["Wmu"] + p["bmu"]
    logvar = np.clip(h @ p["Wlv"] + p["blv"], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return LatentGaussian(mu, logvar)


def decode(b: VaeBlock, z) -> np.ndarray:
    p = b.params
    return np.tanh(np.asarray(z) @ p["Wd"] + p["bd"]) @ p["Wo"] + p["bo"]


def reparameterize(g: LatentGaussian, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != g.mu.shape[-1]:
        raise ValueError("eps dimension does not match the latent dimension")
    return g.mu + np.exp(0.5 * g.logvar) * eps


def reconstruction_loss(logits, x):
    """Negative Bernoulli log-likelihood summed over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if logits.shape != x.shape:
        raise ValueError("logits and x differ in shape")
    return np.sum(np.logaddexp(0.0, logits) - x * logits, axis=-1)


# ---------------------------------------------------------------------------
# decomposed KL


def _stack(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, LatentGaussian):
        return np.atleast_2d(batch.mu), np.atleast_2d(batch.logvar)
    return np.stack([g.mu for g in batch]), np.stack([g.logvar for g in batch])


def _mix_weights(m: int, n_total: int) -> np.ndarray:
    w = np.full((m, m), (n_total - 1) / (n_total * (m - 1)))
    np.fill_diagonal(w, 1.0 / n_total)
    return w


@functools.lru_cache(maxsize=16)
def _weight_totals(m: int, n_total: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row totals of the mixture weights for the joint (m, m) and per-dim (m, d, m) layouts.

    Each total is reduced from an array with the same shape and memory order as the
    mixture terms it normalizes, so identical components give log q == L bit-for-bit.
    """
    w = _mix_weights(m, n_total)
    joint = np.ascontiguousarray(w * np.ones((m, m))).sum(axis=-1)
    per_dim = np.ascontiguousarray(w[:, None, :] * np.ones((m, d, m))).sum(axis=-1)
    joint.setflags(write=False)
    per_dim.setflags(write=False)
    return joint, per_dim


def _mixture_logpdf(L: np.ndarray, w: np.ndarray, norm: np.ndarray, want_resp: bool = True):
    """Weighted log-mixture over the last axis, divided by the weight total ``norm``.

    Returns the log density and the mixture responsibilities (or None).
    """
    top = L.max(axis=-1, keepdims=True)
    terms = np.exp(L - top)
    terms *= w
    s = terms.sum(axis=-1)
    logq = top[..., 0] + np.log(s) - np.log(norm)
    if not want_resp:
        return logq, None
    terms /= s[..., None]
    return logq, terms


class _KlPieces:
    """Shared intermediates of the minibatch estimator."""

    def __init__(self, mu, logvar, z, n_total):
        m = mu.shape[0]
        if m < 2:
            raise ValueError("the decomposed KL needs a batch of at least 2 posteriors")
        if n_total < m:
            raise ValueError("n_total must be at least the batch size")
        self.mu, self.logvar, self.z = mu, logvar, z
        self.m = m
        self.inv_var = np.exp(-logvar)
        # diff[m, j, n] = z[m, j] - mu[n, j]
        self.diff = z[:, :, None] - mu.T[None, :, :]
        # per-dimension log q(z_m,j | x_n)
        self.L = np.ascontiguousarray(
            -0.5 * (LOG2PI + logvar.T[None, :, :] + self.diff ** 2 * self.inv_var.T[None, :, :]))
        self.S = self.L.sum(axis=1)  # joint log q(z_m | x_n)
        self.w = _mix_weights(m, n_total)
        self.log_qz_x = np.diagonal(self.S).copy()
        norm_joint, norm_dim = _weight_totals(m, int(n_total), mu.shape[1])
        self.log_qz, self.resp = _mixture_logpdf(self.S, self.w, norm_joint)
        self.log_qzj, _ = _mixture_logpdf(self.L, self.w[:, None, :], norm_dim, want_resp=False)
        self.log_pz = (-0.5 * (LOG2PI + z ** 2)).sum(axis=1)

    def terms(self) -> KlTerms:
        sum_qzj = self.log_qzj.sum(axis=1)
        return KlTerms(
            float(np.mean(self.log_qz_x - self.log_qz)),
            float(np.mean(self.log_qz - sum_qzj)),
            float(np.mean(sum_qzj - self.log_pz)),
        )

    def grads(self, alpha: float):
        """Gradient of alpha*mi + tc + dim_kl with respect to (z, mu, logvar), z held free.

        The marginal terms cancel in the sum, leaving
        alpha*E[log q(z|x)] + (1 - alpha)*E[log q(z)] - E[log p(z)].
        """
        m = self.m
        G = ((1.0 - alpha) / m) * self.resp
        G[np.diag_indices(m)] += alpha / m
        E = self.diff * self.inv_var.T[None, :, :]  # (m, j, n)
        dz = -np.einsum("mn,mjn->mj", G, E) + self.z / m
        dmu = np.einsum("mn,mjn->nj", G, E)
        dlv = np.einsum("mn,mjn->nj", G, -0.5 + 0.5 * E * self.diff)
        return dz, dmu, dlv


def kl_decompose(batch, z_samples, n_total: int) -> KlTerms:
    """Minibatch estimates of the three KL parts for posteriors ``batch`` at samples ``z_samples``."""
    mu, logvar = _stack(batch)
    z = np.atleast_2d(np.asarray(z_samples, dtype=np.float64))
    return _KlPieces(mu, logvar, z, n_total).terms()


def kl_alpha(t: KlTerms, alpha: float) -> float:
    return alpha * t.index_code_mi + t.total_correlation + t.dimension_kl


def analytic_kl(g: LatentGaussian) -> np.ndarray:
    """Closed-form KL(q(z|x) || N(0, I)) per row."""
    mu, lv = np.atleast_2d(g.mu), np.atleast_2d(g.logvar)
    return 0.5 * np.sum(mu ** 2 + np.exp(lv) - 1.0 - lv, axis=1)


# ---------------------------------------------------------------------------
# loss + gradient


def vae_loss(b: VaeBlock, x, alpha: float, eps, n_total: int, return_grads: bool = False):
    """Mean reconstruction loss plus the alpha-weighted KL over a batch of rows.

    ``eps`` is the standard-normal noise (batch x latent_dim). Returns the loss,
    or ``(loss, grads, info)`` when ``return_grads`` is set.
    """
    p = b.params
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    m = x.shape[0]
    h = np.tanh(x @ p["We"] + p["be"])
    mu = h @ p["Wmu"] + p["bmu"]
    lv_raw = h @ p["Wlv"] + p["blv"]
    lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    h2 = np.tanh(z @ p["Wd"] + p["bd"])
    logits = h2 @ p["Wo"] + p["bo"]
    recon = float(np.mean(reconstruction_loss(logits, x)))

    pieces = _KlPieces(mu, lv, z, n_total)
    terms = pieces.terms()
    loss = recon + kl_alpha(terms, alpha)
    if not return_grads:
        return loss

    g = {}
    dlogits = (0.5 * (1.0 + np.tanh(0.5 * logits)) - x) / m
    g["Wo"] = h2.T @ dlogits
    g["bo"] = dlogits.sum(axis=0)
    da2 = (dlogits @ p["Wo"].T) * (1.0 - h2 ** 2)
    g["Wd"] = z.T @ da2
    g["bd"] = da2.sum(axis=0)

    dz, dmu, dlv = pieces.grads(alpha)
    dz += da2 @ p["Wd"].T
    dmu += dz
    dlv += dz * 0.5 * (z - mu)
    dlv *= (lv_raw > -LOGVAR_CLAMP) & (lv_raw < LOGVAR_CLAMP)

    g["Wmu"] = h.T @ dmu
    g["bmu"] = dmu.sum(axis=0)
    g["Wlv"] = h.T @ dlv
    g["blv"] = dlv.sum(axis=0)
    da = (dmu @ p["Wmu"].T + dlv @ p["Wlv"].T) * (1.0 - h ** 2)
    g["We"] = x.T @ da
    g["be"] = da.sum(axis=0)
    return loss, g, {"recon": recon, "terms": terms}


# ---------------------------------------------------------------------------
# training


def _streams(seed: int):
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(noise)


def train_vae(matrix: InteractionMatrix | np.ndarray, cfg: VaeConfig | None = None,
              return_log: bool = False):
    """Fit a :class:`VaeBlock` to the rows of ``matrix`` with Adam."""
    cfg = cfg or VaeConfig()
    rows = matrix.rows if isinstance(matrix, InteractionMatrix) else np.asarray(matrix, float)
    n, dim = rows.shape
    if n == 0 or dim == 0:
        raise ValueError("empty interaction matrix")
    if n < 2:
        raise ValueError("need at least two rows to train the decomposed VAE")
    init_rng, shuffle_rng, noise_rng = _streams(cfg.seed)
    block = VaeBlock.init(dim, cfg.hidden, cfg.d_z, init_rng)
    opt = Adam(block.params, lr=cfg.lr)
    batch = max(2, min(cfg.batch, n))
    log = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        totals = np.zeros(5)
        count = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if len(idx) < 2:  # fold a lone trailing row into the previous batch
                idx = order[max(0, start - batch + 1):start + 1]
            eps = noise_rng.standard_normal((len(idx), cfg.d_z))
            loss, grads, info = vae_loss(block, rows[idx], cfg.alpha, eps, n, return_grads=True)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"VAE loss became {loss} at epoch {epoch}; recon={info['recon']}, "
                    f"terms={info['terms']}")
            opt.step(grads)
            t = info["terms"]
            totals += len(idx) * np.array([loss, info["recon"], t.index_code_mi,
                                           t.total_correlation, t.dimension_kl])
            count += len(idx)
        totals /= count
        log.append(dict(zip(("epoch", "loss", "recon", "index_code_mi", "total_correlation",
                             "dimension_kl"), (epoch, *map(float, totals)))))
        logger.debug("vae epoch %d loss %.4f", epoch, totals[0])
    return (block, log) if return_log else block


def latent_terms(b: VaeBlock, matrix, seed: int = 0, batch: int | None = None) -> KlTerms:
    """Evaluate the KL parts of a trained block over all rows, averaged over batches."""
    rows = matrix.rows if isinstance(matrix, InteractionMatrix) else np.asarray(matrix, float)
    n = rows.shape[0]
    batch = n if batch is None else batch
    rng = np.random.default_rng(seed)
    acc, total = np.zeros(3), 0
    for start in range(0, n, batch):
        x = rows[start:start + batch]
        if len(x) < 2:
            continue
        g = encode(b, x)
        z = reparameterize(g, rng.standard_normal(g.mu.shape))
        t = kl_decompose(g, z, n)
        acc += len(x) * np.array([t.index_code_mi, t.total_correlation, t.dimension_kl])
        total += len(x)
    return KlTerms(*(acc / total))


def extract_confounders(user_block: VaeBlock, item_block: VaeBlock, user_matrix, item_matrix,
                        d: int | None = None) -> ConfounderReps:
    """Posterior means of every user row and every item row; no sampling."""
    for blk in (user_block, item_block):
        if d is not None and blk.latent_dim != d:
            raise ValueError(f"latent dim {blk.latent_dim} does not match embedding dim {d}")
    ur = user_matrix.rows if isinstance(user_matrix, InteractionMatrix) else user_matrix
    ir = item_matrix.rows if isinstance(item_matrix, InteractionMatrix) else item_matrix
    return ConfounderReps(encode(user_block, ur).mu, encode(item_block, ir).mu)


def config_dict(cfg: VaeConfig) -> dict:
    return asdict(cfg)
