"""Matrix factorization backbone and the confounder-aware score algebra."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import EXPLICIT, IMPLICIT

COMPOSITIONS = ("literal", "additive")


@dataclass
class MfModel:
    W: np.ndarray  # n_users x d
    V: np.ndarray  # n_items x d

    @classmethod
    def init(cls, n_users: int, n_items: int, d: int = 64, seed: int | np.random.Generator = 0,
             std: float = 0.01) -> "MfModel":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (n_users, d)), rng.normal(0.0, std, (n_items, d)))

    @property
    def n_users(self) -> int:
        return self.W.shape[0]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "MfModel":
        return MfModel(self.W.copy(), self.V.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "V": self.V}

    def all_scores(self) -> np.ndarray:
        return self.W @ self.V.T

    def save(self, path, meta: dict | None = None) -> None:
        header = {"n_users": self.n_users, "n_items": self.n_items, "d": self.d, **(meta or {})}
        with open(path, "wb") as fh:
            np.savez(fh, header=json.dumps(header), W=self.W, V=self.V)

    @classmethod
    def load(cls, path) -> "MfModel":
        with np.load(path) as z:
            return cls(z["W"].copy(), z["V"].copy())


@dataclass
class ScoreBundle:
    score: float
    score_bias_u: float
    score_bias_i: float
    score_bias: float
    feedback_kind: str


def _check_ids(m: MfModel, u, i):
    if not (0 <= u < m.n_users) or not (0 <= i < m.n_items):
        raise IndexError(f"(user={u}, item={i}) outside {m.n_users}x{m.n_items}")


def score(m: MfModel, u: int, i: int) -> float:
    _check_ids(m, u, i)
    return float(m.W[u] @ m.V[i])


def _dot(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


def score_bias_user(r_u, v_i) -> float:
    """User-side confounder score r_u . v_i."""
    return _dot(r_u, v_i)


def score_bias_item(r_i, w_u) -> float:
    """Item-side confounder score r_i . w_u."""
    return _dot(r_i, w_u)


def compose_bias(s, sb_u, sb_i, kind: str, composition: str = "literal"):
    """Combine the preference score with both confounder scores.

    Explicit feedback adds the three parts. Implicit feedback multiplies them;
    ``composition="additive"`` uses the explicit form for implicit data too.
    Works elementwise on arrays.
    """
    if kind == EXPLICIT or composition == "additive":
        return s + sb_i + sb_u
    if kind != IMPLICIT:
        raise ValueError(f"unknown feedback kind {kind!r}")
    if composition != "literal":
        raise ValueError(f"unknown composition {composition!r}")
    return s * sb_i * sb_u


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def link(t, kind: str):
    return sigmoid(t) if kind == IMPLICIT else t


def predict(m: MfModel, u: int, i: int, kind: str = IMPLICIT) -> float:
    return float(link(score(m, u, i), kind))


def score_bundle(m: MfModel, reps, u: int, i: int, kind: str = IMPLICIT,
                 composition: str = "literal") -> ScoreBundle:
    s = score(m, u, i)
    sb_u = score_bias_user(reps.r_users[u], m.V[i])
    sb_i = score_bias_item(reps.r_items[i], m.W[u])
    return ScoreBundle(s, sb_u, sb_i, float(compose_bias(s, sb_u, sb_i, kind, composition)), kind)
