"""Dense Adam over a dict of numpy parameter arrays, plus a row scatter-add kernel."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, beta1, beta2, step_size, inv_bc2, eps):
    for j in range(p.size):
        gj = g[j]
        mj = beta1 * m[j] + (1.0 - beta1) * gj
        vj = beta2 * v[j] + (1.0 - beta2) * gj * gj
        m[j] = mj
        v[j] = vj
        p[j] -= step_size * mj / (np.sqrt(vj * inv_bc2) + eps)


@numba.njit(cache=True, error_model="numpy")
def _decay_kernel(p, m, v, beta1, beta2, step_size, inv_bc2, eps):
    for j in range(p.size):
        mj = beta1 * m[j]
        vj = beta2 * v[j]
        m[j] = mj
        v[j] = vj
        p[j] -= step_size * mj / (np.sqrt(vj * inv_bc2) + eps)


@numba.njit(cache=True, error_model="numpy")
def scatter_rows(out, index, rows):
    """``out[index[b]] += rows[b]`` in batch order (``out`` is zeroed first)."""
    out[:] = 0.0
    for b in range(index.shape[0]):
        r = index[b]
        for j in range(rows.shape[1]):
            out[r, j] += rows[b, j]
    return out


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        for k, p in params.items():
            if not p.flags.c_contiguous or p.dtype != np.float64:
                raise ValueError(f"parameter {k!r} must be a C-contiguous float64 array")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """Update ``self.params`` in place. Missing keys count as zero gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        inv_bc2 = 1.0 / (1.0 - self.beta2 ** self.t)
        step_size = self.lr / bc1
        for k, p in self.params.items():
            m, v = self.m[k].reshape(-1), self.v[k].reshape(-1)
            g = grads.get(k)
            if g is None:
                _decay_kernel(p.reshape(-1), m, v, self.beta1, self.beta2, step_size, inv_bc2, self.eps)
            else:
                _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                             m, v, self.beta1, self.beta2, step_size, inv_bc2, self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


class DivergenceError(FloatingPointError):
    """A training loss became non-finite."""
