"""Numpy implementations of the hot kernels, used when the extension is absent."""

from functools import lru_cache

import numpy as np

NEG = -1e30


@lru_cache(maxsize=64)
def _ma_matrix(length: int, kernel: int) -> np.ndarray:
    p = (kernel - 1) // 2
    A = np.zeros((length, length))
    for i in range(length):
        for j in range(i - p, i + p + 1):
            A[i, min(max(j, 0), length - 1)] += 1.0 / kernel
    A.setflags(write=False)
    return A


def moving_average(x: np.ndarray, kernel: int) -> np.ndarray:
    return _ma_matrix(x.shape[0], kernel) @ x


def moving_average_adjoint(g: np.ndarray, kernel: int) -> np.ndarray:
    return _ma_matrix(g.shape[0], kernel).T @ g


def window_bias(tau: np.ndarray, n_queries: int):
    B, T, C = tau.shape
    t = np.arange(T - n_queries, T)
    k = np.arange(T)
    d = t[:, None] - k[None, :]                          # (Q, T)
    tq = np.transpose(tau[:, T - n_queries:, :], (0, 2, 1))  # (B, C, Q)
    frac = tq[..., None] - d + 1.0                       # (B, C, Q, T)
    frac = np.where(d >= 0, frac, 0.0)
    inside = frac > 0.0
    partial = inside & (frac < 1.0)
    bias = np.full(frac.shape, NEG)
    bias[inside & ~partial] = 0.0
    bias[partial] = np.log(frac[partial])
    dbias = np.zeros(frac.shape)
    dbias[partial] = 1.0 / frac[partial]
    return bias, dbias
