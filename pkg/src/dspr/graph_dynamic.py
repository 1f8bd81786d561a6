"""Dynamic branch: per-step graphs, adaptive receptive fields and masked attention.

Dynamic adjacency rows are *receivers*: ``A_d[i, j]`` is the weight node
``i`` takes from node ``j`` (``H_sp = relu(A_d H W_d + b_d)``), i.e. the
transpose of the prior's ``[src, dst]`` orientation.

Receptive-field window. For query step ``t`` and channel ``c`` the keys
``k`` with lag ``d = t - k`` in ``[0, ceil(tau)]`` are visible; the oldest
visible key is down-weighted by its fractional coverage
``tau - d + 1 in (0, 1]`` (an additive ``log`` bias). For integer ``tau``
this is exactly the hard window ``t - tau <= k <= t``; between integers it
varies continuously, which is what lets ``tau`` receive gradient.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Params, linear, uniform, zeros
from .tensor import NEG_INF, Tensor


class DynamicBranch:
    def __init__(self, n_nodes: int, n_time_feats: int, d_model: int, rng: np.random.Generator,
                 n_heads: int = 4, tau_max: int = 20, adaptive: bool = True):
        if d_model % 2:
            raise ConfigError(f"d_model must be even, got {d_model}")
        if d_model % n_heads:
            raise ConfigError(f"{n_heads} heads do not divide d_model={d_model}")
        if tau_max < 1:
            raise ConfigError("tau_max must be >= 1")
        C, D, F = n_nodes, d_model, n_time_feats
        self.n_nodes, self.d_model, self.n_heads = C, D, n_heads
        self.tau_max = int(tau_max)
        self.adaptive = adaptive
        p = self.params = Params()
        p.add("emb.V", uniform(rng, (C, D), 1, ""))
        p.add("emb.W", uniform(rng, (C + F, D), C + F, ""))
        p.add("emb.b", uniform(rng, (C, D), 1, ""))
        if adaptive:
            p.add("W_tau", uniform(rng, (D, 1), D, ""))
        p.add("W_d", uniform(rng, (D, D // 2), D, ""))
        p.add("b_d", zeros((D // 2,), ""))
        p.add("W_g", uniform(rng, (D, D // 2), D, ""))
        for name in ("W_q", "W_k", "W_v"):
            p.add(name, uniform(rng, (D, D), D, ""))
        p.add("W_o", uniform(rng, (D, D // 2), D, ""))

    def embed(self, x, time_feats, A_mix=None) -> Tensor:
        """x: (B, L, C), time_feats: (B, L, F) -> node features (B, L, C, D).

        ``h[t, c] = x[t, c] V[c] + sum_j A_mix[j, c] x[t, j] W[j] + m_t W_m + b[c]``:
        each node sees the other variables through the mixing graph (the
        static adjacency in the full model; all-ones when ``A_mix`` is None).
        """
        x, tf = T.as_tensor(x), T.as_tensor(time_feats)
        p, D, C = self.params, self.d_model, self.n_nodes
        if x.shape[-1] != C:
            raise ShapeError(f"expected {C} channels, got {x.shape}")
        W = p["emb.W"]
        own = T.expand(x, -1, D) * p["emb.V"]
        if A_mix is None:
            cross = T.expand(linear(x, W[:C]), -2, C)
        else:
            A_mix = T.as_tensor(A_mix)
            if A_mix.shape != (C, C):
                raise ShapeError(f"mixing graph {A_mix.shape} for {C} nodes")
            per_src = T.expand(x, -1, D) * W[:C]
            cross = T.swapaxes(T.swapaxes(per_src, -1, -2) @ A_mix, -1, -2)
        calendar = T.expand(linear(tf, W[C:]), -2, C)
        return own + cross + calendar + p["emb.b"]


def _diag_mask(C: int, lead: tuple) -> np.ndarray:
    m = np.zeros((C, C))
    np.fill_diagonal(m, NEG_INF)
    return np.broadcast_to(m, lead + (C, C))


def dynamic_adjacency(h_t) -> Tensor:
    """softmax(h h^T / sqrt(D) + M_diag) over rows; (..., C, D) -> (..., C, C)."""
    h_t = T.as_tensor(h_t)
    C, D = h_t.shape[-2], h_t.shape[-1]
    if C < 2:
        raise ShapeError("dynamic adjacency needs at least two nodes")
    scores = (h_t @ T.swapaxes(h_t, -1, -2)) * (1.0 / np.sqrt(D))
    return T.softmax(scores, _diag_mask(C, h_t.shape[:-2]))


def adaptive_tau(h, state: DynamicBranch) -> Tensor:
    """tau = 1 + (tau_max - 1) * sigmoid(h W_tau); (..., T, C, D) -> (..., T, C)."""
    h = T.as_tensor(h)
    if not state.adaptive:
        return Tensor(np.full(h.shape[:-1], float(state.tau_max)))
    s = T.sigmoid(h @ state.params["W_tau"])
    tau = 1.0 + (state.tau_max - 1.0) * s
    return tau.reshape(h.shape[:-1])


def window_bias(tau, n_queries: int | None = None) -> Tensor:
    """Additive attention bias for the last ``n_queries`` steps.

    tau: (B, T, C) or (T, C). Returns (B, C, Q, T) or (C, Q, T); masked keys
    hold the ``NEG_INF`` sentinel.
    """
    tau = T.as_tensor(tau)
    batched = tau.ndim == 3
    tau_b = tau if batched else tau.reshape(1, *tau.shape)
    B, Tn, C = tau_b.shape
    Q = Tn if n_queries is None else int(n_queries)
    if not 1 <= Q <= Tn:
        raise ShapeError(f"n_queries={Q} outside [1, {Tn}]")
    bias, dbias = kernels.window_bias(np.ascontiguousarray(tau_b.data), Q)

    def vjp(g):
        gt = np.zeros((B, Tn, C))
        gt[:, Tn - Q:, :] = np.transpose((g * dbias).sum(axis=-1), (0, 2, 1))
        return (gt,)

    out = T._make("window_bias", bias, (tau_b,), vjp)
    return out if batched else out.reshape(C, Q, Tn)


def window_mask(tau) -> np.ndarray:
    """Boolean visibility mask ``[t, k, c]`` for an unbatched (T, C) tau."""
    tau = np.asarray(tau.data if isinstance(tau, Tensor) else tau, dtype=np.float64)
    if tau.ndim != 2:
        raise ShapeError(f"window_mask expects (T, C), got {tau.shape}")
    bias, _ = kernels.window_bias(np.ascontiguousarray(tau[None]), tau.shape[0])
    return np.transpose(bias[0] > NEG_INF / 2, (1, 2, 0))


def dynamic_gcn(h_t, A_d, state: DynamicBranch) -> Tensor:
    """relu(A_d H W_d + b_d): (..., C, D) -> (..., C, D/2)."""
    h_t, A_d = T.as_tensor(h_t), T.as_tensor(A_d)
    p = state.params
    return T.relu(linear(A_d @ h_t, p["W_d"], p["b_d"]))


def masked_temporal_attention(h, bias, state: DynamicBranch, return_weights: bool = False):
    """Per-channel multi-head attention over time, restricted by ``bias``.

    h: (B, T, C, D); bias: (B, C, Q, T) for the last Q query steps.
    Returns (B, Q, C, D/2) (and the (B, C, heads, Q, T) weights if asked).
    """
    h, bias = T.as_tensor(h), T.as_tensor(bias)
    p = state.params
    B, Tn, C, D = h.shape
    nh = state.n_heads
    dh = D // nh
    Q = bias.shape[2]
    if bias.shape != (B, C, Q, Tn):
        raise ShapeError(f"mask {bias.shape} does not match features {h.shape}")
    hc = T.transpose(h, (0, 2, 1, 3))                      # (B, C, T, D)
    hq = hc if Q == Tn else hc[:, :, Tn - Q:, :]

    def heads(x, n):
        return T.transpose(x.reshape(B, C, n, nh, dh), (0, 1, 3, 2, 4))

    q = heads(hq @ p["W_q"], Q)
    k = heads(hc @ p["W_k"], Tn)
    v = heads(hc @ p["W_v"], Tn)
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    att = T.softmax(scores, T.expand(bias, 2, nh))
    ctx = T.transpose(att @ v, (0, 1, 3, 2, 4)).reshape(B, C, Q, D)
    out = T.transpose(ctx @ p["W_o"], (0, 2, 1, 3))
    return (out, att) if return_weights else out


def gated_fuse(h_t, h_sp, h_tmp, state: DynamicBranch) -> Tensor:
    """g = sigmoid(h W_g); g * h_sp + (1 - g) * h_tmp."""
    g = T.sigmoid(T.as_tensor(h_t) @ state.params["W_g"])
    return g * h_sp + (1.0 - g) * h_tmp
