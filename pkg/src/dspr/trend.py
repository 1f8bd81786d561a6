"""Statistical trend stream: a compact multi-scale decomposition mixer.

The stream reads only the target channel (plus calendar features) so it
captures temporal inertia and leaves cross-variable effects to the residual
stream. Each block decomposes every scale into trend and seasonal parts,
mixes seasonal parts bottom-up (fine to coarse) and trend parts top-down
(coarse to fine) with two-layer MLPs over the time axis, then applies a
channel feed-forward with a residual connection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import Params, linear, uniform, zeros
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class TrendConfig:
    lookback: int
    horizon: int
    n_vars: int
    target: int = 0
    n_time_feats: int = 4
    d_model: int = 64
    depth: int = 4
    downsample_ratio: int = 2
    n_scales: int = 3
    ma_kernel: int = 25

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if self.downsample_ratio < 2:
            raise ContractError("downsample_ratio must be >= 2")
        if self.ma_kernel < 1 or self.ma_kernel % 2 == 0:
            raise ContractError(f"ma_kernel must be odd, got {self.ma_kernel}")
        if not 0 <= self.target < self.n_vars:
            raise ContractError(f"target index {self.target} outside {self.n_vars} variables")
        span = self.downsample_ratio ** (self.n_scales - 1)
        if self.lookback % span:
            raise ContractError(
                f"lookback {self.lookback} must be divisible by {span} for {self.n_scales} scales"
            )

    @property
    def scale_lengths(self) -> list[int]:
        return [self.lookback // self.downsample_ratio**m for m in range(self.n_scales)]

    def to_dict(self) -> dict:
        return asdict(self)


def moving_average_decompose(x, kernel: int, axis: int = -2):
    """Split ``x`` into (trend, seasonal) with ``trend + seasonal == x``."""
    x = T.as_tensor(x)
    trend = T.moving_average(x, kernel, axis=axis)
    return trend, x - trend


def _time_mlp(x: Tensor, W1, b1, W2, b2) -> Tensor:
    # x: (B, L_in, d) -> (B, L_out, d), mixing along time
    h = T.swapaxes(x, -1, -2)
    h = T.relu(linear(h, W1, b1))
    h = linear(h, W2, b2)
    return T.swapaxes(h, -1, -2)


class TrendStream:
    def __init__(self, cfg: TrendConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = Params()
        p, d, F = self.params, cfg.d_model, cfg.n_time_feats
        Ls = cfg.scale_lengths
        p.add("embed.W", uniform(rng, (1 + F, d), 1 + F, ""))
        p.add("embed.b", uniform(rng, (d,), 1 + F, ""))
        for blk in range(cfg.depth):
            for m in range(1, cfg.n_scales):
                a, b = Ls[m - 1], Ls[m]
                p.add(f"b{blk}.up{m}.W1", uniform(rng, (a, b), a, ""))
                p.add(f"b{blk}.up{m}.b1", uniform(rng, (b,), a, ""))
                p.add(f"b{blk}.up{m}.W2", uniform(rng, (b, b), b, ""))
                p.add(f"b{blk}.up{m}.b2", uniform(rng, (b,), b, ""))
                p.add(f"b{blk}.down{m}.W1", uniform(rng, (b, a), b, ""))
                p.add(f"b{blk}.down{m}.b1", uniform(rng, (a,), b, ""))
                p.add(f"b{blk}.down{m}.W2", uniform(rng, (a, a), a, ""))
                p.add(f"b{blk}.down{m}.b2", uniform(rng, (a,), a, ""))
            p.add(f"b{blk}.ffn.W1", uniform(rng, (d, d), d, ""))
            p.add(f"b{blk}.ffn.b1", uniform(rng, (d,), d, ""))
            p.add(f"b{blk}.ffn.W2", uniform(rng, (d, d), d, ""))
            p.add(f"b{blk}.ffn.b2", uniform(rng, (d,), d, ""))
        for m, Lm in enumerate(Ls):
            p.add(f"proj{m}.W", uniform(rng, (Lm, cfg.horizon), Lm, ""))
            p.add(f"proj{m}.b", uniform(rng, (cfg.horizon,), Lm, ""))
        head_in = cfg.n_scales * d + F
        # zero head: the untrained stream forecasts 0 in normalised units
        p.add("head.W", zeros((head_in, 1), ""))
        p.add("head.b", zeros((1,), ""))

    def _block(self, blk: int, xs: list[Tensor]) -> list[Tensor]:
        cfg, p = self.cfg, self.params
        parts = [moving_average_decompose(x, cfg.ma_kernel, axis=-2) for x in xs]
        trends = [tr for tr, _ in parts]
        seasons = [se for _, se in parts]
        M = cfg.n_scales
        up = [seasons[0]]
        for m in range(1, M):
            pre = f"b{blk}.up{m}."
            up.append(seasons[m] + _time_mlp(up[m - 1], p[pre + "W1"], p[pre + "b1"],
                                             p[pre + "W2"], p[pre + "b2"]))
        down = [None] * M
        down[M - 1] = trends[M - 1]
        for m in range(M - 2, -1, -1):
            pre = f"b{blk}.down{m + 1}."
            down[m] = trends[m] + _time_mlp(down[m + 1], p[pre + "W1"], p[pre + "b1"],
                                            p[pre + "W2"], p[pre + "b2"])
        pre = f"b{blk}.ffn."
        out = []
        for m in range(M):
            mixed = up[m] + down[m]
            h = T.relu(linear(mixed, p[pre + "W1"], p[pre + "b1"]))
            out.append(xs[m] + linear(h, p[pre + "W2"], p[pre + "b2"]))
        return out

    def forward(self, x, time_feats) -> Tensor:
        """x: (B, L, N); time_feats: (B, L+H, F) -> base forecast (B, H, 1)."""
        cfg, p = self.cfg, self.params
        x = T.as_tensor(x)
        tf = T.as_tensor(time_feats)
        if x.ndim != 3 or x.shape[1:] != (cfg.lookback, cfg.n_vars):
            raise ShapeError(f"trend input: expected (B, {cfg.lookback}, {cfg.n_vars}), got {x.shape}")
        B = x.shape[0]
        if tf.shape != (B, cfg.lookback + cfg.horizon, cfg.n_time_feats):
            raise ShapeError(
                f"time features: expected ({B}, {cfg.lookback + cfg.horizon}, {cfg.n_time_feats}),"
                f" got {tf.shape}"
            )
        L, H = cfg.lookback, cfg.horizon
        y_hist = x[:, :, cfg.target:cfg.target + 1]
        tokens = T.concat([y_hist, tf[:, :L, :]], axis=-1)
        h0 = linear(tokens, p["embed.W"], p["embed.b"])
        xs = [h0]
        r, d = cfg.downsample_ratio, cfg.d_model
        for m in range(1, cfg.n_scales):
            prev = xs[-1]
            Lm = prev.shape[1] // r
            xs.append(T.mean(prev.reshape(B, Lm, r, d), axis=2))
        for blk in range(cfg.depth):
            xs = self._block(blk, xs)
        feats = []
        for m, xm in enumerate(xs):
            proj = linear(T.swapaxes(xm, -1, -2), p[f"proj{m}.W"], p[f"proj{m}.b"])
            feats.append(T.swapaxes(proj, -1, -2))
        feats.append(tf[:, L:L + H, :])
        return linear(T.concat(feats, axis=-1), p["head.W"], p["head.b"])

    __call__ = forward


def trend_forecast(stream: TrendStream, x, time_feats) -> Tensor:
    """Single-window convenience: x (L, N), time_feats (L+H, F) -> (H, 1)."""
    x = T.as_tensor(x)
    tf = T.as_tensor(time_feats)
    if x.ndim != 2 or tf.ndim != 2:
        raise ShapeError(f"expected 2-d window inputs, got {x.shape} and {tf.shape}")
    out = stream.forward(x.reshape(1, *x.shape), tf.reshape(1, *tf.shape))
    return out.reshape(stream.cfg.horizon, 1)
