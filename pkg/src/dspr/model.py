"""The dual-stream model: trend forecast plus a gated physics-aware residual."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .graph_dynamic import (
    DynamicBranch,
    adaptive_tau,
    dynamic_adjacency,
    dynamic_gcn,
    gated_fuse,
    masked_temporal_attention,
    window_bias,
)
from .graph_static import PriorGraph, StaticBranch, static_adjacency, static_context
from .layers import Params, const, uniform, zeros
from .tensor import Tensor
from .trend import TrendConfig, TrendStream

VARIANTS = ("full", "no_prior", "shuffled_prior", "no_adaptive_window", "trend_only", "pgnn", "arx")


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    n_vars: int
    target: int
    n_time_feats: int = 4
    d_model: int = 64
    n_heads: int = 4
    tau_max: int = 20
    node_dim: int = 16
    trend_d_model: int = 64
    trend_depth: int = 4
    downsample_ratio: int = 2
    n_scales: int = 3
    ma_kernel: int = 25
    beta_init: float = -8.0
    lambda_phys: float = 1e-2
    lambda_sparse: float = 1e-4
    use_residual: bool = True
    adaptive_window: bool = True

    def __post_init__(self):
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError("lookback and horizon must be positive")

    def trend_config(self) -> TrendConfig:
        return TrendConfig(
            lookback=self.lookback, horizon=self.horizon, n_vars=self.n_vars, target=self.target,
            n_time_feats=self.n_time_feats, d_model=self.trend_d_model, depth=self.trend_depth,
            downsample_ratio=self.downsample_ratio, n_scales=self.n_scales, ma_kernel=self.ma_kernel,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if variant in ("trend_only", "pgnn"):
            kw["use_residual"] = False
        if variant == "no_adaptive_window":
            kw["adaptive_window"] = False
        return cls(**kw)


@dataclass
class ForwardOutput:
    y_hat: Tensor
    y_base: Tensor
    delta_y: Tensor
    gate: np.ndarray
    A_static: Tensor | None = None
    A_dynamic: Tensor | None = None
    A_dynamic_mean: Tensor | None = None
    tau: Tensor | None = None
    extras: dict = field(default_factory=dict)


class DSPRModel:
    """Both streams and the fusion head. ``prior`` is the graph the model is built with."""

    def __init__(self, cfg: ModelConfig, prior: PriorGraph, seed: int = 0):
        if prior.n_vars != cfg.n_vars:
            raise ShapeError(f"prior has {prior.n_vars} variables, config says {cfg.n_vars}")
        self.cfg = cfg
        self.prior = prior
        self.seed = int(seed)
        # independent streams per component keep the trend init identical across variants
        self.trend = TrendStream(cfg.trend_config(), np.random.default_rng([self.seed, 1]))
        self.params = Params()
        for k, v in self.trend.params.items():
            self.params.add("trend." + k, v)
        self.static = self.dynamic = None
        if cfg.use_residual:
            C, D, H = cfg.n_vars, cfg.d_model, cfg.horizon
            self.static = StaticBranch(C, D, np.random.default_rng([self.seed, 2]), node_dim=cfg.node_dim)
            self.dynamic = DynamicBranch(C, cfg.n_time_feats, D, np.random.default_rng([self.seed, 3]),
                                         n_heads=cfg.n_heads, tau_max=cfg.tau_max,
                                         adaptive=cfg.adaptive_window)
            for k, v in self.static.params.items():
                self.params.add("static." + k, v)
            for k, v in self.dynamic.params.items():
                self.params.add("dynamic." + k, v)
            rng = np.random.default_rng([self.seed, 4])
            self.params.add("fuse.W", uniform(rng, (C * D, H), C * D, ""))
            self.params.add("fuse.b", zeros((H,), ""))
            self.params.add("beta", const(cfg.beta_init, (1,), ""))

    @property
    def gate(self) -> np.ndarray:
        if "beta" not in self.params:
            return np.zeros(1)
        return T._sigmoid_np(self.params["beta"].data)

    def forward(self, x, time_feats) -> ForwardOutput:
        """x: (B, L, N) normalised inputs; time_feats: (B, L+H, F)."""
        cfg = self.cfg
        x, tf = T.as_tensor(x), T.as_tensor(time_feats)
        if x.ndim != 3 or x.shape[1:] != (cfg.lookback, cfg.n_vars):
            raise ShapeError(f"expected x of shape (B, {cfg.lookback}, {cfg.n_vars}), got {x.shape}")
        B, L, C = x.shape
        H = cfg.horizon
        # stream 1
        y_base = self.trend.forward(x, tf)
        if not cfg.use_residual:
            zero = Tensor(np.zeros((B, H, 1)))
            return ForwardOutput(y_hat=y_base, y_base=y_base, delta_y=zero, gate=np.zeros(1))
        # stream 2
        A_s = static_adjacency(self.static, self.prior)
        hfeat = self.dynamic.embed(x, tf[:, :L, :], A_s)         # (B, L, C, D)
        h_t = hfeat[:, L - 1]                                     # (B, C, D)
        Z_s = static_context(h_t, A_s, self.static)
        A_d = dynamic_adjacency(h_t)
        tau = adaptive_tau(hfeat, self.dynamic)                   # (B, L, C)
        bias = window_bias(tau, n_queries=1)
        h_sp = dynamic_gcn(h_t, A_d, self.dynamic)
        h_tmp = masked_temporal_attention(hfeat, bias, self.dynamic)[:, 0]
        Z_d = gated_fuse(h_t, h_sp, h_tmp, self.dynamic)
        fused = T.concat([Z_s, Z_d], axis=-1).reshape(B, C * cfg.d_model)
        delta = (fused @ self.params["fuse.W"] + self.params["fuse.b"]).reshape(B, H, 1)
        gate = T.sigmoid(self.params["beta"])
        y_hat = y_base + delta * gate
        return ForwardOutput(
            y_hat=y_hat, y_base=y_base, delta_y=delta, gate=gate.data.copy(),
            A_static=A_s, A_dynamic=A_d, A_dynamic_mean=T.mean(A_d, axis=0), tau=tau,
        )

    __call__ = forward


def dspr_loss(out: ForwardOutput, y, prior: PriorGraph, cfg: ModelConfig) -> Tensor:
    """MSE + lambda_phys * ||(A_s - A_prior) * A_prior||_F^2 + lambda_sparse * ||A_d * off-prior||_1."""
    y = T.as_tensor(y)
    if y.shape != out.y_hat.shape:
        raise ShapeError(f"target {y.shape} vs prediction {out.y_hat.shape}")
    total = T.mse(out.y_hat, y)
    if out.A_static is not None and cfg.lambda_phys > 0:
        P = Tensor(prior.adjacency)
        dev = (out.A_static - P) * P
        total = total + cfg.lambda_phys * T.sum_(T.square(dev))
    if out.A_dynamic_mean is not None and cfg.lambda_sparse > 0:
        off_prior = Tensor(1.0 - prior.adjacency.T)  # receiver orientation
        total = total + cfg.lambda_sparse * T.sum_(T.abs_(out.A_dynamic_mean * off_prior))
    return total


def pgnn_loss(y_hat, y, x, lambda_phy: float, f_cons=None) -> Tensor:
    """MSE + lambda_phy * mean_i ||y_hat_i - f_cons(x_i)||^2 (conservation-penalty baseline)."""
    if f_cons is None:
        raise ConfigError("PG-NN needs a conservation surrogate f_cons; dataset provides none")
    y_hat, y = T.as_tensor(y_hat), T.as_tensor(y)
    ref = Tensor(np.asarray(f_cons(x), dtype=np.float64).reshape(y_hat.shape))
    total = T.mse(y_hat, y)
    if lambda_phy:
        B = y_hat.shape[0] if y_hat.ndim == 3 else 1
        total = total + (lambda_phy / B) * T.sum_(T.square(y_hat - ref))
    return total
