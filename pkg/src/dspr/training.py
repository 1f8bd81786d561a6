"""Optimisation, the training loop, ablations, baselines and mechanism analysis."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SeriesDataset, Splits, WindowBatch, normalized_f_cons, split_windows
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .graph_static import PriorGraph
from .metrics import MetricReport, evaluate, evaluate_regimes
from .model import VARIANTS, DSPRModel, ModelConfig, dspr_loss, pgnn_loss


# -- Adam -----------------------------------------------------------------------


def adam_state() -> dict:
    return {"t": 0, "m": {}, "v": {}}


def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """In-place Adam update with bias correction. ``params``/``grads``: name -> ndarray."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m = state["m"].get(k)
        if m is None:
            m = state["m"][k] = np.zeros_like(p)
            state["v"][k] = np.zeros_like(p)
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# -- configs and records ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float = 5.0
    patience: int = 10
    variant: str = "full"
    steps_per_epoch: int | None = None
    lambda_phy: float = 0.1
    arx_p: int = 2
    arx_q: int = 16
    eval_batch: int = 256
    gate_lr: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for k in ("epochs", "batch_size", "patience", "eval_batch", "arx_p", "arx_q"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.gate_lr is not None and self.gate_lr <= 0:
            raise ConfigError("gate_lr must be positive")
        if self.lr <= 0 or self.clip_norm < 0 or self.lambda_phy < 0:
            raise ConfigError("lr must be positive; clip_norm and lambda_phy non-negative")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RunRecord:
    variant: str
    config: dict
    model_config: dict
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    gate: list = field(default_factory=list)
    best_epoch: int = -1
    metrics: dict = field(default_factory=dict)
    checkpoint: str | None = None
    prior_edges: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))

    def test_report(self) -> MetricReport:
        return MetricReport(**self.metrics["test"])


# -- model construction ------------------------------------------------------------


def variant_prior(prior: PriorGraph, variant: str, seed: int) -> PriorGraph:
    if variant == "no_prior":
        return prior.zeros_like()
    if variant == "shuffled_prior":
        return prior.shuffled(np.random.default_rng([seed, 5]))
    return prior


def build_model(ds: SeriesDataset, lookback: int, horizon: int, variant: str = "full",
                seed: int = 0, **model_kw) -> DSPRModel:
    if variant == "arx":
        raise ConfigError("the ARX baseline is not a neural model; use fit_arx")
    cfg = ModelConfig.for_variant(variant, lookback=lookback, horizon=horizon, n_vars=ds.n_vars,
                                  target=ds.target, **model_kw)
    return DSPRModel(cfg, variant_prior(ds.prior, variant, seed), seed=seed)


def model_from_checkpoint(path) -> tuple[DSPRModel, dict]:
    ck = load_checkpoint(path)
    conf = ck.config
    cfg = ModelConfig.from_dict(conf["model"])
    model = DSPRModel(cfg, PriorGraph.from_json(conf["prior"]), seed=ck.seed)
    model.params.load_state_dict(ck.params)
    return model, conf


# -- inference helpers --------------------------------------------------------------


def predict(model: DSPRModel, batch: WindowBatch, eval_batch: int = 256) -> dict:
    """Run the model without gradients; returns numpy arrays."""
    y_hat, y_base, taus, adj = [], [], [], []
    n = len(batch)
    with T.no_grad():
        for lo in range(0, n, eval_batch):
            sl = slice(lo, min(n, lo + eval_batch))
            out = model(batch.X[sl], batch.time_feats[sl])
            y_hat.append(out.y_hat.data[..., 0])
            y_base.append(out.y_base.data[..., 0])
            if out.tau is not None:
                taus.append(out.tau.data)
                adj.append(out.A_dynamic.data.sum(axis=0))
    res = {"y_hat": np.concatenate(y_hat), "y_base": np.concatenate(y_base)}
    if taus:
        res["tau"] = np.concatenate(taus)
        res["A_dynamic_mean"] = np.sum(adj, axis=0) / n
    return res


def val_mse(model: DSPRModel, batch: WindowBatch, eval_batch: int = 256) -> float:
    p = predict(model, batch, eval_batch)
    return float(np.mean((p["y_hat"] - batch.Y[..., 0]) ** 2))


def evaluate_batch(y_hat, batch: WindowBatch, regimes: bool = False, segment: int = 4,
                   delta: float | None = None):
    y = batch.Y[..., 0]
    if regimes:
        return evaluate_regimes(y_hat, y, batch.sample_std, segment=segment, delta=delta)
    return [evaluate(y_hat, y, segment=segment, delta=delta)]


def delay_profile_rows(tau: np.ndarray, batch: WindowBatch) -> list[tuple]:
    """(sample_id, t, channel, tau, regime) rows; regime -1 when unknown."""
    B, L, C = tau.shape
    reg = batch.regime if batch.regime is not None else np.full(B, -1)
    rows = []
    for i in range(B):
        for t in range(L):
            for c in range(C):
                rows.append((int(batch.start[i]), t, c, float(tau[i, t, c]), int(reg[i])))
    return rows


def tau_by_regime(tau: np.ndarray, batch: WindowBatch, channel: int) -> dict[int, float]:
    """Mean learned tau at the forecast origin for one channel, grouped by true regime."""
    if batch.regime is None:
        raise ContractError("batch carries no regime labels")
    last = tau[:, -1, channel]
    return {int(r): float(last[batch.regime == r].mean()) for r in np.unique(batch.regime)}


# -- training loop ------------------------------------------------------------------


def train(variant: str, dataset, cfg: TrainConfig | None = None, lookback: int = 24,
          horizon: int = 4, model_kw: dict | None = None, splits: Splits | None = None,
          checkpoint_path=None, log=None) -> tuple[RunRecord, object]:
    """Train one variant; returns the record and the fitted model (best val checkpoint)."""
    cfg = cfg or TrainConfig(variant=variant)
    if cfg.variant != variant:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": variant})
    ds = dataset
    sp = splits or split_windows(ds, lookback, horizon)
    lookback, horizon = sp.lookback, sp.horizon
    t0 = time.perf_counter()
    if variant == "arx":
        rec, arx = _train_arx(ds, sp, cfg)
        rec.wall_time = time.perf_counter() - t0
        return rec, arx
    model = build_model(ds, lookback, horizon, variant, cfg.seed, **(model_kw or {}))
    f_cons = None
    if variant == "pgnn":
        f_cons = normalized_f_cons(ds, sp.normalizer, horizon)
    params = model.params
    # the gate logit may get its own step size: starting deep in the sigmoid tail,
    # it otherwise needs ~|beta_init| / lr steps before the residual can contribute
    gate_lr = cfg.gate_lr or cfg.lr
    arrays = {k: v.data for k, v in params.items() if k != "beta"}
    gate_arrays = {k: v.data for k, v in params.items() if k == "beta"}
    opt, gate_opt = adam_state(), adam_state()
    rng = np.random.default_rng([cfg.seed, 0])
    n = len(sp.train)
    rec = RunRecord(variant=variant, config=cfg.to_dict(), model_config=model.cfg.to_dict(),
                    prior_edges=[list(e) for e in model.prior.edges()])
    rec.gate.append(float(model.gate[0]))
    best, best_state, bad = np.inf, params.state_dict(), 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        steps = -(-n // cfg.batch_size)
        if cfg.steps_per_epoch:
            steps = min(steps, cfg.steps_per_epoch)
        total = 0.0
        for s in range(steps):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            params.zero_grad()
            X, tf, Y = sp.train.X[idx], sp.train.time_feats[idx], sp.train.Y[idx]
            try:
                out = model(X, tf)
                if variant == "pgnn":
                    loss = pgnn_loss(out.y_hat, Y, X, cfg.lambda_phy, f_cons)
                else:
                    loss = dspr_loss(out, Y, model.prior, model.cfg)
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise NonFiniteError("loss")
                T.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite value at epoch {epoch}, step {s} ({exc}); "
                    f"try a smaller learning rate than {cfg.lr}"
                ) from exc
            grads = {k: v.grad for k, v in params.items() if v.grad is not None}
            clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(arrays, grads, opt, lr=cfg.lr)
            if gate_arrays:
                adam_step(gate_arrays, grads, gate_opt, lr=gate_lr)
            total += lv
        vl = val_mse(model, sp.val, cfg.eval_batch)
        rec.train_loss.append(total / steps)
        rec.val_loss.append(vl)
        rec.gate.append(float(model.gate[0]))
        if log:
            log(f"epoch {epoch:3d} train {total / steps:.5f} val {vl:.5f} gate {model.gate[0]:.4f}")
        if vl < best:
            best, best_state, bad, rec.best_epoch = vl, params.state_dict(), 0, epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    params.load_state_dict(best_state)
    _finish(rec, model, sp, cfg)
    if checkpoint_path is not None:
        save_run_checkpoint(checkpoint_path, model, ds, sp, cfg, rec.metrics.get("val"))
        rec.checkpoint = str(checkpoint_path)
    rec.wall_time = time.perf_counter() - t0
    return rec, model


def _finish(rec: RunRecord, model, sp: Splits, cfg: TrainConfig) -> None:
    pv = predict(model, sp.val, cfg.eval_batch)
    pt = predict(model, sp.test, cfg.eval_batch)
    rec.metrics["val"] = evaluate_batch(pv["y_hat"], sp.val)[0].to_dict()
    rec.metrics["test"] = evaluate_batch(pt["y_hat"], sp.test)[0].to_dict()
    rec.metrics["test_regimes"] = [r.to_dict() for r in evaluate_batch(pt["y_hat"], sp.test, regimes=True)]
    if "A_dynamic_mean" in pt:
        rec.extras["A_dynamic_mean"] = pt["A_dynamic_mean"].tolist()
        if sp.test.regime is not None:
            rec.extras["tau_by_regime"] = {
                str(k): v for k, v in tau_by_regime(pt["tau"], sp.test, model.cfg.target).items()
            }


def save_run_checkpoint(path, model: DSPRModel, ds: SeriesDataset, sp: Splits, cfg: TrainConfig,
                        val_metrics: dict | None) -> None:
    conf = {
        "model": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "prior": model.prior.to_json(),
        "names": ds.names,
        "normalizer": sp.normalizer.to_json(),
        "split_bounds": [list(b) for b in sp.bounds],
    }
    save_checkpoint(path, model.params, conf, seed=cfg.seed, metrics={"val": val_metrics or {}})


# -- ablation -------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_prior", "shuffled_prior", "no_adaptive_window", "trend_only")


def run_ablation_suite(dataset: SeriesDataset, base_cfg: TrainConfig, lookback: int = 24,
                       horizon: int = 4, model_kw: dict | None = None,
                       variants=ABLATION_VARIANTS, log=None) -> dict:
    """Train each variant on identical splits and seed; MAE/RMSE and change vs 'full' in %."""
    if "full" not in variants:
        raise ConfigError("the ablation suite needs the 'full' variant as reference")
    sp = split_windows(dataset, lookback, horizon)
    records = {}
    for v in variants:
        records[v], _ = train(v, dataset, TrainConfig.from_dict({**base_cfg.to_dict(), "variant": v}),
                              model_kw=model_kw, splits=sp, log=log)
    return {"records": records, "table": ablation_table(records)}


def ablation_table(records: dict) -> list[dict]:
    ref = records["full"].metrics["test"]
    rows = []
    for v, r in records.items():
        m = r.metrics["test"]
        rows.append({
            "variant": v, "MAE": m["MAE"], "RMSE": m["RMSE"],
            "dMAE_pct": (m["MAE"] - ref["MAE"]) / ref["MAE"] * 100.0,
            "dRMSE_pct": (m["RMSE"] - ref["RMSE"]) / ref["RMSE"] * 100.0,
        })
    return rows


# -- ARX baseline ----------------------------------------------------------------------


@dataclass
class ARXModel:
    """y[t] = c + sum_i a[i] y[t-1-i] + sum_l b[l] . u[t-1-l]."""

    a: np.ndarray
    b: np.ndarray          # (q, n_exog)
    c: float
    ridge: bool = False

    @property
    def p(self) -> int:
        return self.a.size

    @property
    def q(self) -> int:
        return self.b.shape[0]

    def forecast(self, y_hist: np.ndarray, u_hist: np.ndarray, horizon: int) -> np.ndarray:
        """Recursive multi-step forecast; future exogenous inputs held at their last value.

        y_hist: (..., L), u_hist: (..., L, k) -> (..., horizon).
        """
        y = np.asarray(y_hist, dtype=np.float64)
        u = np.asarray(u_hist, dtype=np.float64)
        if y.shape[-1] < self.p or u.shape[-2] < self.q:
            raise ContractError("history shorter than the model orders")
        hold = np.repeat(u[..., -1:, :], horizon, axis=-2)
        u_all = np.concatenate([u, hold], axis=-2)
        ys = [y[..., i] for i in range(y.shape[-1])]
        L = y.shape[-1]
        out = []
        for h in range(horizon):
            t = L + h
            pred = np.full(y.shape[:-1], self.c)
            for i in range(self.p):
                pred = pred + self.a[i] * ys[t - 1 - i]
            for l in range(self.q):
                pred = pred + u_all[..., t - 1 - l, :] @ self.b[l]
            ys.append(pred)
            out.append(pred)
        return np.stack(out, axis=-1)


def fit_arx(y, u=None, order_p: int = 2, order_q: int = 1, ridge: float = 1e-6) -> ARXModel:
    """Least-squares ARX fit. y: (T,), u: (T, k) exogenous inputs or None."""
    if order_p < 1 or order_q < 1:
        raise ContractError("ARX orders must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    u = np.zeros((y.size, 0)) if u is None else np.asarray(u, dtype=np.float64).reshape(y.size, -1)
    k = u.shape[1]
    start = max(order_p, order_q)
    if y.size - start < 1 + order_p + order_q * k:
        raise ContractError("series too short for the requested orders")
    cols = [np.ones(y.size - start)]
    cols += [y[start - 1 - i:y.size - 1 - i] for i in range(order_p)]
    for l in range(order_q):
        for j in range(k):
            cols.append(u[start - 1 - l:y.size - 1 - l, j])
    A = np.column_stack(cols)
    rhs = y[start:]
    G = A.T @ A
    used_ridge = np.linalg.matrix_rank(G) < G.shape[0] or np.linalg.cond(G) > 1e12
    if used_ridge:
        theta = np.linalg.solve(G + ridge * np.eye(G.shape[0]), A.T @ rhs)
    else:
        theta = np.linalg.solve(G, A.T @ rhs)
    b = theta[1 + order_p:].reshape(order_q, k) if k else np.zeros((order_q, 0))
    return ARXModel(a=theta[1:1 + order_p].copy(), b=b, c=float(theta[0]), ridge=bool(used_ridge))


def _arx_inputs(batch: WindowBatch, target: int):
    y = batch.X[:, :, target]
    u = np.delete(batch.X, target, axis=2)
    return y, u


def _train_arx(ds: SeriesDataset, sp: Splits, cfg: TrainConfig):
    lo, hi = sp.bounds[0]
    norm = sp.normalizer.apply(ds.values[lo:hi])
    y = norm[:, ds.target]
    u = np.delete(norm, ds.target, axis=1)
    arx = fit_arx(y, u, cfg.arx_p, cfg.arx_q)
    rec = RunRecord(variant="arx", config=cfg.to_dict(), model_config={},
                    extras={"arx": {"a": arx.a.tolist(), "b": arx.b.tolist(), "c": arx.c,
                                    "ridge_fallback": arx.ridge}})
    for name, batch in (("val", sp.val), ("test", sp.test)):
        yh = arx.forecast(*_arx_inputs(batch, ds.target), sp.horizon)
        rec.metrics[name] = evaluate_batch(yh, batch)[0].to_dict()
        if name == "test":
            rec.metrics["test_regimes"] = [r.to_dict() for r in evaluate_batch(yh, batch, regimes=True)]
    return rec, arx


def arx_predict(arx: ARXModel, batch: WindowBatch, target: int, horizon: int) -> np.ndarray:
    return arx.forecast(*_arx_inputs(batch, target), horizon)


# -- mechanism stability ----------------------------------------------------------------


def top_edges(A: np.ndarray, k: int = 5) -> set[tuple[int, int]]:
    """The k largest off-diagonal entries (ties broken by position)."""
    A = np.asarray(A, dtype=np.float64)
    C = A.shape[0]
    off = [(i, j) for i in range(C) for j in range(C) if i != j]
    vals = np.array([A[i, j] for i, j in off])
    order = np.lexsort((np.arange(len(off)), -vals))
    return {off[i] for i in order[:k]}


def _offdiag(A):
    A = np.asarray(A, dtype=np.float64)
    return A[~np.eye(A.shape[0], dtype=bool)]


def stability_scores(mats, k: int = 5) -> tuple[float, float]:
    """Mean pairwise Jaccard of top-k edge sets and Spearman rank correlation of edge weights."""
    mats = list(mats)
    if len(mats) < 2:
        raise ContractError("stability needs at least two runs")
    jac, rho = [], []
    for A, B in itertools.combinations(mats, 2):
        ea, eb = top_edges(A, k), top_edges(B, k)
        jac.append(len(ea & eb) / len(ea | eb))
        a, b = _offdiag(A), _offdiag(B)
        if np.array_equal(a, b):
            rho.append(1.0)
        else:
            rho.append(float(stats.spearmanr(a, b)[0]))
    return float(np.mean(jac)), float(np.mean(rho))


def mechanism_stability(dataset: SeriesDataset, seeds, cfg: TrainConfig, lookback: int = 24,
                        horizon: int = 4, model_kw: dict | None = None, log=None) -> dict:
    """Train one full model per seed; compare mean dynamic adjacencies overall and per regime."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ContractError("stability needs at least two seeds")
    sp = split_windows(dataset, lookback, horizon)
    mats: dict[str, list] = {}
    for s in seeds:
        _, model = train("full", dataset, TrainConfig.from_dict({**cfg.to_dict(), "seed": s}),
                         model_kw=model_kw, splits=sp, log=log)
        conds = {"All": sp.test}
        if sp.test.regime is not None:
            for r in np.unique(sp.test.regime):
                conds[f"regime{int(r)}"] = sp.test.take(np.nonzero(sp.test.regime == r)[0])
        for name, b in conds.items():
            mats.setdefault(name, []).append(predict(model, b, cfg.eval_batch)["A_dynamic_mean"])
    return {name: stability_scores(m) for name, m in mats.items()}
