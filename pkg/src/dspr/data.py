"""Synthetic process generators, CSV ingestion and chronological windowing."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError
from .graph_static import PriorGraph, build_prior

N_TIME_FEATS = 4


# -- conservation surrogate -----------------------------------------------------


@dataclass
class LinearConservation:
    """``y[t] = gain * sum_i x_i[t - delay]``; maps a lookback window to its horizon."""

    inputs: list[int]
    delay: int
    gain: float

    def __call__(self, x: np.ndarray, horizon: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if horizon > self.delay:
            raise ConfigError(f"horizon {horizon} exceeds conservation delay {self.delay}")
        L = x.shape[-2]
        if L < self.delay:
            raise ConfigError(f"lookback {L} shorter than conservation delay {self.delay}")
        total = x[..., self.inputs].sum(axis=-1)                  # (..., L)
        # y[t+h] uses x[t+h-delay], i.e. window rows L-1+h-delay for h = 1..H
        rows = [L - 1 + h - self.delay for h in range(1, horizon + 1)]
        return (self.gain * total[..., rows])[..., None]

    def to_json(self) -> dict:
        return {"kind": "linear_conservation", **asdict(self)}

    @classmethod
    def from_json(cls, d: dict) -> "LinearConservation":
        return cls(inputs=[int(i) for i in d["inputs"]], delay=int(d["delay"]), gain=float(d["gain"]))


# -- dataset --------------------------------------------------------------------


@dataclass
class SeriesDataset:
    names: list[str]
    values: np.ndarray
    period: float
    target: int
    prior: PriorGraph
    true_tau: np.ndarray | None = None
    regime: np.ndarray | None = None
    f_cons: LinearConservation | None = None
    true_edges: list[tuple[int, int]] = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise SchemaError(f"values {self.values.shape} do not match {len(self.names)} names")
        if not np.isfinite(self.values).all():
            raise SchemaError("dataset contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    @property
    def roles(self) -> list[str]:
        return self.prior.roles

    def time_features(self, start: int = 0, n: int | None = None) -> np.ndarray:
        n = self.n_steps - start if n is None else n
        return time_features(np.arange(start, start + n), self.period)

    # -- io -------------------------------------------------------------------
    def metadata(self) -> dict:
        meta = {
            "names": self.names,
            "roles": self.roles,
            "period": self.period,
            "target": self.names[self.target],
            "prior": self.prior.to_json(),
            "true_edges": [[self.names[s], self.names[d]] for s, d in self.true_edges],
            "generator": self.generator,
            "f_cons": self.f_cons.to_json() if self.f_cons else None,
            "n_steps": self.n_steps,
        }
        return meta

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "data.csv", self.names, self.values)
        (out / "metadata.json").write_text(json.dumps(self.metadata(), indent=2) + "\n")
        self.prior.save(out / "prior.json")
        if self.true_tau is not None:
            gt = np.column_stack([self.true_tau, self.regime if self.regime is not None
                                  else np.zeros(self.n_steps)])
            write_csv(out / "ground_truth.csv", ["tau", "regime"], gt)

    @classmethod
    def load(cls, data_dir) -> "SeriesDataset":
        d = Path(data_dir)
        meta = json.loads((d / "metadata.json").read_text())
        names, values = read_csv(d / "data.csv")
        if names != meta["names"]:
            raise SchemaError(f"CSV header {names} does not match metadata {meta['names']}")
        prior = PriorGraph.from_json(meta["prior"])
        true_tau = regime = None
        if (d / "ground_truth.csv").exists():
            _, gt = read_csv(d / "ground_truth.csv")
            true_tau, regime = gt[:, 0], gt[:, 1].astype(int)
        idx = {n: i for i, n in enumerate(names)}
        return cls(
            names=names, values=values, period=float(meta["period"]), target=idx[meta["target"]],
            prior=prior, true_tau=true_tau, regime=regime,
            f_cons=LinearConservation.from_json(meta["f_cons"]) if meta.get("f_cons") else None,
            true_edges=[(idx[s], idx[t]) for s, t in meta.get("true_edges", [])],
            generator=meta.get("generator", {}),
        )


def time_features(index: np.ndarray, period: float) -> np.ndarray:
    """Minute-of-hour and hour-of-day as sin/cos pairs, shape (n, 4)."""
    sec = np.asarray(index, dtype=np.float64) * period
    minute = (sec / 60.0) % 60.0
    hour = (sec / 3600.0) % 24.0
    a, b = 2 * np.pi * minute / 60.0, 2 * np.pi * hour / 24.0
    return np.column_stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b)])


def write_csv(path, names: Sequence[str], values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Strict numeric reader (no cleaning); missing cells are errors."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    names, body = rows[0], rows[1:]
    out = np.empty((len(body), len(names)))
    for r, row in enumerate(body):
        if len(row) != len(names):
            raise ParseError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(names)}")
        for c, cell in enumerate(row):
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {r + 2}, column {names[c]!r}: {cell!r} is not numeric")
    return names, out


# -- generators ------------------------------------------------------------------


@dataclass
class TransportDelayConfig:
    T: int = 20000
    seed: int = 0
    lag_regimes: list = field(default_factory=lambda: [(1.0, 12), (2.0, 4)])
    noise_std: float = 0.1
    y_offset: float = 5.0
    gain_u: float = 1.0
    gain_x: float = 0.5
    u_phi: float = 0.8
    mean_regime_len: int = 200
    min_regime_len: int = 40
    v_noise: float = 0.05
    n_distractors: int = 2
    period: float = 10.0
    tau_max: int = 20


def _ar1(rng, n, phi, scale=1.0):
    e = rng.normal(size=n)
    out = np.empty(n)
    out[0] = e[0]
    s = np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + s * e[t]
    return scale * out


def _ar2(rng, n, a1, a2, scale):
    e = rng.normal(size=n)
    out = np.zeros(n)
    for t in range(2, n):
        out[t] = a1 * out[t - 1] + a2 * out[t - 2] + scale * e[t]
    return out


def _regime_path(rng, n, n_regimes, mean_len, min_len):
    labels = np.empty(n, dtype=int)
    t, cur = 0, int(rng.integers(n_regimes))
    while t < n:
        dur = min_len + int(rng.geometric(1.0 / max(mean_len - min_len, 1)))
        labels[t:t + dur] = cur
        t += dur
        if n_regimes > 1:
            cur = (cur + 1 + int(rng.integers(n_regimes - 1))) % n_regimes
    return labels


def gen_transport_delay(cfg: TransportDelayConfig | None = None, **kw) -> SeriesDataset:
    """Actuator -> target response whose delay switches with a flow-velocity regime.

    Variables: u (actuator), v (flow velocity), x (AR(2) state), z* distractors
    (z1 independent, z2 downstream of y) and the target y.
    """
    cfg = cfg or TransportDelayConfig(**kw)
    regimes = [(float(v), int(tau)) for v, tau in cfg.lag_regimes]
    taus = [tau for _, tau in regimes]
    if not regimes:
        raise ConfigError("at least one lag regime is required")
    if len(set(taus)) != len(taus) or len({v for v, _ in regimes}) != len(regimes):
        raise ConfigError("lag regimes need distinct velocity levels and delays")
    if min(taus) < 1 or max(taus) >= cfg.tau_max:
        raise ConfigError(f"delays must lie in [1, {cfg.tau_max})")
    rng = np.random.default_rng(cfg.seed)
    burn = max(taus) + 50
    n = cfg.T + burn
    u = _ar1(rng, n, cfg.u_phi)
    lab = _regime_path(rng, n, len(regimes), cfg.mean_regime_len, cfg.min_regime_len)
    levels = np.array([v for v, _ in regimes])
    tau_arr = np.array(taus)[lab]
    v = levels[lab] + cfg.v_noise * rng.normal(size=n)
    x = _ar2(rng, n, 1.6, -0.64, 0.2)
    x = x / x[burn:].std()
    idx = np.arange(n)
    lagged = u[np.maximum(idx - tau_arr, 0)]
    y = cfg.y_offset + cfg.gain_u * lagged + cfg.gain_x * x + cfg.noise_std * rng.normal(size=n)
    cols = {"u": u, "v": v, "x": x}
    roles = ["actuator", "state", "state"]
    for k in range(cfg.n_distractors):
        if k % 2 == 0:
            z = _ar1(rng, n, 0.9)
        else:
            z = 0.8 * np.concatenate([[0.0], y[:-1]]) + 0.3 * rng.normal(size=n)
        cols[f"z{k + 1}"] = z
        roles.append("state")
    cols["y"] = y
    roles.append("target")
    names = list(cols)
    values = np.column_stack([cols[k][burn:] for k in names])
    ti = {nm: i for i, nm in enumerate(names)}
    true_edges = [(ti["u"], ti["y"]), (ti["x"], ti["y"]), (ti["v"], ti["y"])]
    confirmed = [(ti["x"], ti["y"]), (ti["v"], ti["y"])]
    for k in range(1, cfg.n_distractors, 2):
        true_edges.append((ti["y"], ti[f"z{k + 1}"]))
        confirmed.append((ti["y"], ti[f"z{k + 1}"]))
    prior = build_prior(roles, confirmed, names=names)
    return SeriesDataset(
        names=names, values=values, period=cfg.period, target=ti["y"], prior=prior,
        true_tau=tau_arr[burn:].astype(np.float64), regime=lab[burn:], true_edges=true_edges,
        generator={"kind": "transport_delay", "params": _jsonable(asdict(cfg))},
    )


@dataclass
class ConservationConfig:
    T: int = 20000
    seed: int = 0
    n_inflows: int = 2
    delay: int = 8
    leak: float = 0.05
    noise_std: float = 0.0
    period: float = 60.0


def gen_conservation(cfg: ConservationConfig | None = None, **kw) -> SeriesDataset:
    """Mass balance: outflow equals (1 - leak) times the delayed total inflow."""
    cfg = cfg or ConservationConfig(**kw)
    if cfg.n_inflows < 1 or cfg.delay < 1 or not 0 <= cfg.leak < 1:
        raise ConfigError("need n_inflows >= 1, delay >= 1 and leak in [0, 1)")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.T + cfg.delay
    flows = [5.0 + 2.0 * (k + 1) + _ar1(rng, n, 0.95) for k in range(cfg.n_inflows)]
    q = np.column_stack(flows)
    temp = _ar1(rng, n, 0.98)
    total = q.sum(axis=1)
    gain = 1.0 - cfg.leak
    y = np.empty(n)
    y[cfg.delay:] = gain * total[:-cfg.delay]
    y[:cfg.delay] = gain * total[0]
    y = y + cfg.noise_std * rng.normal(size=n)
    names = [f"q{k + 1}" for k in range(cfg.n_inflows)] + ["temp", "out"]
    values = np.column_stack([q, temp, y])[cfg.delay:]
    roles = ["actuator"] * cfg.n_inflows + ["state", "target"]
    prior = build_prior(roles, [], names=names)
    tgt = len(names) - 1
    return SeriesDataset(
        names=names, values=values, period=cfg.period, target=tgt, prior=prior,
        f_cons=LinearConservation(list(range(cfg.n_inflows)), cfg.delay, gain),
        true_edges=[(k, tgt) for k in range(cfg.n_inflows)],
        generator={"kind": "conservation", "params": _jsonable(asdict(cfg))},
    )


def _jsonable(d):
    return json.loads(json.dumps(d))


# -- csv ingestion ---------------------------------------------------------------


@dataclass
class IngestSchema:
    target: str
    roles: dict | None = None
    confirmed_edges: list = field(default_factory=list)
    period: float = 1.0
    nonnegative: list = field(default_factory=list)
    outlier_sigma: float | None = 3.0
    stats_fraction: float = 0.6


def _interpolate(col: np.ndarray) -> np.ndarray:
    col = col.copy()
    ok = ~np.isnan(col)
    idx = np.arange(col.size)
    first, last = idx[ok][0], idx[ok][-1]
    inner = (~ok) & (idx > first) & (idx < last)
    col[inner] = np.interp(idx[inner], idx[ok], col[ok])
    col[idx > last] = col[last]     # forward fill the tail
    col[idx < first] = col[first]   # back fill the head
    return col


def ingest_csv(path, schema: IngestSchema | dict) -> SeriesDataset:
    """Read a raw process CSV, clean it and wrap it with a prior graph.

    Cleaning: ``|z| > outlier_sigma`` points (statistics from the leading
    ``stats_fraction`` of rows) become gaps; gaps are linearly interpolated,
    the tail forward-filled and the head back-filled; ``nonnegative``
    columns are clipped at zero.
    """
    if isinstance(schema, dict):
        schema = IngestSchema(**schema)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one data row")
    names = [h.strip() for h in rows[0]]
    vals = np.empty((len(rows) - 1, len(names)))
    for r, row in enumerate(rows[1:]):
        if len(row) != len(names):
            raise ParseError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(names)}")
        for c, cell in enumerate(row):
            s = cell.strip()
            if s == "" or s.lower() in ("nan", "na", "null"):
                vals[r, c] = np.nan
                continue
            try:
                vals[r, c] = float(s)
            except ValueError:
                raise ParseError(f"{path}: row {r + 2}, column {names[c]!r}: {cell!r} is not numeric")
    if schema.target not in names:
        raise SchemaError(f"target {schema.target!r} not among columns {names}")
    n_stats = max(2, int(len(vals) * schema.stats_fraction))
    for c, name in enumerate(names):
        col = vals[:, c]
        if np.isnan(col).all():
            raise SchemaError(f"column {name!r} has no values")
        if schema.outlier_sigma is not None:
            ref = col[:n_stats]
            mu, sd = np.nanmean(ref), np.nanstd(ref)
            if sd > 0:
                col[np.abs(col - mu) > schema.outlier_sigma * sd] = np.nan
        vals[:, c] = _interpolate(col)
        if name in schema.nonnegative:
            vals[:, c] = np.maximum(vals[:, c], 0.0)
    tgt = names.index(schema.target)
    idx = {n: i for i, n in enumerate(names)}
    if schema.roles:
        roles = [schema.roles.get(n, "state") for n in names]
        roles[tgt] = "target"
        edges = [(idx[s], idx[d]) for s, d in schema.confirmed_edges]
    else:
        roles = ["state"] * len(names)
        roles[tgt] = "target"
        edges = [(i, tgt) for i in range(len(names)) if i != tgt]
    prior = build_prior(roles, edges, names=names)
    return SeriesDataset(names=names, values=vals, period=schema.period, target=tgt, prior=prior,
                         generator={"kind": "csv", "source": str(path)})


# -- windowing -------------------------------------------------------------------


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean) / self.std

    def invert(self, v: np.ndarray) -> np.ndarray:
        return v * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class WindowBatch:
    X: np.ndarray            # (B, L, N)
    time_feats: np.ndarray   # (B, L+H, F)
    Y: np.ndarray            # (B, H, 1)
    sample_std: np.ndarray   # (B,) target std over lookback+horizon
    start: np.ndarray        # (B,) dataset index of each window's first step
    true_tau: np.ndarray | None = None   # (B, L)
    regime: np.ndarray | None = None     # (B,) regime id at the forecast origin
    name: str = ""

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(
            self.X[idx], self.time_feats[idx], self.Y[idx], self.sample_std[idx], self.start[idx],
            None if self.true_tau is None else self.true_tau[idx],
            None if self.regime is None else self.regime[idx], self.name,
        )


@dataclass
class Splits:
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    normalizer: Normalizer
    bounds: list[tuple[int, int]]
    lookback: int
    horizon: int


def segment_bounds(n: int, ratios=(0.6, 0.2, 0.2)) -> list[tuple[int, int]]:
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ContractError(f"need three positive split ratios, got {ratios}")
    tot = float(sum(ratios))
    a = int(n * ratios[0] / tot)
    b = a + int(n * ratios[1] / tot)
    return [(0, a), (a, b), (b, n)]


def count_windows(seg_len: int, L: int, H: int, stride: int = 1) -> int:
    return 0 if seg_len < L + H else (seg_len - L - H) // stride + 1


def _windows(ds, norm_vals, tf, lo, hi, L, H, stride, name) -> WindowBatch:
    starts = np.arange(lo, hi - L - H + 1, stride)
    span = np.arange(L + H)
    full = norm_vals[starts[:, None] + span[None, :]]         # (B, L+H, N)
    X = full[:, :L, :]
    Y = full[:, L:, ds.target][..., None]
    tfb = tf[starts[:, None] + span[None, :]]
    std = full[:, :, ds.target].std(axis=1)
    tt = reg = None
    if ds.true_tau is not None:
        tt = ds.true_tau[starts[:, None] + np.arange(L)[None, :]]
    if ds.regime is not None:
        reg = ds.regime[starts + L - 1]
    return WindowBatch(X, tfb, Y, std, starts, tt, reg, name)


def split_windows(ds: SeriesDataset, L: int, H: int, ratios=(0.6, 0.2, 0.2),
                  strides: tuple[int, int, int] | None = None,
                  normalizer: Normalizer | None = None) -> Splits:
    """Chronological split; z-scores fit on the train segment only.

    Default strides: 1 for train, ``H`` for validation and test. A given
    ``normalizer`` (e.g. restored from a checkpoint) replaces the fitted one.
    """
    strides = strides or (1, H, H)
    bounds = segment_bounds(ds.n_steps, ratios)
    for (lo, hi), nm in zip(bounds, ("train", "val", "test")):
        if count_windows(hi - lo, L, H) < 1:
            raise ContractError(
                f"{nm} segment of {hi - lo} steps too short for lookback {L} + horizon {H}"
            )
    if normalizer is None:
        lo, hi = bounds[0]
        mean = ds.values[lo:hi].mean(axis=0)
        std = ds.values[lo:hi].std(axis=0)
        normalizer = Normalizer(mean, np.where(std > 0, std, 1.0))
    norm = normalizer
    nv = norm.apply(ds.values)
    tf = ds.time_features()
    batches = [
        _windows(ds, nv, tf, lo, hi, L, H, s, nm)
        for (lo, hi), s, nm in zip(bounds, strides, ("train", "val", "test"))
    ]
    return Splits(*batches, normalizer=norm, bounds=bounds, lookback=L, horizon=H)


def normalized_f_cons(ds: SeriesDataset, norm: Normalizer, horizon: int):
    """f_cons acting on normalised windows and returning normalised targets."""
    if ds.f_cons is None:
        raise ConfigError("dataset has no conservation surrogate")

    def f(x_norm):
        raw = norm.invert(np.asarray(x_norm))
        out = ds.f_cons(raw, horizon)
        return (out - norm.mean[ds.target]) / norm.std[ds.target]

    return f
