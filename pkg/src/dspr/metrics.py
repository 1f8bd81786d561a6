"""Point-accuracy and physical-fidelity metrics, and the volatility-regime split."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError

REGIMES = ("High", "Med", "Low")


def _pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {y_hat.shape} vs truth {y.shape}")
    if y.ndim == 1:
        y_hat, y = y_hat[None], y[None]
    if y.ndim == 3 and y.shape[-1] == 1:
        y_hat, y = y_hat[..., 0], y[..., 0]
    if y.ndim != 2:
        raise ShapeError(f"expected (samples, horizon), got {y.shape}")
    return y_hat, y


def mae(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    return float(np.mean(np.abs(y_hat - y)))


def rmse(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def mca(y_hat, y, eps: float = 1e-8, clip: bool = False) -> float:
    """Mean conservation accuracy (%): agreement of horizon totals.

    The denominator is the signed truth total plus ``eps``, as defined; with
    ``clip`` each sample's score is floored at 0.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    y_hat, y = _pair(y_hat, y)
    sy = y.sum(axis=1)
    per = 1.0 - np.abs(y_hat.sum(axis=1) - sy) / (sy + eps)
    if clip:
        per = np.maximum(per, 0.0)
    return float(per.mean() * 100.0)


def total_variation(a: np.ndarray) -> np.ndarray:
    return np.abs(np.diff(a, axis=-1)).sum(axis=-1)


def tvr(y_hat, y, eps: float = 1e-8) -> float:
    """Total variation ratio (%): 1 - |1 - TV(y_hat) / (TV(y) + eps)|, averaged.

    Equal variations count as a ratio of exactly 1, so a perfect forecast
    scores 100 rather than 100 * (1 - eps / TV(y)).
    """
    y_hat, y = _pair(y_hat, y)
    if y.shape[1] < 2:
        raise ContractError("total variation needs a horizon of at least 2 steps")
    tv_hat, tv = total_variation(y_hat), total_variation(y)
    r = np.where(tv_hat == tv, 1.0, tv_hat / (tv + eps))
    return float(np.mean(1.0 - np.abs(1.0 - r)) * 100.0)


def tda_segment(horizon: int, segment: int = 4) -> int:
    """Effective segment length: shrunk so that every horizon has >= 2 segments."""
    return max(1, min(segment, horizon // 2))


def tda(y_hat, y, delta: float | None = None, segment: int = 4) -> float | None:
    """Trend directional accuracy (%) over significant segment-mean shifts.

    Each sample's horizon is cut into non-overlapping segments; an interval
    is a pair of adjacent segments. It is significant when the truth's
    segment-mean shift exceeds ``delta`` (default ``0.1 * std(y)``).
    Returns ``None`` when no interval is significant.
    """
    y_hat, y = _pair(y_hat, y)
    S, H = y.shape
    seg = tda_segment(H, segment)
    n = H // seg
    if n < 2:
        raise ContractError(f"horizon {H} too short for directional intervals")
    if delta is None:
        delta = 0.1 * float(y.std())
    if delta <= 0:
        raise ContractError("delta must be positive")
    mt = y[:, :n * seg].reshape(S, n, seg).mean(axis=2)
    mp = y_hat[:, :n * seg].reshape(S, n, seg).mean(axis=2)
    dt, dp = np.diff(mt, axis=1), np.diff(mp, axis=1)
    sig = np.abs(dt) > delta
    if not sig.any():
        return None
    return float(np.mean(np.sign(dt[sig]) == np.sign(dp[sig])) * 100.0)


@dataclass
class RegimePartition:
    high: np.ndarray
    med: np.ndarray
    low: np.ndarray
    thresholds: tuple[float, float]

    def groups(self) -> dict[str, np.ndarray]:
        return {"High": self.high, "Med": self.med, "Low": self.low}


def regime_split(sample_std) -> RegimePartition:
    """Tertiles of per-sample target std; ties go to the lower sample index first."""
    std = np.asarray(sample_std, dtype=np.float64).ravel()
    if std.size < 3:
        raise ContractError(f"regime split needs >= 3 samples, got {std.size}")
    order = np.lexsort((np.arange(std.size), -std))
    hi, me, lo = np.array_split(order, 3)
    return RegimePartition(np.sort(hi), np.sort(me), np.sort(lo),
                           (float(std[hi].min()), float(std[me].min())))


@dataclass
class MetricReport:
    horizon: int
    MAE: float
    RMSE: float
    MCA: float
    MCA_clipped: float
    TVR: float | None
    TDA: float | None
    n_samples: int
    regime: str = "All"
    tda_segment: int = 4
    tda_delta: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(y_hat, y, regime: str = "All", segment: int = 4,
             delta: float | None = None, eps: float = 1e-8) -> MetricReport:
    y_hat, y = _pair(y_hat, y)
    H = y.shape[1]
    d = 0.1 * float(y.std()) if delta is None else float(delta)
    if d <= 0:
        d = 1e-12
    return MetricReport(
        horizon=H, MAE=mae(y_hat, y), RMSE=rmse(y_hat, y),
        MCA=mca(y_hat, y, eps), MCA_clipped=mca(y_hat, y, eps, clip=True),
        TVR=tvr(y_hat, y, eps) if H >= 2 else None,
        TDA=tda(y_hat, y, d, segment) if H >= 2 else None,
        n_samples=y.shape[0], regime=regime, tda_segment=tda_segment(H, segment), tda_delta=d,
    )


def evaluate_regimes(y_hat, y, sample_std, **kw) -> list[MetricReport]:
    """One report per volatility tertile plus the pooled 'All' report."""
    y_hat, y = _pair(y_hat, y)
    part = regime_split(sample_std)
    d = kw.pop("delta", None)
    d = 0.1 * float(y.std()) if d is None else d
    out = [evaluate(y_hat[idx], y[idx], regime=name, delta=d, **kw)
           for name, idx in part.groups().items()]
    out.append(evaluate(y_hat, y, regime="All", delta=d, **kw))
    return out


REPORT_COLUMNS = [f.name for f in fields(MetricReport)]


def write_reports(reports: list[MetricReport], path_stem) -> None:
    """Write ``<stem>.json`` and ``<stem>.csv``."""
    stem = Path(path_stem)
    rows = [r.to_dict() for r in reports]
    stem.with_suffix(".json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                        for k, v in r.items()})


def read_reports(path) -> list[MetricReport]:
    return [MetricReport(**d) for d in json.loads(Path(path).read_text())]
