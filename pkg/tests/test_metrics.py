import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dspr.errors import ContractError, ShapeError
from dspr.metrics import (
    MetricReport,
    evaluate,
    evaluate_regimes,
    mae,
    mca,
    read_reports,
    regime_split,
    rmse,
    tda,
    tvr,
    write_reports,
)


# -- brute-force oracles: plain loops, written independently of the vectorised code


def mca_loop(yh, y, eps=1e-8):
    acc = 0.0
    for i in range(len(y)):
        sp = sum(yh[i])
        st_ = sum(y[i])
        acc += 1.0 - abs(sp - st_) / (st_ + eps)
    return acc / len(y) * 100.0


def tvr_loop(yh, y, eps=1e-8):
    acc = 0.0
    for i in range(len(y)):
        vp = sum(abs(yh[i][t + 1] - yh[i][t]) for t in range(len(y[i]) - 1))
        vt = sum(abs(y[i][t + 1] - y[i][t]) for t in range(len(y[i]) - 1))
        ratio = 1.0 if vp == vt else vp / (vt + eps)
        acc += 1.0 - abs(1.0 - ratio)
    return acc / len(y) * 100.0


def tda_loop(yh, y, delta, seg):
    hits = total = 0
    for i in range(len(y)):
        n = len(y[i]) // seg
        mt = [sum(y[i][k * seg:(k + 1) * seg]) / seg for k in range(n)]
        mp = [sum(yh[i][k * seg:(k + 1) * seg]) / seg for k in range(n)]
        for k in range(n - 1):
            dt = mt[k + 1] - mt[k]
            dp = mp[k + 1] - mp[k]
            if abs(dt) > delta:
                total += 1
                sgn = lambda v: (v > 0) - (v < 0)
                hits += sgn(dt) == sgn(dp)
    return None if total == 0 else hits / total * 100.0


def test_mca_examples():
    assert mca([[1, 1, 1, 1]], [[1, 1, 1, 1]]) == pytest.approx(100.0)
    assert mca([[1, 1, 1, 0]], [[1, 1, 1, 1]]) == pytest.approx(75.0)
    v = mca([[1.0, -1.0]], [[0.5, -0.5]])
    assert np.isfinite(v)


def test_tvr_examples():
    y = np.array([[0.0, 1.0, 0.0, 2.0]])
    assert tvr(y, y) == 100.0
    assert tvr(np.full_like(y, 3.0), y) == 0.0
    assert tvr(2 * y, y) == pytest.approx(0.0, abs=1e-6)


def test_tda_examples():
    y = np.array([[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]])
    assert tda(y, y, delta=0.1, segment=2) == 100.0
    z = y - y.mean()
    assert tda(-z, z, delta=0.1, segment=2) == 0.0
    assert tda(y, np.zeros_like(y), delta=0.1, segment=2) is None


def test_tda_segment_shrinks_for_short_horizons():
    y = np.array([[0.0, 0.0, 1.0, 1.0]])
    assert tda(y, y, delta=0.1) == 100.0    # H=4 -> segments of 2


def test_step_series_matches_interval_enumeration():
    rng = np.random.default_rng(3)
    levels = rng.choice([-1.0, 0.0, 2.0], size=(5, 6))
    y = np.repeat(levels, 4, axis=1)                 # piecewise-constant steps of 4
    yh = y + rng.normal(scale=0.7, size=y.shape)
    assert tda(yh, y, delta=0.5, segment=4) == tda_loop(yh.tolist(), y.tolist(), 0.5, 4)


def test_oracles_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        S, H = int(rng.integers(1, 6)), int(rng.integers(2, 13))
        y = rng.normal(loc=3.0, size=(S, H))
        yh = y + rng.normal(scale=0.5, size=(S, H))
        assert abs(mca(yh, y) - mca_loop(yh.tolist(), y.tolist())) < 1e-10
        assert abs(tvr(yh, y) - tvr_loop(yh.tolist(), y.tolist())) < 1e-10
        seg = max(1, min(4, H // 2))
        a, b = tda(yh, y, delta=0.2, segment=4), tda_loop(yh.tolist(), y.tolist(), 0.2, seg)
        assert (a is None and b is None) or abs(a - b) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 10))
def test_mca_invariant_to_joint_horizon_permutation(seed, H):
    rng = np.random.default_rng(seed)
    y, yh = rng.normal(loc=2, size=(4, H)), rng.normal(loc=2, size=(4, H))
    perm = rng.permutation(H)
    assert abs(mca(yh, y) - mca(yh[:, perm], y[:, perm])) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_tvr_is_one_minus_abs_ratio_gap(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(1, 6))
    r = rng.uniform(0, 3)
    yh = y * r    # scaling multiplies total variation by r
    assert tvr(yh, y, eps=1e-300) == pytest.approx((1 - abs(1 - r)) * 100, abs=1e-9)


def test_perfect_prediction_report():
    y = np.random.default_rng(1).normal(loc=5, size=(6, 8))
    r = evaluate(y, y)
    assert (r.MAE, r.RMSE) == (0.0, 0.0)
    assert r.MCA == pytest.approx(100) and r.TVR == pytest.approx(100)
    assert r.TDA in (None, 100.0)


def test_mae_rmse():
    assert mae([[1.0, 2.0]], [[0.0, 0.0]]) == 1.5
    assert rmse([[3.0, 4.0]], [[0.0, 0.0]]) == pytest.approx(np.sqrt(12.5))


def test_shape_errors():
    with pytest.raises(ShapeError):
        mca(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ContractError):
        tvr(np.ones((2, 1)), np.ones((2, 1)))


def test_mca_clipped_floor():
    y = np.array([[1.0, 1.0]])
    assert mca([[10.0, 10.0]], y) < 0
    assert mca([[10.0, 10.0]], y, clip=True) == 0.0


def test_regime_split_examples():
    p = regime_split(np.arange(1, 10))       # sample i has std i + 1
    assert sorted(p.high + 1) == [7, 8, 9]
    assert sorted(p.med + 1) == [4, 5, 6]
    assert sorted(p.low + 1) == [1, 2, 3]
    q = regime_split(np.ones(9))
    assert list(q.high) == [0, 1, 2] and list(q.med) == [3, 4, 5] and list(q.low) == [6, 7, 8]
    with pytest.raises(ContractError):
        regime_split([1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 200), st.integers(0, 10**6))
def test_regime_split_partitions(n, seed):
    std = np.random.default_rng(seed).integers(0, 5, size=n).astype(float)
    p = regime_split(std)
    groups = [set(g) for g in p.groups().values()]
    assert set().union(*groups) == set(range(n))
    assert sum(len(g) for g in groups) == n
    sizes = [len(g) for g in groups]
    assert max(sizes) - min(sizes) <= 1
    assert std[p.high].min() >= std[p.med].max()
    assert std[p.med].min() >= std[p.low].max()


def test_regime_reports_and_io(tmp_path):
    rng = np.random.default_rng(2)
    y = rng.normal(loc=4, size=(9, 4))
    reps = evaluate_regimes(y + 0.1, y, np.arange(9.0))
    assert [r.regime for r in reps] == ["High", "Med", "Low", "All"]
    assert [r.n_samples for r in reps] == [3, 3, 3, 9]
    write_reports(reps, tmp_path / "m")
    back = read_reports(tmp_path / "m.json")
    assert back == reps
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert header[:6] == ["horizon", "MAE", "RMSE", "MCA", "MCA_clipped", "TVR"]
    json.loads((tmp_path / "m.json").read_text())
    assert isinstance(reps[0], MetricReport)
