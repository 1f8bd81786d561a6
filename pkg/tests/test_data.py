import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dspr.data import (
    ConservationConfig,
    IngestSchema,
    SeriesDataset,
    TransportDelayConfig,
    count_windows,
    gen_conservation,
    gen_transport_delay,
    ingest_csv,
    normalized_f_cons,
    segment_bounds,
    split_windows,
    write_csv,
)
from dspr.errors import ConfigError, ContractError, ParseError, SchemaError
from dspr.metrics import mca


def xcorr_peak(u, y, max_lag=19):
    """Lag maximising the sample correlation of u[t-k] and y[t]."""
    scores = [np.corrcoef(u[max_lag - k:len(u) - k], y[max_lag:])[0, 1] for k in range(max_lag + 1)]
    return int(np.argmax(scores))


def test_single_regime_xcorr_peak():
    ds = gen_transport_delay(T=4000, seed=0, lag_regimes=[(1.0, 4)], noise_std=0.0, gain_x=0.0)
    u, y = ds.values[:, 0], ds.values[:, ds.target]
    assert xcorr_peak(u, y) == 4


def test_two_regime_xcorr_peaks_per_regime():
    ds = gen_transport_delay(T=20000, seed=1, lag_regimes=[(1.0, 12), (2.0, 4)])
    u, y = ds.values[:, 0], ds.values[:, ds.target]
    for r, want in ((0, 12), (1, 4)):
        mask = ds.regime == r
        best = max(range(20), key=lambda k: np.corrcoef(u[20 - k:len(u) - k][mask[20:]],
                                                        y[20:][mask[20:]])[0, 1])
        assert best == want
        assert np.all(ds.true_tau[mask] == want)


def test_generation_is_deterministic_and_resimulable():
    a = gen_transport_delay(T=2000, seed=7)
    b = gen_transport_delay(T=2000, seed=7)
    assert np.array_equal(a.values, b.values)
    again = gen_transport_delay(TransportDelayConfig(**a.generator["params"]))
    assert np.array_equal(a.values, again.values)
    assert not np.array_equal(a.values, gen_transport_delay(T=2000, seed=8).values)
    c = gen_conservation(T=500, seed=3)
    assert np.array_equal(c.values, gen_conservation(ConservationConfig(**c.generator["params"])).values)


def test_transport_delay_ground_truth_metadata():
    ds = gen_transport_delay(T=1000, seed=0)
    assert ds.names == ["u", "v", "x", "z1", "z2", "y"]
    names = {(ds.names[s], ds.names[d]) for s, d in ds.true_edges}
    assert {("u", "y"), ("x", "y"), ("v", "y")} <= names
    ds.prior.validate()
    A = ds.prior.adjacency
    for s, d in ds.true_edges:
        assert A[s, d] == 1.0


@pytest.mark.parametrize("regimes", [[], [(1.0, 4), (2.0, 4)], [(1.0, 0)], [(1.0, 25)]])
def test_invalid_regimes(regimes):
    with pytest.raises(ConfigError):
        gen_transport_delay(T=500, lag_regimes=regimes)


def test_conservation_identities():
    ds = gen_conservation(T=3000, seed=0)
    L, H = 16, 4
    d = ds.f_cons.delay
    x = ds.values
    starts = np.arange(0, len(x) - L - H, 7)
    X = np.stack([x[s:s + L] for s in starts])
    Y = np.stack([x[s + L:s + L + H, ds.target] for s in starts])[..., None]
    pred = ds.f_cons(X, H)
    assert np.abs(pred - Y).max() < 1e-10
    assert mca(pred[..., 0], Y[..., 0]) >= 99.9
    assert d == 8


def test_zero_leak_running_sums():
    ds = gen_conservation(T=2000, seed=1, leak=0.0)
    d = ds.f_cons.delay
    inflow = ds.values[:, :2].sum(axis=1)
    out = ds.values[:, ds.target]
    assert abs(np.cumsum(inflow[:-d])[-1] - np.cumsum(out[d:])[-1]) < 1e-8


def test_normalized_f_cons_matches_normalized_targets():
    ds = gen_conservation(T=2000, seed=2)
    sp = split_windows(ds, 16, 4)
    f = normalized_f_cons(ds, sp.normalizer, 4)
    assert np.abs(f(sp.test.X) - sp.test.Y).max() < 1e-9


def test_conservation_rejects_long_horizon():
    ds = gen_conservation(T=200, seed=0)
    with pytest.raises(ConfigError):
        ds.f_cons(np.zeros((1, 16, 4)), 9)


# -- ingestion


def write_raw(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(r) for r in rows) + "\n")


def test_ingest_midpoint_and_fills(tmp_path):
    p = tmp_path / "raw.csv"
    write_raw(p, ["a", "y"], [["", "1"], ["1", "2"], ["", "3"], ["3", "4"], ["", "5"]])
    ds = ingest_csv(p, {"target": "y", "outlier_sigma": None})
    assert ds.values[:, 0].tolist() == [1.0, 1.0, 2.0, 3.0, 3.0]


def test_ingest_outlier_replaced(tmp_path):
    base = np.tile([0.0, 1.0, 0.0, -1.0], 50)
    sd = base.std()
    col = base.copy()
    col[101] = 5.0 * sd     # z = 5 under the known statistics (mean 0)
    p = tmp_path / "raw.csv"
    write_raw(p, ["a", "y"], [[repr(float(a)), "0"] for a in col])
    ds = ingest_csv(p, IngestSchema(target="y", stats_fraction=1.0))
    assert ds.values[101, 0] == pytest.approx(0.5 * (col[100] + col[102]))
    assert np.array_equal(np.delete(ds.values[:, 0], 101), np.delete(col, 101))


def test_ingest_nonnegative_clamp(tmp_path):
    p = tmp_path / "raw.csv"
    write_raw(p, ["power", "y"], [["-0.5", "1"], ["2", "1"], ["1", "2"]])
    ds = ingest_csv(p, {"target": "y", "nonnegative": ["power"], "outlier_sigma": None})
    assert ds.values[:, 0].tolist() == [0.0, 2.0, 1.0]


def test_ingest_round_trip(tmp_path):
    ds = gen_transport_delay(T=300, seed=4)
    write_csv(tmp_path / "d.csv", ds.names, ds.values)
    back = ingest_csv(tmp_path / "d.csv", {"target": "y", "outlier_sigma": None})
    assert np.array_equal(back.values, ds.values)
    ds.save(tmp_path / "saved")
    again = SeriesDataset.load(tmp_path / "saved")
    assert np.array_equal(again.values, ds.values)
    assert np.array_equal(again.true_tau, ds.true_tau) and np.array_equal(again.regime, ds.regime)
    assert np.array_equal(again.prior.adjacency, ds.prior.adjacency)
    assert again.true_edges == ds.true_edges


def test_ingest_errors(tmp_path):
    p = tmp_path / "bad.csv"
    write_raw(p, ["a", "y"], [["1", "2"], ["abc", "3"]])
    with pytest.raises(ParseError, match=r"row 3.*'a'"):
        ingest_csv(p, {"target": "y"})
    write_raw(p, ["a", "y"], [["", "2"], ["", "3"]])
    with pytest.raises(SchemaError):
        ingest_csv(p, {"target": "y"})
    write_raw(p, ["a", "b"], [["1", "2"]])
    with pytest.raises(SchemaError):
        ingest_csv(p, {"target": "y"})


# -- splitting


def test_split_counting_oracle():
    ds = gen_transport_delay(T=100, seed=0)
    L, H = 8, 4
    sp = split_windows(ds, L, H, strides=(1, 1, 1))
    assert sp.bounds == [(0, 60), (60, 80), (80, 100)]
    for b, (lo, hi) in zip((sp.train, sp.val, sp.test), sp.bounds):
        assert len(b) == (hi - lo) - L - H + 1
        assert b.start.min() == lo and b.start.max() + L + H == hi
    sp = split_windows(ds, L, H)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (49, 3, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(12, 400), st.integers(1, 10), st.integers(1, 6), st.integers(1, 5))
def test_count_windows_formula(n, L, H, stride):
    brute = sum(1 for s in range(0, n, stride) if s + L + H <= n)
    assert count_windows(n, L, H, stride) == brute


def test_normalization_fit_on_train_only():
    ds = gen_transport_delay(T=3000, seed=2)
    sp = split_windows(ds, 24, 4, strides=(1, 1, 1))
    lo, hi = sp.bounds[0]
    z = sp.normalizer.apply(ds.values[lo:hi])
    assert np.abs(z.mean(axis=0)).max() < 1e-12
    assert np.abs(z.std(axis=0) - 1).max() < 1e-12
    # first train window row equals the normalised raw row
    assert np.allclose(sp.train.X[0], z[:24])


def test_no_leakage_between_splits():
    ds = gen_transport_delay(T=2000, seed=3)
    L, H = 24, 4
    sp = split_windows(ds, L, H)
    used = []
    for b in (sp.train, sp.val, sp.test):
        used.append({int(s) + k for s in b.start for k in range(L + H)})
    assert not (used[0] & used[1]) and not (used[0] & used[2]) and not (used[1] & used[2])


def test_split_errors():
    ds = gen_transport_delay(T=60, seed=0)
    with pytest.raises(ContractError):
        split_windows(ds, 24, 4)
    with pytest.raises(ContractError):
        segment_bounds(100, (0.5, 0.5))


def test_window_ground_truth_alignment():
    ds = gen_transport_delay(T=1000, seed=5)
    sp = split_windows(ds, 24, 4)
    b = sp.test
    s = int(b.start[3])
    assert np.array_equal(b.true_tau[3], ds.true_tau[s:s + 24])
    assert b.regime[3] == ds.regime[s + 23]
    y = ds.values[s:s + 28, ds.target]
    assert b.sample_std[3] == pytest.approx(sp.normalizer.apply(ds.values[s:s + 28])[:, ds.target].std())
    assert np.allclose(sp.normalizer.invert(b.X[3])[:, ds.target], y[:24])
