import json

import numpy as np
import pytest

from dspr.data import SeriesDataset, gen_transport_delay, split_windows
from dspr.errors import ConfigError, ContractError
from dspr.graph_static import build_prior
from dspr.training import (
    RunRecord,
    TrainConfig,
    ablation_table,
    adam_state,
    adam_step,
    arx_predict,
    build_model,
    clip_by_global_norm,
    fit_arx,
    predict,
    stability_scores,
    top_edges,
    train,
)

SMALL = dict(d_model=8, trend_d_model=8, trend_depth=1, ma_kernel=5, tau_max=8)


# -- Adam


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    st = adam_state()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_sign_times_lr():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(p, {"w": np.array([3.0, -0.001, 1e4])}, adam_state(), lr=0.01, eps=0.0)
    assert np.allclose(p["w"], [0.99, 1.01, 0.99], atol=1e-15)


def test_adam_three_hand_steps():
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    p = {"w": np.array([0.5])}
    st = adam_state()
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        adam_step(p, {"w": np.array([g])}, st, lr=lr, betas=(b1, b2), eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"][0] == pytest.approx(w, abs=1e-15)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    clip_by_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(variant="nope")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    assert TrainConfig.from_dict({**TrainConfig(lr=0.01).to_dict(), "junk": 1}).lr == 0.01


# -- training loop


def ar_dataset(n=1500, phi=0.9, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros(n)
    for t in range(1, n):
        y[t] = phi * y[t - 1] + rng.normal()
    x = rng.normal(size=n)
    prior = build_prior(["actuator", "target"], names=["x", "y"])
    return SeriesDataset(names=["x", "y"], values=np.column_stack([x, y]), period=60.0, target=1,
                         prior=prior)


def test_trend_only_beats_last_value_on_ar1():
    # long enough that the optimal forecast (0.9^h * last) measurably beats persistence
    ds = ar_dataset(n=5000)
    sp = split_windows(ds, 16, 4)
    cfg = TrainConfig(epochs=50, lr=3e-3, seed=0, patience=50, steps_per_epoch=30)
    rec, model = train("trend_only", ds, cfg, splits=sp, model_kw=SMALL)
    naive = np.repeat(sp.val.X[:, -1:, 1], 4, axis=1)
    naive_mae = np.abs(naive - sp.val.Y[..., 0]).mean()
    assert rec.metrics["val"]["MAE"] < naive_mae


def test_gate_identity_at_epoch_zero():
    ds = gen_transport_delay(T=800, seed=0)
    sp = split_windows(ds, 12, 4)
    full = build_model(ds, 12, 4, "full", seed=3, **SMALL)
    p = predict(full, sp.test)
    assert np.abs(p["y_hat"] - p["y_base"]).max() < 1e-3
    only = build_model(ds, 12, 4, "trend_only", seed=3, **SMALL)
    q = predict(only, sp.test)
    assert np.array_equal(q["y_hat"], q["y_base"])
    assert np.array_equal(q["y_base"], p["y_base"])


def test_same_seed_gives_identical_records(tmp_path):
    ds = gen_transport_delay(T=800, seed=1)
    cfg = TrainConfig(epochs=2, seed=4, steps_per_epoch=5)
    r1, _ = train("full", ds, cfg, lookback=12, model_kw=SMALL)
    r2, _ = train("full", ds, cfg, lookback=12, model_kw=SMALL)
    assert json.dumps(r1.to_json(), sort_keys=True) == json.dumps(r2.to_json(), sort_keys=True)
    r1.save(tmp_path / "run.json")
    assert RunRecord.load(tmp_path / "run.json").to_json() == r1.to_json()
    r3, _ = train("full", ds, TrainConfig(epochs=2, seed=5, steps_per_epoch=5), lookback=12,
                  model_kw=SMALL)
    assert r3.train_loss != r1.train_loss


def test_record_tracks_gate_and_best_epoch():
    ds = gen_transport_delay(T=800, seed=2)
    rec, model = train("full", ds, TrainConfig(epochs=3, steps_per_epoch=5), lookback=12,
                       model_kw=SMALL)
    assert len(rec.gate) == len(rec.val_loss) + 1
    assert rec.gate[0] == pytest.approx(1 / (1 + np.exp(8)))
    assert rec.val_loss[rec.best_epoch] == min(rec.val_loss)
    assert set(rec.extras["tau_by_regime"]) <= {"0", "1"}
    A = np.array(rec.extras["A_dynamic_mean"])
    assert np.all(np.diag(A) == 0) and np.allclose(A.sum(axis=1), 1.0)


def test_ablation_table_convention():
    mk = lambda mae: RunRecord("v", {}, {}, metrics={"test": {"MAE": mae, "RMSE": 2 * mae}})
    rows = ablation_table({"full": mk(1.0), "no_prior": mk(1.0584)})
    assert rows[1]["dMAE_pct"] == pytest.approx(5.84)
    assert rows[0]["dMAE_pct"] == 0.0


# -- ARX


def test_arx_recovers_noiseless_ar1():
    y = 0.7 ** np.arange(60) * 3.0 + 0.0
    arx = fit_arx(y, order_p=1, order_q=1)
    assert abs(arx.a[0] - 0.7) < 1e-6


def test_arx_white_noise():
    y = np.random.default_rng(0).normal(loc=2.0, size=20000)
    arx = fit_arx(y, order_p=2, order_q=1)
    assert np.abs(arx.a).max() < 0.05 and abs(arx.c - 2.0) < 0.1
    f = arx.forecast(y[-10:], np.zeros((10, 0)), 5)
    assert np.abs(f - 2.0).max() < 0.3


def test_arx_zero_coefficients_forecast_intercept():
    from dspr.training import ARXModel
    m = ARXModel(a=np.zeros(2), b=np.zeros((3, 1)), c=1.5)
    f = m.forecast(np.random.default_rng(0).normal(size=(4, 8)),
                   np.random.default_rng(1).normal(size=(4, 8, 1)), 6)
    assert np.array_equal(f, np.full((4, 6), 1.5))


def test_arx_exogenous_lag_and_ridge_flag():
    rng = np.random.default_rng(0)
    u = rng.normal(size=500)
    y = np.zeros(500)
    y[3:] = 2.0 * u[:-3]
    arx = fit_arx(y, u[:, None], order_p=1, order_q=4)
    assert np.allclose(arx.b[:, 0], [0, 0, 2.0, 0], atol=1e-7)
    const = fit_arx(np.ones(50), np.ones((50, 1)), 1, 1)   # singular design
    assert const.ridge
    with pytest.raises(ContractError):
        fit_arx(y, order_p=0)


def test_arx_variant_trains_and_predicts():
    ds = gen_transport_delay(T=1500, seed=0)
    sp = split_windows(ds, 24, 4)
    rec, arx = train("arx", ds, TrainConfig(variant="arx"), splits=sp)
    yh = arx_predict(arx, sp.test, ds.target, 4)
    assert yh.shape == sp.test.Y[..., 0].shape
    assert rec.metrics["test"]["MAE"] == pytest.approx(np.abs(yh - sp.test.Y[..., 0]).mean())


# -- mechanism stability


def test_identical_runs_are_perfectly_stable():
    A = np.random.default_rng(0).uniform(size=(6, 6))
    assert stability_scores([A, A.copy(), A.copy()]) == (1.0, 1.0)


def test_random_matrices_are_unstable():
    rng = np.random.default_rng(1)
    jac = [stability_scores([rng.uniform(size=(7, 7)), rng.uniform(size=(7, 7))])[0]
           for _ in range(400)]
    # expected overlap of two random 5-subsets of 42 edges is about 0.07
    assert np.mean(jac) < 0.2
    with pytest.raises(ContractError):
        stability_scores([np.eye(3)])


def test_top_edges_ignore_diagonal_and_break_ties_by_position():
    A = np.full((3, 3), 0.5)
    np.fill_diagonal(A, 9.0)
    assert top_edges(A, 2) == {(0, 1), (0, 2)}
