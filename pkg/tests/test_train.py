import csv

import numpy as np
import pytest

from gridflow.datagen import Snapshot, make_dataset, synth_network, synth_series
from gridflow.encoding import build_feature_batch
from gridflow.evaluate import maape
from gridflow.grid import Carrier, Generator, Link, Network, Node
from gridflow.nn import ModelConfig
from gridflow.oracle import solve_dcopf
from gridflow.train import (
    LOG_COLUMNS, DataLabelError, TrainConfig, TrainState, adam_step, loss, lr_schedule, normalize_labels,
    split_validation, train,
)

TINY = ModelConfig(m=2, hops=(0, 1), latent=6, qk_dim=4, link_dim=6, mlp_hidden=(8,))


def two_node():
    return Network([Node("a"), Node("b")], [Link("ab", "a", "b", 10.0)],
                   [Generator("w", "a", Carrier.WIND, 10.0, 0.015), Generator("c", "b", Carrier.COAL, 10.0, 125.0)])


def test_lr_schedule_values():
    assert lr_schedule(0) == pytest.approx(1e-3, abs=1e-15)
    assert lr_schedule(50) == pytest.approx(4.182e-4, abs=1e-6)
    assert all(lr_schedule(s) == pytest.approx(1e-4, abs=1e-15) for s in (100, 101, 10_000))
    vals = [lr_schedule(s) for s in range(120)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_normalize_labels():
    net = two_node()
    assert normalize_labels(net, [[5.0], [-10.0]]).tolist() == [[0.5], [-1.0]]
    assert normalize_labels(net, [[10.0 + 1e-9]])[0, 0] == 1.0
    with pytest.raises(DataLabelError, match="ab"):
        normalize_labels(net, [[10.5]])


def test_loss_examples():
    net = two_node()
    s = Snapshot(0, np.array([0.0, 6.0]), np.ones(2), np.ones(2))
    assert loss([0.6], [0.6], s, net) == 0.0
    assert loss([1.0], [0.0], s, net, alpha=0.0) == pytest.approx(np.log(np.cosh(1.0)), abs=1e-12)
    assert np.log(np.cosh(1.0)) == pytest.approx(0.4338, abs=1e-4)
    # f = -1 sends 10 MW into a: node b needs 16 MW from 10 MW of coal, node a absorbs 10 it cannot
    base = loss([-1.0], [-1.0], s, net, alpha=0.0)
    pen1, pen2 = (loss([-1.0], [-1.0], s, net, alpha=a) - base for a in (1.0, 2.0))
    assert pen1 == pytest.approx((10.0**2 + 6.0**2) / 2)
    assert pen2 == pytest.approx(2 * pen1)


def test_logcosh_stable_for_large_errors():
    net = Network([Node("a"), Node("b")], [Link("ab", "a", "b", 1.0)])
    s = Snapshot(0, np.zeros(2), np.zeros(2), np.zeros(2))
    assert loss([800.0], [0.0], s, net, alpha=0.0) == pytest.approx(800.0 - np.log(2.0))


def test_adam_zero_gradient_and_constant_gradient():
    state = TrainState.fresh({"w": np.array([1.0, -2.0])})
    adam_step(state, {"w": np.zeros(2)}, 1e-3)
    assert state.params["w"].tolist() == [1.0, -2.0] and state.step == 1
    state = TrainState.fresh({"w": np.zeros(1)})
    prev = 0.0
    for _ in range(200):
        adam_step(state, {"w": np.array([3.0])}, 1e-3)
        step = prev - state.params["w"][0]
        prev = state.params["w"][0]
    assert step == pytest.approx(1e-3, rel=1e-5)
    with pytest.raises(FloatingPointError):
        adam_step(state, {"w": np.array([np.nan])}, 1e-3)


@pytest.fixture(scope="module")
def tiny_data():
    net = synth_network(1, 4)
    snaps = synth_series(1, net, 60)
    ds = make_dataset(net, snaps, 1)
    flows = np.array([solve_dcopf(net, s).flows for s in snaps])
    return ds, flows


def test_training_reduces_loss_and_is_deterministic(tiny_data, tmp_path):
    ds, flows = tiny_data
    cfg = TrainConfig(epochs=15, batch_size=8, seed=2)
    a = train(ds, flows, cfg, TINY, log_path=tmp_path / "log.csv")
    b = train(ds, flows, cfg, TINY)
    assert a.log[-1]["train_loss"] < a.log[0]["train_loss"]
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 16
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 16))


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    ds, flows = tiny_data
    cfg = TrainConfig(epochs=8, batch_size=8, seed=3)
    full = train(ds, flows, cfg, TINY)
    train(ds, flows, cfg, TINY, checkpoint_path=tmp_path / "c.npz", max_epochs=4)
    rest = train(ds, flows, cfg, TINY, resume=tmp_path / "c.npz")
    assert rest.state.epoch == 8 and rest.state.step == full.state.step
    for k in full.state.params:
        assert np.array_equal(full.state.params[k], rest.state.params[k])
        assert np.array_equal(full.model.params[k], rest.model.params[k])


def test_overfits_ten_snapshots():
    # a hub feeding two loads: every label is nonzero, so MAAPE can approach 0
    net = Network([Node("a"), Node("b"), Node("c")],
                  [Link("ab", "a", "b", 100.0), Link("ac", "a", "c", 100.0)],
                  [Generator("w", "a", Carrier.WIND, 300.0, 0.015), Generator("c1", "b", Carrier.COAL, 50.0, 125.0),
                   Generator("c2", "c", Carrier.COAL, 50.0, 125.0)])
    rng = np.random.default_rng(0)
    snaps = [Snapshot(i, np.array([0.0, *rng.uniform(10, 90, 2)]), np.full(3, rng.uniform(0.6, 1.0)), np.zeros(3))
             for i in range(12)]
    ds = make_dataset(net, snaps, 0)  # 1 test, 1 validation, 10 fitted
    flows = np.array([solve_dcopf(net, s).flows for s in snaps])
    cfg = TrainConfig(epochs=2000, batch_size=16, early_stop=False, seed=0)
    res = train(ds, flows, cfg, ModelConfig(m=2))
    fit_idx, _ = split_validation(ds.train, cfg.val_fraction)
    assert len(fit_idx) == 10 and np.all(flows > 1.0)
    h = build_feature_batch(ds.subset(fit_idx), ds.demand_max, res.model.encoding, net)
    assert maape(flows[fit_idx] / net.f_nom, res.model.predict(h)) < 0.05
