import numpy as np
import pytest

from gridflow import autodiff as ad
from gridflow.datagen import Snapshot
from gridflow.encoding import build_feature_batch
from gridflow.grid import Carrier, Generator, Link, Network, Node, t_hop_mask
from gridflow.nn import (
    AttentionModel, ModelConfig, gsat_forward, init_params, load_checkpoint, mlp_forward, model_forward,
    nlat_forward, param_shapes, save_checkpoint,
)
from gridflow.train import LossContext, TrainingData, batch_loss
from helpers import random_grid
from oracles import central_difference, gsat_loops, mlp_loops, nlat_loops

SMALL = ModelConfig(m=2, hops=(1, 2), latent=4, qk_dim=3, link_dim=5, mlp_hidden=(4,))


def path3():
    return Network([Node("a"), Node("b"), Node("c")],
                   [Link("ab", "a", "b", 10.0), Link("cb", "c", "b", 20.0)],
                   [Generator("s", "a", Carrier.SOLAR, 8.0, 0.01), Generator("o", "c", Carrier.OCGT, 12.0, 121.89)])


def random_params(seed, shapes):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(scale=0.7, size=s) for k, s in shapes.items()}


def features(rng, model, n):
    return rng.uniform(0, 1, (n, model.config.n_features, model.network.n_nodes))


def test_gsat_singleton_window():
    w = np.random.default_rng(0).normal(size=(1, 3, 2))
    params = {"gsat.W.0": w, "gsat.a.0": np.ones(4)}
    h = np.array([[1.0], [2.0], [-1.0]])
    out, att = gsat_forward(h, params, np.ones((1, 1, 1), bool))
    assert att[0].tolist() == [[1.0]]
    assert np.array_equal(out[:, 0], w[0].T @ h[:, 0])


def test_gsat_uniform_on_symmetric_complete_graph():
    n, f, fl = 4, 3, 2
    w = np.tile(np.random.default_rng(1).normal(size=(1, f, fl)), (n, 1, 1))
    h = np.tile(np.array([[0.3], [0.1], [0.7]]), (1, n))
    _, att = gsat_forward(h, {"gsat.W.0": w, "gsat.a.0": np.ones(2 * fl)}, np.ones((1, n, n), bool))
    assert np.allclose(att[0], 1.0 / n, atol=1e-15)


def test_gsat_matches_loops():
    net = path3()
    rng = np.random.default_rng(2)
    masks = np.stack([t_hop_mask(net, 0), t_hop_mask(net, 1)])
    params = {f"gsat.W.{k}": rng.normal(size=(3, 5, 4)) for k in range(2)}
    params |= {f"gsat.a.{k}": rng.normal(size=8) for k in range(2)}
    h = rng.normal(size=(5, 3))
    out, att = gsat_forward(h, params, masks)
    ref, ref_att = gsat_loops(h, [params["gsat.W.0"], params["gsat.W.1"]],
                              [params["gsat.a.0"], params["gsat.a.1"]], masks)
    assert np.abs(out - ref).max() <= 1e-12
    for a, b, mask in zip(att, ref_att, masks):
        assert np.abs(a - b).max() <= 1e-12
        assert np.all(a[~mask] == 0.0)


def test_nlat_single_node_and_loops():
    rng = np.random.default_rng(3)
    params = {"nlat.WQ": rng.normal(size=(2, 2, 3)), "nlat.WK": rng.normal(size=(1, 4, 3)),
              "nlat.WV": rng.normal(size=(1, 4, 5))}
    h2 = rng.normal(size=(4, 1))
    r, alpha = nlat_forward(h2, rng.normal(size=(2, 2)), params)
    assert np.all(alpha == 1.0)
    assert np.allclose(r, np.tile(params["nlat.WV"][0].T @ h2[:, 0:1], (1, 2)), atol=1e-14)

    params = {"nlat.WQ": rng.normal(size=(1, 2, 3)), "nlat.WK": rng.normal(size=(2, 4, 3)),
              "nlat.WV": rng.normal(size=(2, 4, 5))}
    h2, p_link = rng.normal(size=(4, 2)), rng.normal(size=(2, 1))
    r, alpha = nlat_forward(h2, p_link, params)
    ref_r, ref_alpha = nlat_loops(h2, p_link, params["nlat.WQ"], params["nlat.WK"], params["nlat.WV"])
    assert np.abs(r - ref_r).max() <= 1e-12 and np.abs(alpha - ref_alpha).max() <= 1e-12


def test_mlp_zero_weights_and_hand_fixture():
    shapes = {"mlp.W.0": (2, 2), "mlp.b.0": (2,), "mlp.W_out": (2, 1), "mlp.b_out": (1,)}
    zero = {k: np.zeros(s) for k, s in shapes.items()}
    assert np.all(mlp_forward(np.ones((2, 3)), zero) == 0.0)
    params = {"mlp.W.0": np.array([[1.0, -1.0], [0.5, 2.0]]), "mlp.b.0": np.array([0.0, -1.0]),
              "mlp.W_out": np.array([[1.0], [0.5]]), "mlp.b_out": np.array([0.25])}
    r = np.array([[1.0], [1.0]])
    # hidden: [1.5, 1.0 - 1.0 = 0.0 -> leaky 0], out: tanh(1.5 + 0 + 0.25)
    assert mlp_forward(r, params)[0] == pytest.approx(np.tanh(1.75), abs=1e-15)
    ref = mlp_loops(r, [params["mlp.W.0"]], [params["mlp.b.0"]], params["mlp.W_out"], params["mlp.b_out"])
    assert np.abs(mlp_forward(r, params) - ref).max() <= 1e-15


def test_mlp_outputs_strictly_bounded():
    rng = np.random.default_rng(4)
    shapes = {"mlp.W.0": (3, 3), "mlp.b.0": (3,), "mlp.W_out": (3, 1), "mlp.b_out": (1,)}
    r = rng.normal(size=(3, 4))
    worst = 0.0
    for _ in range(2000):
        p = {k: rng.normal(scale=20.0, size=s) for k, s in shapes.items()}
        worst = max(worst, np.abs(mlp_forward(r, p)).max())
    assert worst < 1.0


def test_model_matches_straight_line_recomputation():
    net = path3()
    model = AttentionModel(net, SMALL, params=random_params(5, param_shapes(SMALL, 3, 2)))
    h = features(np.random.default_rng(5), model, 1)[0]
    f_hat, rec = model_forward(model, h)
    p = model.params
    h2, _ = gsat_loops(h, [p["gsat.W.0"], p["gsat.W.1"]], [p["gsat.a.0"], p["gsat.a.1"]], model.masks)
    r, alpha = nlat_loops(h2, model.p_link, p["nlat.WQ"], p["nlat.WK"], p["nlat.WV"])
    ref = mlp_loops(r, [p["mlp.W.0"]], [p["mlp.b.0"]], p["mlp.W_out"], p["mlp.b_out"])
    assert np.abs(f_hat - ref).max() <= 1e-12
    assert np.abs(rec.link_att - alpha).max() <= 1e-12


def test_forward_deterministic_and_link_equivariant():
    net = random_grid(np.random.default_rng(6), 5, 6)
    model = AttentionModel(net, SMALL, seed=6)
    h = features(np.random.default_rng(7), model, 2)
    a, _ = model.forward(h)
    b, _ = model.forward(h)
    assert np.array_equal(a, b)
    perm = np.array([3, 0, 5, 1, 4, 2])
    pnet = Network(net.nodes, [net.links[i] for i in perm], net.generators)
    params = dict(model.params)
    params["nlat.WQ"] = model.params["nlat.WQ"][perm]
    pmodel = AttentionModel(pnet, SMALL, params=params, encoding=model.encoding)
    assert np.allclose(pmodel.forward(h)[0], a[:, perm], atol=1e-14)


def test_attention_masks_respect_hops():
    net = random_grid(np.random.default_rng(8), 8, 9)
    model = AttentionModel(net, ModelConfig(m=3, hops=(0, 1, 3), latent=4, qk_dim=3, link_dim=4), seed=1)
    _, rec = model.forward(features(np.random.default_rng(9), model, 5))
    for k, t in enumerate((0, 1, 3)):
        mask = t_hop_mask(net, t)
        att = rec.node_att[k]
        assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(att[:, ~mask] == 0.0)
    assert np.allclose(rec.link_att.sum(axis=-1), 1.0, atol=1e-12)


def test_init_params():
    shapes = param_shapes(SMALL, 3, 2)
    a, b = init_params(3, shapes), init_params(3, shapes)
    assert all(np.array_equal(a[k], b[k]) for k in shapes)
    assert all(np.all(a[k] == 0) for k in shapes if ".b" in k)
    assert max(np.abs(v).max() for v in a.values()) <= np.sqrt(6)
    for k, v in a.items():
        if ".b" in k:
            continue
        fan_in, fan_out = (v.shape[0], 1) if k.startswith("gsat.a") else v.shape[-2:]
        assert np.abs(v).max() <= np.sqrt(6 / (fan_in + fan_out))


def test_init_mean_statistics():
    vals = init_params(0, {"w": (1000, 1000)})["w"].ravel()
    limit = np.sqrt(6 / 2000)
    sigma = limit / np.sqrt(3)
    assert abs(vals.mean()) <= 3 * sigma / np.sqrt(vals.size)


def test_hops_validation():
    with pytest.raises(ValueError):
        ModelConfig(hops=(3, 1))


def _loss_setup(seed=0):
    net = path3()
    model = AttentionModel(net, SMALL, params=random_params(seed, param_shapes(SMALL, 3, 2)))
    rng = np.random.default_rng(seed)
    n = 4
    data = TrainingData(features(rng, model, n), rng.uniform(-1, 1, (n, 2)),
                        rng.uniform(0, 30, (n, 3)), np.tile([8.0, 0.0, 12.0], (n, 1)))
    return model, data, LossContext.for_network(net)


def test_gradients_match_finite_differences():
    model, data, ctx = _loss_setup()
    alpha = 1e-3
    dp = {k: ad.DiffArray(v, requires_grad=True) for k, v in model.params.items()}
    grads = ad.gradients(batch_loss(model, dp, data, ctx, alpha), dp)

    def f(params):
        return float(batch_loss(model, {k: ad.DiffArray(v) for k, v in params.items()}, data, ctx, alpha).value)

    params = {k: v.copy() for k, v in model.params.items()}
    rng = np.random.default_rng(1)
    for name in params:
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in params[name].shape)
            num = central_difference(f, params, name, idx, 1e-5)
            assert grads[name][idx] == pytest.approx(num, rel=1e-4, abs=1e-8), name


def test_checkpoint_roundtrip(tmp_path):
    net = path3()
    model = AttentionModel(net, SMALL, seed=3)
    save_checkpoint(tmp_path / "c.npz", model, demand_max=np.array([1.0, 2.0, 3.0]), seed=3)
    back = load_checkpoint(tmp_path / "c.npz", net)
    assert all(np.array_equal(back.model.params[k], model.params[k]) for k in model.params)
    assert back.model.config == model.config and back.seed == 3
    assert np.array_equal(back.model.encoding.matrix, model.encoding.matrix)
    other = Network(net.nodes, [Link("ab", "a", "b", 99.0), net.links[1]], net.generators)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.npz", other)
    save_checkpoint(tmp_path / "d.npz", model, demand_max=np.array([1.0, 2.0, 3.0]), seed=3)
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_features_feed_model_batch():
    net = path3()
    model = AttentionModel(net, SMALL, seed=0)
    snaps = [Snapshot(i, np.ones(3), np.full(3, 0.5), np.full(3, 0.5)) for i in range(3)]
    h = build_feature_batch(snaps, np.full(3, 2.0), model.encoding, net)
    assert model.predict(h, batch_size=2).shape == (3, 2)
