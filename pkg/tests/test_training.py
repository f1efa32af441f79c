import math

import numpy as np
import pytest

from volnet import NetConfig, build_network
from volnet.io import degrade, make_phantom
from volnet.network import serialize_network
from volnet.training import (TrainConfig, TrainState, adam_step, core_mask, edge_pad_pair, l1_grad, l1_loss,
                             load_state, loss_and_grads, sample_patch_pairs, save_state, train,
                             validation_loss, write_history)
from conftest import numeric_grad


def test_l1_and_its_gradient(rng):
    sr = rng.standard_normal((2, 1, 4, 4, 4))
    hr = sr.copy()
    hr[0, 0, 0, 0, 0] += 1.0
    assert l1_loss(sr, hr) == pytest.approx(1.0 / sr.size)
    g = l1_grad(sr, hr)
    assert g[0, 0, 0, 0, 0] == -1.0 / sr.size
    assert np.count_nonzero(g) == 1  # ties give zero
    mask = np.zeros((4, 4, 4), bool)
    mask[0, 0, 0] = True
    assert l1_loss(sr, hr, mask) == pytest.approx(0.5)
    assert l1_grad(sr, hr, mask).sum() == pytest.approx(-0.5)


def test_adam_matches_reference_formula():
    cfg = TrainConfig(lr=0.1)
    w = [np.array([1.0, -2.0])]
    st = TrainState.zeros_like(w)
    g = np.array([0.5, -0.25])
    w1 = adam_step(w, [g], st, cfg)
    # bias correction makes the first step exactly lr * sign(g)
    np.testing.assert_allclose(w1[0], w[0] - 0.1 * g / (np.abs(g) + 1e-8))
    w2 = adam_step(w1, [g], st, cfg, lr_scales=[0.0])
    np.testing.assert_array_equal(w2[0], w1[0])
    assert st.step == 2
    with pytest.raises(ValueError):
        adam_step(w, [g, g], st, cfg)


def test_patch_pairs_are_aligned(rng):
    hr = rng.uniform(0, 255, (1, 40, 36, 32)).astype(np.float32)
    lr = hr[:, ::2, ::2, ::2]
    cfg = TrainConfig(batch_size=4, patch_size=8)
    lr_b, hr_b, origins = sample_patch_pairs(lr, hr, cfg, rng)
    assert lr_b.shape == (4, 1, 8, 8, 8) and hr_b.shape == (4, 1, 16, 16, 16)
    for k in range(4):
        np.testing.assert_array_equal(hr_b[k][:, ::2, ::2, ::2], lr_b[k])
    with pytest.raises(ValueError):
        sample_patch_pairs(lr[:, :4], hr[:, :8], cfg, rng)


def test_edge_padding_and_core_mask(rng):
    lr = rng.standard_normal((1, 4, 4, 4))
    hr = rng.standard_normal((1, 8, 8, 8))
    lp, hp = edge_pad_pair(lr, hr, 2, 2)
    assert lp.shape == (1, 8, 8, 8) and hp.shape == (1, 16, 16, 16)
    np.testing.assert_array_equal(lp[:, 0, 2:6, 2:6], lr[:, 0])
    m = core_mask(8, 2, 2)
    assert m.shape == (16, 16, 16) and m.sum() == 8 ** 3


def test_network_gradients_by_finite_differences(rng):
    net = build_network(NetConfig(2, 4, kind="Queue"), rng=0, init="uniform")
    for st in net.stages.values():
        for layer in st.weights.layers:
            layer.weight = layer.weight.astype(np.float64)
    lr_b = rng.uniform(0, 1, (2, 1, 6, 6, 6))
    hr_b = rng.uniform(0, 1, (2, 1, 12, 12, 12))
    _, grads = loss_and_grads(net, lr_b, hr_b)
    params = net.parameters()
    for k in (0, 5, len(params) - 1):
        idx, num = numeric_grad(lambda: loss_and_grads(net, lr_b, hr_b)[0], params[k], 5, rng, eps=1e-7)
        ana = np.array([grads[k][i] for i in idx])
        assert np.max(np.abs(ana - num)) <= 1e-4 * max(1e-3, np.max(np.abs(num)))


@pytest.fixture(scope="module")
def pairs():
    vols = [make_phantom((32, 32, 32), n_blobs=60, seed=s) for s in range(3)]
    return [(degrade(v), v) for v in vols]


def small_run(pairs, **kw):
    pad = kw.pop("edge_pad", 0)
    cfg = TrainConfig(**{**dict(lr=1e-4, batch_size=2, patch_size=8, epoch_batches=3, max_epochs=3), **kw})
    net = build_network(NetConfig(2, 4, kind="Queue", edge_pad=pad), rng=cfg.seed)
    return train(net, pairs[:2], pairs[2:], cfg)


def test_training_history_and_best_snapshot(pairs):
    res = small_run(pairs)
    assert [r.epoch for r in res.history] == [1, 2, 3]
    best = [r.best_val_l1 for r in res.history]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert best[-1] == min(r.val_l1 for r in res.history)
    assert validation_loss(res.net, pairs[2:]) == pytest.approx(best[-1])
    assert res.stop_reason == "max_epochs"


def test_training_is_deterministic(pairs):
    a, b = small_run(pairs, seed=3), small_run(pairs, seed=3)
    assert serialize_network(a.net) == serialize_network(b.net)
    assert [r.train_l1 for r in a.history] == [r.train_l1 for r in b.history]


def test_resume_continues_the_same_trajectory(pairs, tmp_path):
    def cfg(epochs):
        return TrainConfig(lr=1e-4, batch_size=2, patch_size=8, epoch_batches=3, max_epochs=epochs)

    straight = train(build_network(NetConfig(2, 4, kind="Queue"), rng=0), pairs[:2], pairs[2:], cfg(3))
    net = build_network(NetConfig(2, 4, kind="Queue"), rng=0)
    first = train(net, pairs[:2], pairs[2:], cfg(2))  # net now holds the last weights
    save_state(first.state, tmp_path / "s.npz")
    resumed = train(net, pairs[:2], pairs[2:], cfg(3), state=load_state(tmp_path / "s.npz"))
    assert [r.epoch for r in resumed.history] == [3]
    assert resumed.history[0].train_l1 == straight.history[2].train_l1
    assert serialize_network(resumed.net) == serialize_network(straight.net)


def test_patience_stops_training(pairs):
    res = small_run(pairs, lr=0.0, patience=2, max_epochs=10)
    assert res.stop_reason == "patience" and len(res.history) == 3


def test_time_budget_stops_training(pairs):
    assert small_run(pairs, time_budget=0.0, max_epochs=10).stop_reason == "time_budget"


def test_edge_pad_training_runs(pairs):
    res = small_run(pairs, edge_pad=2)
    assert all(math.isfinite(r.val_l1) for r in res.history)


def test_divergence_is_reported(pairs):
    with pytest.raises(FloatingPointError):
        small_run([(lr * np.nan, hr) for lr, hr in pairs])


@pytest.mark.parametrize("kw", [dict(patience=0), dict(patch_size=4), dict(lr=-1.0), dict(batch_size=0),
                                dict(extract_lr_scale=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_state_and_history_files(tmp_path, pairs):
    res = small_run(pairs)
    save_state(res.state, tmp_path / "s.npz")
    back = load_state(tmp_path / "s.npz")
    assert (back.step, back.epoch, back.best_val) == (res.state.step, res.state.epoch, res.state.best_val)
    assert back.rng_state == res.state.rng_state
    for a, b in zip(back.m + back.v + back.best_weights, res.state.m + res.state.v + res.state.best_weights):
        np.testing.assert_array_equal(a, b)
    write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_l1,val_l1,best_val_l1,seconds" and len(lines) == 4
