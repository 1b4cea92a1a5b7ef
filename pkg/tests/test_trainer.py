import json

import numpy as np
import pytest

from placerec.datasets import WorldConfig, generate_world
from placerec.errors import InsufficientData
from placerec.network import NetworkConfig, build, forward, save_checkpoint
from placerec.sparse import Tape
from placerec.trainer import (
    Adam,
    AdamState,
    TrainConfig,
    adam_update,
    epoch_batches,
    group_size_for,
    lr_at,
    make_loss_fn,
    multistage_gradients,
    multistage_step,
    sample_batch,
    toy_train_config,
    train,
)

from oracles import grads_rel_error, naive_gradients


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(n_locations=8, n_traversals=4, n_test_locations=2,
                                      points_per_cloud=400, seed=1))


@pytest.mark.parametrize("m,loss_kind", [(8, "tsap"), (12, "triplet"), (16, "tsap")])
def test_multistage_matches_naive(world, m, loss_kind):
    model = build(NetworkConfig.toy(), 0)
    cfg = toy_train_config(loss_kind=loss_kind)
    batch = sample_batch(world, m, 3, np.random.default_rng(m), cfg.augment)
    loss_fn = make_loss_fn(cfg)
    ref = naive_gradients(model, batch, loss_fn)
    Tape.reset_counters()
    multistage_gradients(model, batch, loss_fn)
    assert Tape.peak == 1
    got = {p.name: p.grad.copy() for p in model.parameters()}
    assert grads_rel_error(got, ref) < 1e-10


def test_naive_reference_keeps_all_graphs_alive(world):
    # sanity check on the reference itself: it is the memory-hungry variant
    model = build(NetworkConfig.toy(), 0)
    batch = sample_batch(world, 8, 3, np.random.default_rng(0))
    tape = Tape()
    for c in batch.clouds:
        forward(model, c, "train", tape=tape, update_stats=False)
    assert len(tape.nodes) > 8 * 50
    tape.close()


def test_peak_live_tapes_independent_of_batch(world):
    model = build(NetworkConfig.toy(), 0)
    loss_fn = make_loss_fn(toy_train_config())
    for m in (4, 12, 24):
        Tape.reset_counters()
        multistage_gradients(model, sample_batch(world, m, 3, np.random.default_rng(m)), loss_fn)
        assert Tape.peak == 1 and Tape.live == 0


def test_zero_loss_step_is_pure_weight_decay(world):
    model = build(NetworkConfig.toy(), 0)
    before = {p.name: p.value.copy() for p in model.parameters()}
    opt = Adam(model.parameters(), weight_decay=1e-4)
    batch = sample_batch(world, 8, 3, np.random.default_rng(0))
    multistage_step(model, batch, lambda d, rel: (0.0, np.zeros_like(d)), opt, 1e-3)
    for p in model.parameters():
        assert not p.grad.any()
        expected = adam_update(before[p.name], np.zeros_like(p.value), AdamState(np.zeros_like(p.value),
                               np.zeros_like(p.value)), 1e-3, weight_decay=1e-4)
        if p.name == "gem.p":
            expected = np.maximum(expected, 1.0)
        assert np.array_equal(p.value, expected)


def test_sampler_composition(world):
    b = sample_batch(world, 8, 3, np.random.default_rng(0))
    assert len(b.clouds) == 8
    locs = world.location_index[b.indices]
    assert sorted(np.unique(locs, return_counts=True)[1].tolist()) == [4, 4]
    assert b.relations.positive_mask.sum(axis=1).tolist() == [3] * 8
    b2 = sample_batch(world, 8, 3, np.random.default_rng(0))
    assert np.array_equal(b.indices, b2.indices)
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(b.clouds, b2.clouds))


def test_sampler_insufficient(world):
    with pytest.raises(InsufficientData):
        sample_batch(world, 10, 4, np.random.default_rng(0))  # clusters hold only 4 clouds
    assert group_size_for(world, 4) == 3


def test_epoch_drops_remainder(world):
    batches = list(epoch_batches(world, 8, 3, np.random.default_rng(0)))
    assert len(batches) == 6 // 2
    seen = np.concatenate([world.location_index[b.indices] for b in batches])
    assert len(set(seen.tolist())) == 6


def test_adam_zero_grad_no_decay():
    p = np.array([0.3, -2.0])
    out = adam_update(p, np.zeros(2), AdamState(np.zeros(2), np.zeros(2)), 1e-3)
    assert np.array_equal(out, p)


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return theta


def test_adam_single_step():
    out = adam_update(np.zeros(1), np.ones(1), AdamState(np.zeros(1), np.zeros(1)), 1e-3)
    assert out[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)
    assert out[0] == pytest.approx(-9.99999e-4, abs=1e-9)


def test_adam_two_steps():
    st = AdamState(np.zeros(1), np.zeros(1))
    p = np.array([0.5])
    for _ in range(2):
        p = adam_update(p, np.array([0.7]), st, 1e-3)
    assert abs(p[0] - adam_scalar(0.5, [0.7, 0.7], 1e-3)) < 1e-15


def test_lr_schedule():
    cfg = TrainConfig.protocol("baseline")
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(249, cfg) == 1e-3
    assert lr_at(250, cfg) == pytest.approx(1e-4, rel=1e-15)
    assert lr_at(350, cfg) == pytest.approx(1e-5, rel=1e-15)
    lrs = [lr_at(e, cfg) for e in range(400)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert len(set(lrs)) == 3
    refined = TrainConfig.protocol("refined")
    assert (refined.epochs, refined.lr_decay_epochs) == (500, (350, 450))


def test_zero_epochs_leaves_model(world):
    model = build(NetworkConfig.toy(), 0)
    before = [p.value.copy() for p in model.parameters()]
    assert train(model, world, toy_train_config(epochs=0, lr_decay_epochs=())) == []
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.parameters()))


def test_training_is_deterministic(world, tmp_path):
    cfg = toy_train_config(batch_size=8, epochs=2, lr_decay_epochs=(1,))
    outs = []
    for run in range(2):
        model = build(NetworkConfig.toy(), 0)
        log = train(model, world, cfg, log_path=tmp_path / f"log{run}.jsonl")
        save_checkpoint(model, tmp_path / f"m{run}.ckpt")
        outs.append(([(r["loss"], r["lr"]) for r in log], (tmp_path / f"m{run}.ckpt").read_bytes()))
    assert outs[0] == outs[1]
    recs = [json.loads(line) for line in (tmp_path / "log0.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 0, 0, 1, 1, 1]
    assert {"epoch", "step", "loss", "lr", "loss_kind", "wall_ms"} <= set(recs[0])
    assert recs[-1]["lr"] == pytest.approx(5e-4)


def test_triplet_log_records_kind(world, tmp_path):
    cfg = toy_train_config(batch_size=8, epochs=1, lr_decay_epochs=(), loss_kind="triplet")
    train(build(NetworkConfig.toy(), 0), world, cfg, log_path=tmp_path / "l.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert recs and all(r["loss_kind"] == "triplet" for r in recs)


def test_gem_p_clamped(world):
    model = build(NetworkConfig.toy(), 0)

    class Overshoot:
        def step(self, lr):
            model.gem.p.value = np.array([0.2])

    batch = sample_batch(world, 4, 3, np.random.default_rng(0))
    multistage_step(model, batch, make_loss_fn(toy_train_config()), Overshoot(), 1e-3)
    assert model.gem.p.value[0] == 1.0
