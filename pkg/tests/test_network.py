import json
import struct

import numpy as np
import pytest

from placerec.errors import ConfigHashMismatch, CorruptFile, EmptyCloud, InvalidConfig
from placerec.geometry import VoxelizedCloud, quantize
from placerec.gradcheck import network_check
from placerec.network import (
    NetworkConfig,
    build,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from placerec.sparse import Tape


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(0)
    return quantize(rng.uniform(-0.4, 0.4, size=(600, 3)), 0.01)


def trace_of(model, cloud):
    tr = []
    forward(model, cloud, trace=tr)
    return {name: (stride, ch) for name, stride, ch, _ in tr}


def test_default_block_strides_and_channels(cloud):
    model = build(NetworkConfig(), 0)
    tr = trace_of(model, cloud)
    assert [tr[f"conv{k}"][0] for k in range(5)] == [1, 2, 4, 8, 16]
    assert [tr[f"conv{k}"][1] for k in range(5)] == [64, 64, 128, 64, 32]
    assert tr["lateral4"] == (16, 256)
    assert (tr["tconv4"][0], tr["fuse3"][0], tr["tconv3"][0], tr["fuse2"][0]) == (8, 8, 4, 4)
    assert tr["fuse2"][1] == 256


def test_default_shortcuts():
    model = build(NetworkConfig(), 0)
    assert not model.has_shortcut_conv(1)
    for k in (2, 3, 4):
        assert model.has_shortcut_conv(k)
        assert model.params[f"conv{k}.shortcut.weight"].value.shape[0] == 1
    assert model.params["conv2.shortcut.weight"].value.shape == (1, 64, 128)


def test_default_descriptor_length(cloud):
    assert forward(build(NetworkConfig(), 0), cloud).value.shape == (256,)


def test_same_seed_same_parameters():
    a, b = build(NetworkConfig.toy(), 5), build(NetworkConfig.toy(), 5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and np.array_equal(p.value, q.value)
    c = build(NetworkConfig.toy(), 6)
    assert not np.array_equal(a.params["conv0.weight"].value, c.params["conv0.weight"].value)


def test_single_voxel_descriptor_is_finite():
    model = build(NetworkConfig.toy(), 0)
    d = forward(model, VoxelizedCloud(np.array([[3, -2, 7]]), 0.01))
    assert d.value.shape == (64,) and np.all(np.isfinite(d.value))


def test_point_order_invariance():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.3, 0.3, size=(500, 3))
    model = build(NetworkConfig.toy(), 0)
    d1 = forward(model, quantize(pts, 0.01)).value
    d2 = forward(model, quantize(pts[rng.permutation(500)], 0.01)).value
    assert np.array_equal(d1, d2)


def test_empty_cloud_rejected():
    with pytest.raises(EmptyCloud):
        forward(build(NetworkConfig.toy(), 0), VoxelizedCloud(np.zeros((0, 3)), 0.01))


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        NetworkConfig(channels=(1, 2, 3))
    with pytest.raises(InvalidConfig):
        NetworkConfig(lateral_dim=128, descriptor_dim=256)
    with pytest.raises(InvalidConfig):
        NetworkConfig(gem_p=0.5)


def test_toy_network_gradients_sampled(cloud):
    r = network_check(seed=2, config=NetworkConfig.toy(), per_tensor=3)
    assert r.passed, r.rel_error


def test_small_network_gradients_exhaustive():
    r = network_check(seed=1)
    assert build(NetworkConfig(channels=(2, 2, 2, 2, 2), lateral_dim=3, descriptor_dim=3)).n_parameters() <= 5000
    assert r.passed, r.rel_error


def test_running_stats_only_with_tape(cloud):
    model = build(NetworkConfig.toy(), 0)
    forward(model, cloud, "train")
    assert np.all(model.bns["conv0.bn"].running_mean == 0)
    forward(model, cloud, "train", tape=Tape())
    assert np.any(model.bns["conv0.bn"].running_mean != 0)


def _trained_like(seed=0):
    model = build(NetworkConfig.toy(), seed)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value = p.value + rng.normal(scale=0.01, size=p.value.shape)
    for bn in model.bns.values():
        bn.running_mean[:] = rng.normal(size=bn.running_mean.shape)
        bn.running_var[:] = rng.uniform(0.5, 2, bn.running_var.shape)
    return model


def test_checkpoint_round_trip(tmp_path, cloud):
    model = _trained_like()
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected_config=NetworkConfig.toy())
    assert np.array_equal(forward(model, cloud).value, forward(back, cloud).value)
    for p, q in zip(model.parameters(), back.parameters()):
        assert np.array_equal(p.value, q.value)


def test_checkpoint_hash_mismatch(tmp_path):
    save_checkpoint(_trained_like(), tmp_path / "m.ckpt")
    buf = (tmp_path / "m.ckpt").read_bytes()
    (hlen,) = struct.unpack_from("<Q", buf, 4)
    header = json.loads(buf[12:12 + hlen])
    header["config_hash"] = "0" * 64
    hb = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "e.ckpt").write_bytes(buf[:4] + struct.pack("<Q", len(hb)) + hb + buf[12 + hlen:])
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "e.ckpt")
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "m.ckpt", expected_config=NetworkConfig())


@pytest.mark.parametrize("keep", [0, 3, 10, 200, -8])
def test_checkpoint_truncated(tmp_path, keep):
    save_checkpoint(_trained_like(), tmp_path / "m.ckpt")
    buf = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(buf[:keep])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "t.ckpt")
