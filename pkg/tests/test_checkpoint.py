"""Checkpoint round trips, determinism, and corruption rejection."""

import struct

import numpy as np
import pytest

from voxsynth import ops
from voxsynth.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_network,
    save_checkpoint,
    save_network,
)
from voxsynth.network import NetworkSpec, build
from voxsynth.tensor import no_grad


def _tiny_net(seed=0, **kw):
    return build(NetworkSpec(levels=2, base_channels=2, **kw), seed=seed)


def test_network_round_trip_preserves_every_parameter(tmp_path):
    net = _tiny_net(seed=5)
    path = tmp_path / "net.vck"
    save_network(path, net, extra={"note": 1})
    back, meta = load_network(path)
    assert meta["extra"] == {"note": 1}
    assert back.spec == net.spec
    assert back.seed == net.seed
    assert sorted(back.params) == sorted(net.params)
    for name in net.params:
        assert np.array_equal(back.params[name].values, net.params[name].values)


def test_round_trip_network_forward_is_bitwise_identical(tmp_path):
    net = _tiny_net(seed=6, block="residual")
    path = tmp_path / "net.vck"
    save_network(path, net)
    back, _ = load_network(path)
    x = np.random.default_rng(7).normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    with no_grad():
        y1, _ = net.forward(x)
        y2, _ = back.forward(x)
    assert np.array_equal(y1.values, y2.values)


def test_identical_parameters_yield_identical_bytes(tmp_path):
    net = _tiny_net(seed=8)
    a, b = tmp_path / "a.vck", tmp_path / "b.vck"
    save_network(a, net)
    save_network(b, net)
    assert a.read_bytes() == b.read_bytes()


def test_metadata_records_seed_spec_and_op_versions(tmp_path):
    path = tmp_path / "c.vck"
    save_checkpoint(path, 42, {"levels": 2}, {"w": np.ones((2, 3), dtype=np.float32)})
    seed, meta, params = load_checkpoint(path)
    assert seed == 42
    assert meta["spec"] == {"levels": 2}
    assert meta["ops"] == dict(ops.OP_VERSIONS)
    assert np.array_equal(params["w"], np.ones((2, 3)))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.vck"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointError, match="not a"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.vck"
    save_checkpoint(path, 0, {}, {"w": np.zeros(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_op_version_mismatch_rejected(tmp_path, monkeypatch):
    path = tmp_path / "v.vck"
    save_checkpoint(path, 0, {}, {"w": np.zeros(2, dtype=np.float32)})
    stale = dict(ops.OP_VERSIONS)
    stale["conv3d"] += 1
    monkeypatch.setattr(ops, "OP_VERSIONS", stale)
    with pytest.raises(CheckpointError, match="op versions"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "u.vck"
    save_checkpoint(path, 0, {}, {"w": np.zeros(2, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_load_network_rejects_foreign_parameter_table(tmp_path):
    net = _tiny_net(seed=0)
    path = tmp_path / "m.vck"
    save_checkpoint(path, 0, net.spec.to_dict(), {"unrelated": np.zeros(3, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="parameter names"):
        load_network(path)


def test_load_network_rejects_shape_drift(tmp_path):
    net = _tiny_net(seed=0)
    path = tmp_path / "s.vck"
    mangled = {
        name: (t.values if name != "head.b" else np.zeros(5, dtype=np.float32))
        for name, t in net.params.items()
    }
    save_checkpoint(path, 0, net.spec.to_dict(), mangled)
    with pytest.raises(CheckpointError, match="shape"):
        load_network(path)
