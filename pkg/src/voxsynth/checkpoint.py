"""Binary checkpoint format for named parameter tables.

Layout (little-endian): magic "VCK1", u32 version, u64 seed, u32 metadata
length, metadata JSON (network spec, op versions, free-form extra), u32
entry count, then per entry: u16 name length, name, u8 ndim, u32 dims,
f32 payload. No timestamps; identical parameters yield identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from . import ops
from .network import Network, NetworkSpec
from .tensor import Tensor

MAGIC = b"VCK1"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, seed, spec_dict, params, extra=None):
    meta = {
        "spec": spec_dict,
        "ops": dict(ops.OP_VERSIONS),
        "extra": extra or {},
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    parts = [
        _HEAD.pack(MAGIC, VERSION, int(seed)),
        struct.pack("<I", len(mb)),
        mb,
        struct.pack("<I", len(params)),
    ]
    for name, t in params.items():
        arr = t.values if isinstance(t, Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a VCK1 checkpoint")
    _, version, seed = _HEAD.unpack_from(raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + mlen].decode())
    off += mlen
    if meta.get("ops") != dict(ops.OP_VERSIONS):
        raise CheckpointError(
            f"{path}: op versions {meta.get('ops')} do not match this build {dict(ops.OP_VERSIONS)}"
        )
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(dims))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        params[name] = arr.astype(np.float32)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return int(seed), meta, params


def save_network(path, net, extra=None):
    save_checkpoint(path, net.seed, net.spec.to_dict(), net.params, extra=extra)


def load_network(path):
    """Rebuild the network a checkpoint describes and load its weights."""
    seed, meta, params = load_checkpoint(path)
    spec = NetworkSpec.from_dict(meta["spec"])
    net = Network(spec, seed=seed)
    if set(net.params) != set(params):
        missing = set(net.params) ^ set(params)
        raise CheckpointError(f"parameter names do not match the spec: {sorted(missing)}")
    for name, t in net.params.items():
        if t.values.shape != params[name].shape:
            raise CheckpointError(
                f"{name}: shape {params[name].shape} does not match spec {t.values.shape}"
            )
        t.values = params[name].copy()
    return net, meta
