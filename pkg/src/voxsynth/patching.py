"""Patch sampling for training and sliding-window tiling for inference.

Inference tiles a volume with evenly redistributed origins (the requested
step fraction sets a target spacing; actual origins are rounded from an
exact even spacing so the last tile always lands flush with the far edge)
and averages overlapping predictions. Accumulation is float64 so tile
order cannot perturb the mean.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from .volume import Volume


class CoverageError(RuntimeError):
    """A finalized accumulator had uncovered voxels (grid construction bug)."""


def _axis_origins(dim, patch, step_fraction):
    if dim == patch:
        return [0]
    target = patch * step_fraction
    n = math.ceil((dim - patch) / target) + 1
    actual = (dim - patch) / (n - 1)
    return [int(np.round(i * actual)) for i in range(n)]


@dataclass
class TileGrid:
    patch_dims: tuple
    origins: list
    volume_dims: tuple
    step_fraction: float


def compute_tile_origins(volume_dims, patch_dims, step_fraction):
    volume_dims = tuple(int(d) for d in volume_dims)
    patch_dims = tuple(int(p) for p in patch_dims)
    if not 0 < step_fraction <= 1:
        raise ValueError(f"step_fraction must be in (0, 1], got {step_fraction}")
    for d, p in zip(volume_dims, patch_dims):
        if p > d:
            raise ValueError(f"patch {patch_dims} exceeds volume {volume_dims}; pad first")
        if p < 1:
            raise ValueError(f"patch dims must be positive, got {patch_dims}")
    per_axis = [
        _axis_origins(d, p, step_fraction) for d, p in zip(volume_dims, patch_dims)
    ]
    origins = [
        (z, y, x) for z in per_axis[0] for y in per_axis[1] for x in per_axis[2]
    ]
    return TileGrid(
        patch_dims=patch_dims,
        origins=origins,
        volume_dims=volume_dims,
        step_fraction=float(step_fraction),
    )


def _as_array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def extract_patch(v, origin, patch_dims):
    """Copy a sub-block as a (1, 1, z, y, x) tensor."""
    arr = _as_array(v)
    sl = []
    for o, p, d in zip(origin, patch_dims, arr.shape):
        if o < 0 or o + p > d:
            raise ValueError(
                f"patch at {tuple(origin)} with dims {tuple(patch_dims)} leaves volume {arr.shape}"
            )
        sl.append(slice(o, o + p))
    block = np.ascontiguousarray(arr[tuple(sl)], dtype=np.float32)
    return Tensor(block[None, None])


class Accumulator:
    """Running mean of overlapping tiles over a full volume.

    sum has shape (channels, z, y, x) in float64; count tracks how many
    tiles covered each voxel. Channels are fixed by the first tile.
    """

    def __init__(self, volume_dims):
        self.volume_dims = tuple(int(d) for d in volume_dims)
        self.sum = None
        self.count = np.zeros(self.volume_dims, dtype=np.int64)

    def _ensure(self, channels):
        if self.sum is None:
            self.sum = np.zeros((channels,) + self.volume_dims, dtype=np.float64)
        elif self.sum.shape[0] != channels:
            raise ValueError(
                f"tile has {channels} channels, accumulator holds {self.sum.shape[0]}"
            )


def accumulate(acc, tile, origin):
    vals = tile.values if isinstance(tile, Tensor) else np.asarray(tile)
    if vals.ndim == 3:
        vals = vals[None, None]
    if vals.ndim != 5 or vals.shape[0] != 1:
        raise ValueError(f"tile must be (1, C, z, y, x), got {vals.shape}")
    patch = vals.shape[2:]
    sl = []
    for o, p, d in zip(origin, patch, acc.volume_dims):
        if o < 0 or o + p > d:
            raise ValueError(f"tile at {tuple(origin)} leaves volume {acc.volume_dims}")
        sl.append(slice(o, o + p))
    sl = tuple(sl)
    acc._ensure(vals.shape[1])
    acc.sum[(slice(None),) + sl] += vals[0]
    acc.count[sl] += 1
    return acc


def finalize_array(acc):
    """(channels, z, y, x) float32 mean; errors if any voxel was never covered."""
    if acc.sum is None or acc.count.min() == 0:
        raise CoverageError("accumulator has uncovered voxels")
    return (acc.sum / acc.count[None]).astype(np.float32)


def finalize(acc, spacing_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)):
    out = finalize_array(acc)
    if out.shape[0] != 1:
        raise ValueError("finalize expects a single-channel accumulator")
    return Volume(out[0], spacing_mm, origin_mm)


def _pad_to_patch(arr, patch_dims):
    """Symmetric pad up to patch size with the volume minimum.

    Returns (padded, crop_slices) where crop_slices recovers the original.
    """
    pads, crops = [], []
    for d, p in zip(arr.shape, patch_dims):
        need = max(0, p - d)
        lo = need // 2
        pads.append((lo, need - lo))
        crops.append(slice(lo, lo + d))
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return arr, tuple(crops)
    fill = float(arr.min()) if arr.size else 0.0
    return np.pad(arr, pads, constant_values=fill), tuple(crops)


def predict_volume(tile_fn, v, patch_dims, step_fraction):
    """Sliding-window inference: tile, apply, mean-average overlaps.

    tile_fn maps a (1, 1, z, y, x) Tensor to a (1, C, z, y, x) array or
    Tensor. Returns a (C, z, y, x) float32 array at the input dims; volumes
    smaller than the patch are padded with their minimum and cropped back.
    """
    arr = _as_array(v).astype(np.float32, copy=False)
    padded, crops = _pad_to_patch(arr, patch_dims)
    grid = compute_tile_origins(padded.shape, patch_dims, step_fraction)
    acc = Accumulator(padded.shape)
    for origin in grid.origins:
        tile = extract_patch(padded, origin, patch_dims)
        out = tile_fn(tile)
        accumulate(acc, out, origin)
    merged = finalize_array(acc)
    return merged[(slice(None),) + crops]


def sample_training_patch(input_v, target_v, patch_dims, rng):
    """One random patch pair, same origin in both volumes."""
    a = _as_array(input_v)
    b = _as_array(target_v)
    if a.shape != b.shape:
        raise ValueError(f"paired volumes differ: {a.shape} vs {b.shape}")
    pa, crops_a = _pad_to_patch(a, patch_dims)
    pb, _ = _pad_to_patch(b, patch_dims)
    origin = tuple(
        int(rng.integers(0, d - p + 1)) for d, p in zip(pa.shape, patch_dims)
    )
    return extract_patch(pa, origin, patch_dims), extract_patch(pb, origin, patch_dims)
