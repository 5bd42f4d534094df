"""Intensity normalization, dataset fingerprinting, and the train/val split.

MR inputs get per-case z-scores; CT targets are clipped to [-1024, 3071] HU
and normalized by dataset-level statistics (the fingerprint), which also
drive the inversion of predictions back to HU. All statistics are
population statistics accumulated in float64.
"""

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .volume import Volume

CLIP_LO = -1024.0
CLIP_HI = 3071.0
_STD_FLOOR = 1e-8


class DegenerateInputError(ValueError):
    """Constant (or near-constant) volume where a spread is required."""


@dataclass
class Fingerprint:
    mean_hu: float
    std_hu: float
    clip_lo: float = CLIP_LO
    clip_hi: float = CLIP_HI
    n_voxels: int = 0

    def __post_init__(self):
        if not self.std_hu > 0:
            raise ValueError(f"fingerprint std must be positive, got {self.std_hu}")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


def save_fingerprint(fp, path):
    Path(path).write_text(json.dumps(asdict(fp), indent=2) + "\n")


def load_fingerprint(path):
    return Fingerprint(**json.loads(Path(path).read_text()))


def zscore_per_case(v):
    """Standardize one volume by its own statistics; returns (vol, mean, std)."""
    data = v.data
    if data.size < 2:
        raise ValueError("z-score needs at least 2 voxels")
    mean = float(np.mean(data, dtype=np.float64))
    std = float(np.std(data.astype(np.float64)))
    if std < _STD_FLOOR:
        raise DegenerateInputError(f"constant volume (std {std:.3g}), cannot z-score")
    out = (data.astype(np.float64) - mean) / std
    return Volume(out, v.spacing_mm, v.origin_mm), mean, std


def _kahan_add(total, comp, value):
    y = value - comp
    t = total + y
    comp = (t - total) - y
    return t, comp


def compute_fingerprint(ct_volumes):
    """Dataset mean/std of clipped HU values, streamed one volume at a time.

    Per-volume partial sums (numpy pairwise, float64) are merged with
    compensated summation so the result is insensitive to volume order.
    """
    s1 = c1 = s2 = c2 = 0.0
    n = 0
    for v in ct_volumes:
        data = np.clip(v.data.astype(np.float64), CLIP_LO, CLIP_HI)
        s1, c1 = _kahan_add(s1, c1, float(np.sum(data)))
        s2, c2 = _kahan_add(s2, c2, float(np.sum(np.square(data))))
        n += data.size
    if n == 0:
        raise ValueError("fingerprint needs at least one volume")
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    std = float(np.sqrt(var))
    if std < _STD_FLOOR:
        raise DegenerateInputError(f"dataset is constant (std {std:.3g})")
    return Fingerprint(mean_hu=mean, std_hu=std, n_voxels=n)


def normalize_ct(v, fp):
    """(clip(v) - mean)/std, carried in float64 until a disk write."""
    data = np.clip(v.data.astype(np.float64), fp.clip_lo, fp.clip_hi)
    out = (data - fp.mean_hu) / fp.std_hu
    return Volume(out, v.spacing_mm, v.origin_mm)


def invert_to_hu(pred, fp):
    """pred*std + mean, clipped to the fingerprint's HU range."""
    data = pred.data.astype(np.float64) * fp.std_hu + fp.mean_hu
    out = np.clip(data, fp.clip_lo, fp.clip_hi).astype(np.float32)
    return Volume(out, pred.spacing_mm, pred.origin_mm)


@dataclass
class SplitAssignment:
    train_ids: list
    val_ids: list
    seed: int


def split_dataset(manifest, seed):
    """Shuffle case ids and cut 90/10; validation gets at least one case."""
    ids = [e.case_id for e in manifest.entries]
    if len(ids) < 2:
        raise ValueError("split needs at least 2 cases")
    rng = np.random.default_rng(np.random.PCG64(seed))
    order = list(rng.permutation(len(ids)))
    n_val = max(1, round(0.10 * len(ids)))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return SplitAssignment(train_ids=train, val_ids=val, seed=int(seed))


def save_split(split, path):
    Path(path).write_text(
        json.dumps(
            {"seed": split.seed, "train_ids": split.train_ids, "val_ids": split.val_ids},
            indent=2,
        )
        + "\n"
    )


def load_split(path):
    doc = json.loads(Path(path).read_text())
    return SplitAssignment(doc["train_ids"], doc["val_ids"], doc["seed"])
