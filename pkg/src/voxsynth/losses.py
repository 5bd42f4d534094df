"""Voxel and feature-space objectives for the translation networks.

The feature-prioritized loss runs a frozen segmentation network on both
the prediction and the reference, and averages the per-tap mean absolute
feature differences. Gradients flow only through the prediction branch.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

LAMBDA_L1_DEFAULT = 5.0


def parameter_checksum(net):
    """SHA-256 over all parameter payloads in registration order."""
    h = hashlib.sha256()
    for name, t in net.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.values, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class AFPConfig:
    extractor: object
    tap_indices: tuple = None
    lambda_l1: float = LAMBDA_L1_DEFAULT
    frozen_checksum: str = field(init=False, default="")

    def __post_init__(self):
        self.extractor.freeze()
        if self.tap_indices is None:
            self.tap_indices = tuple(range(self.extractor.n_taps))
        self.tap_indices = tuple(int(i) for i in self.tap_indices)
        if len(self.tap_indices) < 1:
            raise ValueError("at least one feature tap is required")
        for i in self.tap_indices:
            if not 0 <= i < self.extractor.n_taps:
                raise ValueError(
                    f"tap index {i} outside 0..{self.extractor.n_taps - 1}"
                )
        self.frozen_checksum = parameter_checksum(self.extractor)

    @property
    def n_layers(self):
        return len(self.tap_indices)


l1_loss = ops.l1_loss


def afp_loss(x, y, cfg):
    """Mean over taps of mean |phi_i(x) - phi_i(y)|; y branch is detached."""
    yv = y.values if isinstance(y, Tensor) else np.asarray(y)
    if x.shape != yv.shape:
        raise ValueError(f"afp shape mismatch: {x.shape} vs {yv.shape}")
    with no_grad():
        _, taps_y = cfg.extractor.forward(Tensor(yv), capture_taps=True)
    _, taps_x = cfg.extractor.forward(x, capture_taps=True)
    total = None
    for i in cfg.tap_indices:
        term = ops.l1_loss(taps_x[i], taps_y[i].values)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / cfg.n_layers)


def combined_loss(pred, target, cfg):
    """lambda_l1 * L1 + AFP."""
    return ops.add(
        ops.scale(ops.l1_loss(pred, target), cfg.lambda_l1),
        afp_loss(pred, target, cfg),
    )


def afp_feature_distance(a, b, cfg):
    """Forward-only AFP value between two raw arrays (for monitoring)."""
    with no_grad():
        return float(afp_loss(Tensor(np.asarray(a)), np.asarray(b), cfg).values)
