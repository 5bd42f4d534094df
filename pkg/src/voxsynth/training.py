"""SGD training loops: L1 pretraining, feature-loss fine-tuning, and
cross-entropy training of the segmentation network.

Each epoch draws iters_per_epoch random patch batches, steps heavy-ball
SGD under a polynomial learning-rate decay, then scores the validation
cases by full-volume sliding-window inference. One tab-separated log line
per epoch: epoch, lr, train_loss, val_loss, wall_seconds. Runs are
deterministic for a fixed seed and thread configuration; the wall column
is the only part of a log that varies between identical runs.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_network
from .losses import combined_loss
from .patching import predict_volume, sample_training_patch
from .tensor import Tensor, no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.99
    nesterov: bool = False
    max_epochs: int = 1000
    iters_per_epoch: int = 150
    batch: int = 4
    poly_exponent: float = 0.9
    seed: int = 0
    val_step_fraction: float = 1.0
    schedule_offset: int = 0

    def __post_init__(self):
        if min(self.lr0, self.max_epochs, self.iters_per_epoch, self.batch) <= 0:
            raise ValueError("training config values must be positive")
        if not 0 <= self.schedule_offset < self.max_epochs:
            raise ValueError("schedule_offset must lie inside the epoch budget")


@dataclass
class CasePair:
    case_id: str
    input: np.ndarray
    target: np.ndarray
    labels: np.ndarray = None


def poly_lr(epoch, cfg):
    """Polynomial decay from lr0 to zero across the epoch budget.

    schedule_offset shifts the epoch index, so a fine-tune phase can
    either restart the decay (offset 0, the default) or continue a
    longer schedule from where a previous phase stopped.
    """
    return cfg.lr0 * (1.0 - (epoch + cfg.schedule_offset) / cfg.max_epochs) ** cfg.poly_exponent


def sgd_step(params, state, lr, momentum, nesterov=False):
    """Heavy-ball update: v <- m*v + g; p <- p - lr*v (Nesterov optional)."""
    m = np.float32(momentum)
    lr = np.float32(lr)
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        v = state.get(name)
        v = m * v + g if v is not None else g.copy()
        state[name] = v
        step = g + m * v if nesterov else v
        p.values -= lr * step


def network_forward_fn(net):
    """Tile callable for sliding-window inference (no gradient graph)."""

    def run(tile):
        with no_grad():
            y, _ = net.forward(tile)
        return y.values

    return run


def seg_prob_fn(net):
    """Tile callable producing per-class softmax probabilities."""

    def run(tile):
        with no_grad():
            y, _ = net.forward(tile)
        return ops.softmax_channels(y.values)

    return run


def validate_l1(net, pairs, patch_dims, step_fraction=1.0):
    """Mean over cases of full-volume mean absolute error (normalized units)."""
    total = 0.0
    fn = network_forward_fn(net)
    for pair in pairs:
        pred = predict_volume(fn, pair.input, patch_dims, step_fraction)[0]
        total += float(
            np.mean(np.abs(pred.astype(np.float64) - pair.target.astype(np.float64)))
        )
    return total / len(pairs)


def validate_seg(net, pairs, patch_dims, step_fraction=1.0):
    """Mean cross-entropy of aggregated class probabilities vs labels."""
    total = 0.0
    fn = seg_prob_fn(net)
    for pair in pairs:
        probs = predict_volume(fn, pair.input, patch_dims, step_fraction)
        picked = np.take_along_axis(
            probs.astype(np.float64), pair.labels[None].astype(np.int64), axis=0
        )
        total += float(-np.mean(np.log(np.maximum(picked, 1e-30))))
    return total / len(pairs)


def _ckpt_meta(cfg, mode, epoch, val_loss, patch_dims):
    return {
        "epoch": epoch, "val_loss": val_loss, "mode": mode,
        "patch_dims": list(patch_dims),
        "lr0": cfg.lr0, "momentum": cfg.momentum, "nesterov": cfg.nesterov,
        "poly_exponent": cfg.poly_exponent, "schedule_offset": cfg.schedule_offset,
    }


def _dump_divergence(out_dir, payload):
    lines = [f"{k}: {v}" for k, v in payload.items()]
    Path(out_dir, "divergence.txt").write_text("\n".join(lines) + "\n")


def train(net, train_pairs, val_pairs, cfg, patch_dims, out_dir,
          mode="l1", afp_cfg=None, log_name="train_log.tsv", ckpt_prefix="model"):
    """Run the full epoch loop; returns per-epoch history dicts.

    mode: "l1" voxel loss, "afp" combined loss (needs afp_cfg), "seg"
    cross-entropy against label volumes. Saves <prefix>_best.vck (lowest
    validation loss) and <prefix>_last.vck.
    """
    if mode == "afp" and afp_cfg is None:
        raise ValueError("afp mode needs an AFPConfig")
    if mode == "seg" and any(p.labels is None for p in train_pairs + val_pairs):
        raise ValueError("seg mode needs label volumes on every case")
    if not train_pairs or not val_pairs:
        raise ValueError("both train and validation sets must be non-empty")
    net.spec.validate_patch(patch_dims)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    state = {}
    history = []
    best_val = np.inf
    log_path = out_dir / log_name

    n_epochs = cfg.max_epochs - cfg.schedule_offset
    with open(log_path, "w") as log:
        for epoch in range(n_epochs):
            lr = poly_lr(epoch, cfg)
            t0 = time.perf_counter()
            loss_sum = 0.0
            for it in range(cfg.iters_per_epoch):
                xs, ts = [], []
                for _ in range(cfg.batch):
                    pair = train_pairs[int(rng.integers(len(train_pairs)))]
                    tgt = pair.labels if mode == "seg" else pair.target
                    xt, tt = sample_training_patch(pair.input, tgt, patch_dims, rng)
                    xs.append(xt.values)
                    ts.append(tt.values)
                xb = Tensor(np.concatenate(xs, axis=0))
                tb = np.concatenate(ts, axis=0)
                net.zero_grad()
                y, _ = net.forward(xb)
                if mode == "seg":
                    loss = ops.softmax_cross_entropy(y, np.rint(tb[:, 0]).astype(np.int64))
                elif mode == "afp":
                    loss = combined_loss(y, tb, afp_cfg)
                else:
                    loss = ops.l1_loss(y, tb)
                lv = float(loss.values)
                if not np.isfinite(lv):
                    _dump_divergence(
                        out_dir,
                        {"epoch": epoch, "iteration": it, "lr": lr,
                         "loss": lv, "mode": mode, "seed": cfg.seed},
                    )
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} iteration {it}"
                    )
                loss.backward()
                sgd_step(net.params, state, lr, cfg.momentum, cfg.nesterov)
                loss_sum += lv
            train_loss = loss_sum / cfg.iters_per_epoch
            if mode == "seg":
                val_loss = validate_seg(net, val_pairs, patch_dims, cfg.val_step_fraction)
            else:
                val_loss = validate_l1(net, val_pairs, patch_dims, cfg.val_step_fraction)
            wall = time.perf_counter() - t0
            log.write(f"{epoch}\t{lr:.10g}\t{train_loss:.10g}\t{val_loss:.10g}\t{wall:.3f}\n")
            log.flush()
            history.append(
                {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss}
            )
            if val_loss < best_val:
                best_val = val_loss
                save_network(out_dir / f"{ckpt_prefix}_best.vck", net,
                             extra=_ckpt_meta(cfg, mode, epoch, val_loss, patch_dims))
    save_network(out_dir / f"{ckpt_prefix}_last.vck", net,
                 extra=_ckpt_meta(cfg, mode, n_epochs - 1, history[-1]["val_loss"], patch_dims))
    return history


def finetune_afp(net, train_pairs, val_pairs, cfg, patch_dims, out_dir, afp_cfg,
                 log_name="finetune_log.tsv", ckpt_prefix="model_afp"):
    """Continue from a pretrained network with the combined objective.

    Optimizer state starts fresh and the poly schedule restarts at cfg.lr0.
    """
    return train(net, train_pairs, val_pairs, cfg, patch_dims, out_dir,
                 mode="afp", afp_cfg=afp_cfg, log_name=log_name, ckpt_prefix=ckpt_prefix)
