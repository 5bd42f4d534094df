"""Image- and structure-level evaluation of synthesized CT volumes.

Intensity metrics (MAE, PSNR, SSIM, MS-SSIM) compare HU volumes directly.
Structure metrics (Dice, 95th-percentile Hausdorff distance) compare label
volumes, typically produced by running the segmentation network on both
the synthesized and the reference CT. All statistics run in float64.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .network import N_CLASSES
from .patching import predict_volume
from .tensor import no_grad

DATA_RANGE = 4095.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

FOREGROUND_CLASSES = tuple(range(1, N_CLASSES))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range=DATA_RANGE):
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range * data_range / mse))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    off = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(off * off) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter3(x, kernel):
    """Separable valid-mode correlation along all three axes."""
    out = x
    for axis in range(3):
        wins = sliding_window_view(out, kernel.size, axis=axis)
        out = np.tensordot(wins, kernel, axes=([-1], [0]))
    return out


def _ssim_maps(a, b, data_range):
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(
            f"volume dims {a.shape} smaller than the {SSIM_WINDOW}-voxel window"
        )
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter3(a, k)
    mu_b = _filter3(b, k)
    var_a = _filter3(a * a, k) - mu_a * mu_a
    var_b = _filter3(b * b, k) - mu_b * mu_b
    cov = _filter3(a * b, k) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, data_range=DATA_RANGE):
    """Mean structural similarity over a Gaussian-weighted sliding window."""
    a, b = _pair(a, b)
    lum, cs = _ssim_maps(a, b, data_range)
    return float(np.mean(lum * cs))


def _avg_pool2(x):
    dims = tuple(d - d % 2 for d in x.shape)
    c = x[: dims[0], : dims[1], : dims[2]]
    return c.reshape(
        dims[0] // 2, 2, dims[1] // 2, 2, dims[2] // 2, 2
    ).mean(axis=(1, 3, 5))


def ms_ssim_scales(volume_dims, max_scales=len(MS_SSIM_WEIGHTS)):
    """How many dyadic scales keep every dim at or above the SSIM window."""
    s = 0
    while s < max_scales and min(volume_dims) / 2 ** s >= SSIM_WINDOW:
        s += 1
    if s == 0:
        raise ValueError(
            f"volume dims {tuple(volume_dims)} smaller than the SSIM window"
        )
    return s


def ms_ssim(a, b, data_range=DATA_RANGE):
    """Multi-scale SSIM with 2x average-pool downsampling between scales.

    Uses as many of the canonical five scales as the volume supports and
    renormalizes their weights. Negative component means clamp to zero so
    fractional exponents stay defined.
    """
    a, b = _pair(a, b)
    n_scales = ms_ssim_scales(a.shape)
    weights = np.asarray(MS_SSIM_WEIGHTS[:n_scales], dtype=np.float64)
    weights = weights / weights.sum()
    terms = []
    for s in range(n_scales):
        lum, cs = _ssim_maps(a, b, data_range)
        if s < n_scales - 1:
            terms.append(float(np.mean(cs)))
            a = _avg_pool2(a)
            b = _avg_pool2(b)
        else:
            terms.append(float(np.mean(lum * cs)))
    terms = np.maximum(np.asarray(terms), 0.0)
    return float(np.prod(terms ** weights))


def dice(pred_labels, target_labels, classes=FOREGROUND_CLASSES):
    """(mean, per_class) overlap scores.

    A class absent from both volumes scores 1.0 but is left out of the
    mean; absent from only one scores 0.0.
    """
    pa = np.asarray(pred_labels)
    pb = np.asarray(target_labels)
    if pa.shape != pb.shape:
        raise ValueError(f"label shapes differ: {pa.shape} vs {pb.shape}")
    per = {}
    present = []
    for c in classes:
        ma = pa == c
        mb = pb == c
        na = int(ma.sum())
        nb = int(mb.sum())
        if na == 0 and nb == 0:
            per[c] = 1.0
            continue
        present.append(c)
        inter = int(np.logical_and(ma, mb).sum())
        per[c] = 2.0 * inter / (na + nb)
    mean = float(np.mean([per[c] for c in present])) if present else 1.0
    return mean, per


def boundary_mask(mask):
    """Foreground voxels with a 6-neighbor outside the object.

    The volume edge counts as outside, so objects touching the border
    contribute their cut faces.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    p = np.pad(mask, 1)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return mask & ~interior


def _boundary_points_mm(mask, spacing_mm):
    pts = np.argwhere(boundary_mask(mask)).astype(np.float64)
    return pts * np.asarray(spacing_mm, dtype=np.float64)


def _directed_sq_min(pa, pb, chunk_a=512, chunk_b=8192):
    """For each point in pa, squared distance to its nearest point in pb."""
    out = np.empty(len(pa), dtype=np.float64)
    for i in range(0, len(pa), chunk_a):
        blk = pa[i : i + chunk_a]
        best = np.full(len(blk), np.inf)
        for j in range(0, len(pb), chunk_b):
            d2 = ((blk[:, None, :] - pb[None, j : j + chunk_b, :]) ** 2).sum(axis=2)
            best = np.minimum(best, d2.min(axis=1))
        out[i : i + chunk_a] = best
    return out


def hd95_mask(pred_mask, target_mask, spacing_mm):
    """95th percentile of symmetric boundary distances in millimeters."""
    pa = _boundary_points_mm(pred_mask, spacing_mm)
    pb = _boundary_points_mm(target_mask, spacing_mm)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    pooled = np.sqrt(
        np.concatenate([_directed_sq_min(pa, pb), _directed_sq_min(pb, pa)])
    )
    return float(np.percentile(pooled, 95))


def hd95(pred_labels, target_labels, spacing_mm, classes=FOREGROUND_CLASSES):
    """(mean, per_class) boundary distances, same presence rule as dice."""
    pa = np.asarray(pred_labels)
    pb = np.asarray(target_labels)
    if pa.shape != pb.shape:
        raise ValueError(f"label shapes differ: {pa.shape} vs {pb.shape}")
    per = {}
    present = []
    for c in classes:
        ma = pa == c
        mb = pb == c
        if not ma.any() and not mb.any():
            per[c] = 0.0
            continue
        present.append(c)
        per[c] = hd95_mask(ma, mb, spacing_mm)
    mean = float(np.mean([per[c] for c in present])) if present else 0.0
    return mean, per


def segment_volume(net, v, patch_dims, step_fraction=0.3):
    """Class labels from sliding-window inference: average the per-tile
    class probabilities over overlaps, then take the argmax."""

    def tile_probs(tile):
        with no_grad():
            y, _ = net.forward(tile)
        return ops.softmax_channels(y.values)

    probs = predict_volume(tile_probs, v, patch_dims, step_fraction)
    return np.argmax(probs, axis=0).astype(np.uint8)


@dataclass
class SegEvaluator:
    """Runs a trained segmentation network on HU volumes for structure
    metrics; normalizes inputs with the dataset fingerprint first."""

    net: object
    fingerprint: object
    patch_dims: tuple
    step_fraction: float = 0.3

    def labels(self, hu):
        fp = self.fingerprint
        data = np.clip(np.asarray(hu, dtype=np.float64), fp.clip_lo, fp.clip_hi)
        norm = ((data - fp.mean_hu) / fp.std_hu).astype(np.float32)
        return segment_volume(self.net, norm, self.patch_dims, self.step_fraction)


def evaluate_case(case_id, pred_hu, target_hu, spacing_mm,
                  data_range=DATA_RANGE, seg=None):
    """All metrics for one case as a flat dict (per-class values nested)."""
    vals = {
        "case_id": case_id,
        "mae": mae(pred_hu, target_hu),
        "psnr": psnr(pred_hu, target_hu, data_range),
        "ssim": ssim(pred_hu, target_hu, data_range),
        "ms_ssim": ms_ssim(pred_hu, target_hu, data_range),
    }
    if seg is not None:
        pl = seg.labels(pred_hu)
        tl = seg.labels(target_hu)
        d_mean, d_per = dice(pl, tl)
        h_mean, h_per = hd95(pl, tl, spacing_mm)
        vals["dice"] = d_mean
        vals["dice_per_class"] = d_per
        vals["hd95"] = h_mean
        vals["hd95_per_class"] = h_per
    return vals


SCALAR_COLUMNS = ("mae", "psnr", "ssim", "ms_ssim", "dice", "hd95")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        f = float(x)
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        if np.isnan(f):
            return "nan"
        return f
    if isinstance(x, (int, np.integer)):
        return int(x)
    return x


def summarize(case_results):
    """Mean of each scalar metric over cases (infinities propagate)."""
    out = {}
    for key in SCALAR_COLUMNS:
        vals = [r[key] for r in case_results if key in r]
        if vals:
            out[key] = float(np.mean(vals))
    out["n_cases"] = len(case_results)
    return out


def write_reports(out_dir, case_results, prefix="metrics"):
    """Emit <prefix>.json (cases + summary) and a <prefix>.tsv table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"cases": _jsonable(case_results), "summary": _jsonable(summarize(case_results))}
    json_path = out_dir / f"{prefix}.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    cols = [c for c in SCALAR_COLUMNS if any(c in r for r in case_results)]
    lines = ["\t".join(["case_id"] + list(cols))]
    for r in case_results:
        cells = [str(r["case_id"])]
        for c in cols:
            v = r.get(c)
            cells.append("" if v is None else f"{v:.6g}")
        lines.append("\t".join(cells))
    tsv_path = out_dir / f"{prefix}.tsv"
    tsv_path.write_text("\n".join(lines) + "\n")
    return json_path, tsv_path
