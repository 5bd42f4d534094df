"""Image metrics against closed forms and a brute-force distance oracle."""

import json
import math

import numpy as np
import pytest

from voxsynth.metrics import (
    DATA_RANGE,
    FOREGROUND_CLASSES,
    MS_SSIM_WEIGHTS,
    SCALAR_COLUMNS,
    boundary_mask,
    dice,
    evaluate_case,
    hd95,
    hd95_mask,
    mae,
    ms_ssim,
    ms_ssim_scales,
    psnr,
    ssim,
    summarize,
    write_reports,
)


def _rand(seed, dims=(16, 16, 16), lo=-1024.0, hi=3071.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=dims).astype(np.float32)


def test_mae_closed_form():
    a = np.zeros((4, 4, 4), dtype=np.float32)
    assert mae(a, a + 3.0) == 3.0
    assert mae(a, a) == 0.0


def test_psnr_closed_form_for_constant_offset():
    a = np.zeros((4, 4, 4), dtype=np.float32)
    got = psnr(a, a + 2.0, data_range=4095.0)
    assert got == pytest.approx(10.0 * math.log10(4095.0 ** 2 / 4.0), rel=1e-12)


def test_psnr_of_identical_volumes_is_infinite():
    a = _rand(0)
    assert psnr(a, a) == float("inf")


def test_ssim_of_identical_volumes_is_one():
    for seed in (1, 2, 3):
        a = _rand(seed)
        assert abs(ssim(a, a) - 1.0) <= 1e-9


def test_ssim_luminance_closed_form_for_constant_volumes():
    # constant fields have zero variance, so only the luminance term acts:
    # (2*m1*m2 + C1)/(m1^2 + m2^2 + C1)
    m1, m2 = 100.0, 300.0
    a = np.full((16, 16, 16), m1, dtype=np.float64)
    b = np.full((16, 16, 16), m2, dtype=np.float64)
    c1 = (0.01 * DATA_RANGE) ** 2
    expected = (2.0 * m1 * m2 + c1) / (m1 ** 2 + m2 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_decreases_with_noise_amplitude():
    base = _rand(4, dims=(24, 24, 24), lo=0.0, hi=1000.0)
    rng = np.random.default_rng(5)
    noise = rng.normal(size=base.shape).astype(np.float32)
    scores = [ssim(base, base + amp * noise) for amp in (10.0, 50.0, 250.0)]
    assert scores[0] > scores[1] > scores[2]


def test_scale_count_respects_window_size():
    # a scale participates while min_dim / 2^(s-1) still fits the 11-wide window
    assert ms_ssim_scales((16, 16, 16)) == 1
    assert ms_ssim_scales((32, 32, 32)) == 2
    assert ms_ssim_scales((64, 64, 64)) == 3
    assert ms_ssim_scales((176, 176, 176)) == 5
    assert ms_ssim_scales((352, 352, 352)) == 5
    assert ms_ssim_scales((64, 22, 64)) == 2


def test_scale_count_rejects_volumes_below_the_window():
    with pytest.raises(ValueError):
        ms_ssim_scales((8, 8, 8))


def test_ms_ssim_of_identical_volumes_is_one():
    a = _rand(6, dims=(32, 32, 32))
    assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ms_ssim_at_single_scale_matches_ssim():
    # 16^3 admits exactly one scale, where the weighted product degenerates
    # to plain ssim under a renormalized (sole) weight
    a = _rand(7, dims=(16, 16, 16))
    b = a + 25.0
    assert ms_ssim(a, b) == pytest.approx(ssim(a, b), rel=1e-9)


def test_ms_ssim_decreases_with_noise_amplitude():
    base = _rand(8, dims=(32, 32, 32), lo=0.0, hi=1000.0)
    noise = np.random.default_rng(9).normal(size=base.shape).astype(np.float32)
    scores = [ms_ssim(base, base + amp * noise) for amp in (10.0, 100.0)]
    assert scores[0] > scores[1]


def test_ms_ssim_weights_match_the_published_table():
    assert MS_SSIM_WEIGHTS == (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def test_dice_of_identical_labels_is_one():
    labels = np.random.default_rng(10).integers(0, 7, size=(8, 8, 8)).astype(np.uint8)
    mean, per = dice(labels, labels)
    assert mean == 1.0
    assert all(v == 1.0 for v in per.values())


def test_dice_of_disjoint_masks_is_zero():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    a[:2] = 1
    b[2:] = 1
    mean, per = dice(a, b)
    assert per[1] == 0.0 and mean == 0.0


def test_dice_half_overlap_closed_form():
    a = np.zeros((1, 1, 8), dtype=np.uint8)
    b = np.zeros((1, 1, 8), dtype=np.uint8)
    a[0, 0, :4] = 1
    b[0, 0, 2:6] = 1
    _, per = dice(a, b)
    assert per[1] == 2.0 * 2 / (4 + 4)


def test_dice_absent_class_scores_one_but_skips_the_mean():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    a[0] = 1
    b[0] = 1
    b[1, 0, 0] = 2  # class 2 exists only in the target
    mean, per = dice(a, b)
    assert per[1] == 1.0
    assert per[2] == 0.0
    assert per[3] == 1.0  # absent everywhere
    assert mean == pytest.approx((1.0 + 0.0) / 2.0)


def test_boundary_of_a_solid_block_is_its_shell():
    mask = np.zeros((6, 6, 6), dtype=bool)
    mask[1:5, 1:5, 1:5] = True
    shell = boundary_mask(mask)
    assert shell.sum() == 4 ** 3 - 2 ** 3
    assert not shell[2:4, 2:4, 2:4].any()


def test_boundary_counts_the_volume_border():
    # a mask filling the whole volume still has its outer shell as boundary
    mask = np.ones((3, 3, 3), dtype=bool)
    shell = boundary_mask(mask)
    assert shell.sum() == 26
    assert not shell[1, 1, 1]


def test_hd95_of_identical_masks_is_zero():
    mask = np.zeros((6, 6, 6), dtype=bool)
    mask[2:5, 2:5, 2:5] = True
    assert hd95_mask(mask, mask, (1.0, 1.0, 1.0)) == 0.0


def test_hd95_single_voxel_pair_is_their_distance():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[1, 1, 1] = True
    b[1, 1, 4] = True
    assert hd95_mask(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)
    # anisotropic spacing stretches the x axis
    assert hd95_mask(a, b, (1.0, 1.0, 2.5)) == pytest.approx(7.5)


def test_hd95_empty_conventions():
    empty = np.zeros((4, 4, 4), dtype=bool)
    full = np.zeros((4, 4, 4), dtype=bool)
    full[1:3, 1:3, 1:3] = True
    assert hd95_mask(empty, empty, (1.0, 1.0, 1.0)) == 0.0
    assert hd95_mask(empty, full, (1.0, 1.0, 1.0)) == float("inf")


def _hd95_brute(pred, target, spacing):
    """O(n^2) reference: all boundary pairs, pooled percentile."""
    def boundary(mask):
        pts = []
        dims = mask.shape
        for z, y, x in np.argwhere(mask):
            on_edge = False
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nz, ny, nx = z + dz, y + dy, x + dx
                if not (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]):
                    on_edge = True
                    break
                if not mask[nz, ny, nx]:
                    on_edge = True
                    break
            if on_edge:
                pts.append((z * spacing[0], y * spacing[1], x * spacing[2]))
        return pts

    pa, pb = boundary(pred), boundary(target)
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return float("inf")
    dists = []
    for src, dst in ((pa, pb), (pb, pa)):
        for p in src:
            best = min(
                math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)
                for q in dst
            )
            dists.append(best)
    return float(np.percentile(dists, 95))


def test_hd95_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(11)
    for trial in range(20):
        dims = tuple(rng.integers(4, 13, size=3))
        spacing = tuple(rng.uniform(0.5, 3.0, size=3))
        a = rng.random(dims) < 0.3
        b = rng.random(dims) < 0.3
        got = hd95_mask(a, b, spacing)
        want = _hd95_brute(a, b, spacing)
        assert got == want, f"trial {trial}: {got} != {want}"


def test_hd95_per_class_uses_presence_rule():
    a = np.zeros((6, 6, 6), dtype=np.uint8)
    b = np.zeros((6, 6, 6), dtype=np.uint8)
    a[1:3, 1:3, 1:3] = 1
    b[1:3, 1:3, 1:3] = 1
    mean, per = hd95(a, b, (1.0, 1.0, 1.0))
    assert per[1] == 0.0
    assert per[2] == 0.0  # absent from both, excluded from the mean
    assert mean == 0.0


def test_evaluate_case_collects_all_scalar_columns():
    a = _rand(12, dims=(16, 16, 16))
    res = evaluate_case("case_x", a, a, (1.0, 1.0, 1.0), DATA_RANGE)
    assert res["case_id"] == "case_x"
    assert res["mae"] == 0.0
    assert res["psnr"] == float("inf")
    assert res["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert res["ms_ssim"] == pytest.approx(1.0, abs=1e-9)
    assert "dice" not in res  # no segmentation requested


def test_summarize_averages_finite_values():
    rows = [
        {"case_id": "a", "mae": 2.0, "psnr": 30.0},
        {"case_id": "b", "mae": 4.0, "psnr": 40.0},
    ]
    s = summarize(rows)
    assert s["mae"] == 3.0
    assert s["psnr"] == 35.0
    assert s["n_cases"] == 2


def test_write_reports_emits_json_and_tsv(tmp_path):
    a = _rand(13, dims=(16, 16, 16))
    rows = [evaluate_case("c0", a, a, (1.0, 1.0, 1.0), DATA_RANGE)]
    write_reports(tmp_path, rows)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["cases"][0]["case_id"] == "c0"
    assert doc["cases"][0]["psnr"] == "inf"  # JSON has no infinities
    assert doc["summary"]["n_cases"] == 1
    tsv = (tmp_path / "metrics.tsv").read_text().strip().split("\n")
    header = tsv[0].split("\t")
    assert header[0] == "case_id"
    assert set(header[1:]) <= set(SCALAR_COLUMNS)
    assert len(tsv) == 2


def test_foreground_classes_are_one_through_six():
    assert FOREGROUND_CLASSES == (1, 2, 3, 4, 5, 6)
