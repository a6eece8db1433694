from __future__ import annotations

import numpy as np
import pytest

from cardiolattice.errors import EmptySurfaceError, ZeroVarianceError
from cardiolattice.metrics import (
    CompositeLosses,
    DeformationField,
    LossWeights,
    MetricReport,
    composite_losses,
    correction_loss,
    dice3d,
    format_report_table,
    generalized_dice,
    hd95,
    inverse_volume_weights,
    mask_loss,
    ncc,
    smoothness,
    ssim,
)
from cardiolattice.volume import LabelMask, VoxelGrid


def _mask(labels, spacing=(1.0, 1.0, 1.0)):
    return LabelMask(np.asarray(labels, dtype=np.uint8), spacing)


# ---------------------------------------------------------------------------
# dice3d
# ---------------------------------------------------------------------------


def test_dice_identical_masks():
    arr = np.zeros((4, 4, 4), dtype=np.uint8)
    arr[1:3, 1:3, 1:3] = 1
    assert dice3d(_mask(arr), _mask(arr), 1) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    a[0, 0, 0] = 2
    b[3, 3, 3] = 2
    assert dice3d(_mask(a), _mask(b), 2) == 0.0


def test_dice_half_overlapping_cubes():
    a = np.zeros((6, 6, 6), dtype=np.uint8)
    b = np.zeros((6, 6, 6), dtype=np.uint8)
    a[0:2, 0:2, 0:2] = 3          # 8 voxels
    b[1:3, 0:2, 0:2] = 3          # 8 voxels, overlap on 4
    assert dice3d(_mask(a), _mask(b), 3) == pytest.approx(2 * 4 / 16)


def test_dice_both_empty_is_one_and_one_empty_is_zero():
    empty = _mask(np.zeros((3, 3, 3), dtype=np.uint8))
    full = np.zeros((3, 3, 3), dtype=np.uint8)
    full[1, 1, 1] = 1
    assert dice3d(empty, empty, 1) == 1.0
    assert dice3d(empty, _mask(full), 1) == 0.0


def test_dice_symmetric_random(rng):
    for _ in range(20):
        a = _mask(rng.integers(0, 4, size=(5, 5, 5), dtype=np.uint8))
        b = _mask(rng.integers(0, 4, size=(5, 5, 5), dtype=np.uint8))
        for c in (1, 2, 3):
            assert dice3d(a, b, c) == dice3d(b, a, c)


def test_dice_matches_counting_oracle_on_200_random_pairs(rng):
    for _ in range(200):
        dims = tuple(rng.integers(2, 9, size=3))
        a = rng.integers(0, 4, size=dims, dtype=np.uint8)
        b = rng.integers(0, 4, size=dims, dtype=np.uint8)
        c = int(rng.integers(1, 4))
        na = int((a == c).sum())
        nb = int((b == c).sum())
        ni = int(((a == c) & (b == c)).sum())
        expected = 1.0 if na + nb == 0 else 2 * ni / (na + nb)
        assert dice3d(_mask(a), _mask(b), c) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# hd95 with exhaustive oracle
# ---------------------------------------------------------------------------


def _oracle_boundary(labels: np.ndarray, label: int, spacing) -> np.ndarray:
    """All-pairs oracle support: independent surface extraction."""
    points = []
    nx, ny, nz = labels.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if labels[x, y, z] != label:
                    continue
                on_edge = False
                for dx, dy, dz in (
                    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
                ):
                    u, v, w = x + dx, y + dy, z + dz
                    if not (0 <= u < nx and 0 <= v < ny and 0 <= w < nz):
                        on_edge = True
                        break
                    if labels[u, v, w] != label:
                        on_edge = True
                        break
                if on_edge:
                    points.append((x * spacing[0], y * spacing[1], z * spacing[2]))
    return np.asarray(points, dtype=np.float64)


def _oracle_hd95(a: np.ndarray, b: np.ndarray, label: int, spacing) -> float:
    pa = _oracle_boundary(a, label, spacing)
    pb = _oracle_boundary(b, label, spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95))


def test_hd95_identical_masks_is_zero():
    arr = np.zeros((5, 5, 5), dtype=np.uint8)
    arr[1:4, 1:4, 1:4] = 2
    assert hd95(_mask(arr), _mask(arr), 2) == 0.0


def test_hd95_two_single_voxels():
    a = np.zeros((5, 5, 5), dtype=np.uint8)
    b = np.zeros((5, 5, 5), dtype=np.uint8)
    a[1, 1, 1] = 1
    b[4, 1, 1] = 1
    assert hd95(_mask(a), _mask(b), 1) == pytest.approx(3.0)


def test_hd95_empty_surface_raises():
    a = np.zeros((3, 3, 3), dtype=np.uint8)
    b = np.zeros((3, 3, 3), dtype=np.uint8)
    a[1, 1, 1] = 1
    with pytest.raises(EmptySurfaceError):
        hd95(_mask(a), _mask(b), 1)


def test_hd95_matches_exhaustive_oracle_on_random_masks(rng):
    spacing = (1.5, 1.0, 2.0)
    checked = 0
    while checked < 200:
        dims = tuple(rng.integers(2, 9, size=3))
        a = (rng.random(dims) < 0.35).astype(np.uint8)
        b = (rng.random(dims) < 0.35).astype(np.uint8)
        if not a.any() or not b.any():
            continue
        got = hd95(_mask(a, spacing), _mask(b, spacing), 1)
        want = _oracle_hd95(a, b, 1, spacing)
        assert got == pytest.approx(want, abs=1e-9)
        checked += 1


def test_hd95_symmetric(rng):
    a = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
    b = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
    a[0, 0, 0] = b[5, 5, 5] = 1
    assert hd95(_mask(a), _mask(b), 1) == hd95(_mask(b), _mask(a), 1)


# ---------------------------------------------------------------------------
# generalized dice
# ---------------------------------------------------------------------------


def test_generalized_dice_perfect_prediction_is_zero(rng):
    arr = rng.integers(0, 4, size=(6, 6, 6), dtype=np.uint8)
    assert generalized_dice(_mask(arr), _mask(arr)) == pytest.approx(0.0)
    # also for arbitrary explicit weights
    assert generalized_dice(_mask(arr), _mask(arr), {1: 0.3, 2: 5.0}) == pytest.approx(0.0)


def test_inverse_volume_weights_two_class_example():
    arr = np.zeros((5, 5, 5), dtype=np.uint8)
    flat = arr.reshape(-1)
    flat[:10] = 1
    flat[10:50] = 2
    weights = inverse_volume_weights(_mask(arr))
    # volumes 10 and 40: raw weights 1/0.2 and 1/0.8, normalized to 1.0 and 0.25
    assert weights[1] == pytest.approx(1.0)
    assert weights[2] == pytest.approx(0.25)


def test_inverse_volume_weights_equal_volumes():
    arr = np.zeros((4, 4, 4), dtype=np.uint8)
    flat = arr.reshape(-1)
    flat[:8] = 1
    flat[8:16] = 2
    flat[16:24] = 3
    weights = inverse_volume_weights(_mask(arr))
    assert weights == {1: pytest.approx(1.0), 2: pytest.approx(1.0), 3: pytest.approx(1.0)}


# ---------------------------------------------------------------------------
# ssim / ncc
# ---------------------------------------------------------------------------


def test_ssim_identical_is_one(rng):
    a = rng.random((10, 10, 10))
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_inverted_below_one(rng):
    a = rng.random((10, 10, 10))
    assert ssim(a, 1.0 - a) < 1.0


def test_ssim_constant_pair_is_one():
    a = np.full((8, 8, 8), 0.4)
    assert ssim(a, a.copy()) == pytest.approx(1.0)


def test_ncc_self_and_anticorrelation(rng):
    a = rng.random((6, 6, 6))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 1.0 - a) == pytest.approx(-1.0)


def test_ncc_independent_fields_near_zero():
    gen = np.random.default_rng(7)
    a = gen.random((32, 32, 32))
    b = gen.random((32, 32, 32))
    assert abs(ncc(a, b)) < 0.05


def test_ncc_zero_variance_raises():
    with pytest.raises(ZeroVarianceError):
        ncc(np.full((4, 4, 4), 0.5), np.random.default_rng(0).random((4, 4, 4)))


def test_ncc_invariant_under_positive_affine_rescale(rng):
    a = rng.random((6, 6, 6))
    b = rng.random((6, 6, 6))
    assert ncc(2.5 * a + 0.3, b) == pytest.approx(ncc(a, b))


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------


def test_smoothness_constant_field_is_zero():
    vectors = np.full((3, 4, 4, 4), 1.7)
    assert smoothness(DeformationField(vectors, (1.0, 1.0, 1.0))) == 0.0


def test_smoothness_linear_field_exact():
    alpha = 0.37
    nx, ny, nz = 6, 5, 4
    vectors = np.zeros((3, nx, ny, nz))
    vectors[0] = alpha * np.arange(nx)[:, None, None]
    got = smoothness(DeformationField(vectors, (1.0, 1.0, 1.0)))
    assert got == pytest.approx(alpha**2, abs=1e-9)


def test_smoothness_quadratic_in_amplitude(rng):
    vectors = rng.random((3, 5, 5, 5))
    base = smoothness(DeformationField(vectors, (1.0, 1.0, 1.0)))
    doubled = smoothness(DeformationField(2 * vectors, (1.0, 1.0, 1.0)))
    assert doubled == pytest.approx(4 * base)


# ---------------------------------------------------------------------------
# correction loss and composites
# ---------------------------------------------------------------------------


def _grid(values, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.asarray(values, dtype=np.float32), spacing)


def test_correction_loss_exact_match_is_zero(rng):
    values = rng.random((4, 4, 4), dtype=np.float32)
    labels = rng.integers(0, 4, size=(4, 4, 4), dtype=np.uint8)
    assert correction_loss(_grid(values), _grid(values), _mask(labels), _mask(labels)) == 0.0


def test_correction_loss_constant_image_offset():
    a = _grid(np.full((4, 4, 4), 0.5))
    b = _grid(np.full((4, 4, 4), 0.6))
    m = _mask(np.zeros((4, 4, 4), dtype=np.uint8))
    assert correction_loss(a, b, m, m) == pytest.approx(0.1, abs=1e-7)


def test_correction_loss_single_label_flips():
    n = 4 * 4 * 4
    d = 5
    labels_a = np.zeros((4, 4, 4), dtype=np.uint8)
    labels_b = labels_a.copy()
    labels_b.reshape(-1)[:d] = 2
    img = _grid(np.zeros((4, 4, 4)))
    got = correction_loss(img, img, _mask(labels_a), _mask(labels_b))
    assert got == pytest.approx(2 * d / (4 * n))


def test_composite_losses_zero_components():
    out = composite_losses(0.0, 0.0, 0.0, 0.0)
    assert (out.align, out.fid, out.total) == (0.0, 0.0, 0.0)


def test_composite_losses_alignment_weighting():
    out = composite_losses(corr=1.0, sm=0.0, img_ssim_loss=0.0, mask=0.0)
    assert out.align == pytest.approx(20.0)


def test_composite_losses_linear_in_weights():
    weights = LossWeights()
    doubled = LossWeights(
        align=2 * weights.align,
        fid=2 * weights.fid,
        mask=2 * weights.mask,
        corr=weights.corr,
        sm=weights.sm,
        img_ssim=weights.img_ssim,
        lpips=weights.lpips,
    )
    one = composite_losses(0.2, 0.1, 0.3, 0.4, weights=weights, lpips_score=0.5)
    two = composite_losses(0.2, 0.1, 0.3, 0.4, weights=doubled, lpips_score=0.5)
    assert two.total == pytest.approx(2 * one.total)


def test_composite_losses_lpips_hook_defaults_to_zero():
    without = composite_losses(0.0, 0.0, 0.0, 0.0, lpips_score=None)
    with_hook = composite_losses(0.0, 0.0, 0.0, 0.0, lpips_score=0.25)
    assert without.fid == 0.0
    assert with_hook.fid == pytest.approx(0.25)


def test_mask_loss_zero_for_identical(rng):
    arr = rng.integers(0, 4, size=(6, 6, 6), dtype=np.uint8)
    arr[0, 0, 0] = 1
    assert mask_loss(_mask(arr), _mask(arr)) == pytest.approx(0.0, abs=1e-9)


def test_report_table_has_expected_columns():
    report = MetricReport(
        dice={1: 0.9, 2: 0.8, 3: 0.95},
        hd95_mm={1: 4.0, 2: 2.0, 3: 1.0},
    )
    text = format_report_table({"case1": report})
    header = text.splitlines()[0]
    for col in ("Dice Pool", "Dice Myo", "Dice RV", "Dice Avg", "HD95 Pool", "HD95 Avg"):
        assert col in header
    assert report.dice_avg == pytest.approx((0.9 + 0.8 + 0.95) / 3)
