from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiolattice.errors import DegenerateMaskError, EmptyInputError, ZeroEDVolumeError
from cardiolattice.severity import (
    NormalizationStats,
    f_arv,
    f_dcm,
    f_hcm,
    f_minf,
    fit_normalization,
    normalize_to_gamma,
)
from cardiolattice.volume import MYO, POOL, RV, Pathology
from conftest import ellipsoid_indicator, flat_subject


def _subject_with_labels(labels_ed, labels_es=None, spacing=(1.0, 1.0, 1.0)):
    if labels_es is None:
        labels_es = labels_ed
    return flat_subject(labels_ed, labels_es, spacing)


# ---------------------------------------------------------------------------
# f_dcm (sphericity)
# ---------------------------------------------------------------------------


def test_dcm_sphere_ratio_near_one():
    dims, spacing = (26, 26, 26), (1.0, 1.0, 1.0)
    ind = ellipsoid_indicator(dims, spacing, (12.5, 12.5, 12.5), (10, 10, 10))
    labels = np.zeros(dims, dtype=np.uint8)
    labels[ind] = POOL
    assert f_dcm(_subject_with_labels(labels)) == pytest.approx(1.0, rel=0.05)


def test_dcm_ellipsoid_ratio_half():
    dims, spacing = (70, 40, 40), (1.0, 1.0, 1.0)
    ind = ellipsoid_indicator(dims, spacing, (34.5, 19.5, 19.5), (30, 15, 15))
    labels = np.zeros(dims, dtype=np.uint8)
    labels[ind] = POOL
    assert f_dcm(_subject_with_labels(labels)) == pytest.approx(0.5, rel=0.05)


def test_dcm_two_voxel_line_degenerates_to_zero_ratio():
    labels = np.zeros((5, 5, 5), dtype=np.uint8)
    labels[1, 1, 1] = POOL
    labels[2, 1, 1] = POOL
    assert f_dcm(_subject_with_labels(labels)) == pytest.approx(0.0, abs=1e-9)


def test_dcm_single_voxel_raises():
    labels = np.zeros((5, 5, 5), dtype=np.uint8)
    labels[1, 1, 1] = POOL
    with pytest.raises(DegenerateMaskError):
        f_dcm(_subject_with_labels(labels))


def test_dcm_invariant_under_image_intensity():
    dims = (10, 10, 10)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[3:7, 3:7, 3:7] = POOL
    s1 = _subject_with_labels(labels)
    from cardiolattice.volume import LabelMask, Subject, VoxelGrid

    bright = VoxelGrid(np.full(dims, 0.9, dtype=np.float32), (1.0, 1.0, 1.0))
    mask = LabelMask(labels, (1.0, 1.0, 1.0))
    s2 = Subject("bright", (bright, mask), (bright, mask), Pathology.DCM)
    assert f_dcm(s1) == f_dcm(s2)


# ---------------------------------------------------------------------------
# f_hcm (myocardial volume)
# ---------------------------------------------------------------------------


def test_hcm_counts_voxels():
    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[1:4, 1:4, 1:4] = MYO
    assert f_hcm(_subject_with_labels(labels)) == pytest.approx(27.0)


def test_hcm_empty_myo_is_zero():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    assert f_hcm(_subject_with_labels(labels)) == 0.0


def test_hcm_spherical_shell_matches_analytic_volume():
    dims, spacing = (70, 70, 70), (1.0, 1.0, 1.0)
    center = (34.5, 34.5, 34.5)
    outer = ellipsoid_indicator(dims, spacing, center, (30, 30, 30))
    inner = ellipsoid_indicator(dims, spacing, center, (20, 20, 20))
    labels = np.zeros(dims, dtype=np.uint8)
    labels[outer & ~inner] = MYO
    expected = 4.0 / 3.0 * np.pi * (30**3 - 20**3)
    assert f_hcm(_subject_with_labels(labels)) == pytest.approx(expected, rel=0.03)


# ---------------------------------------------------------------------------
# f_minf (ejection fraction)
# ---------------------------------------------------------------------------


def _pool_labels(n):
    labels = np.zeros((10, 10, 10), dtype=np.uint8)
    labels.reshape(-1)[:n] = POOL
    return labels


def test_minf_half_emptied_pool():
    subject = _subject_with_labels(_pool_labels(100), _pool_labels(50))
    assert f_minf(subject) == pytest.approx(0.5)


def test_minf_no_contraction_is_zero():
    subject = _subject_with_labels(_pool_labels(80), _pool_labels(80))
    assert f_minf(subject) == pytest.approx(0.0)


def test_minf_full_ejection_is_one():
    subject = _subject_with_labels(_pool_labels(60), _pool_labels(0))
    assert f_minf(subject) == pytest.approx(1.0)


def test_minf_zero_ed_volume_raises():
    subject = _subject_with_labels(_pool_labels(0), _pool_labels(0))
    with pytest.raises(ZeroEDVolumeError):
        f_minf(subject)


# ---------------------------------------------------------------------------
# f_arv (RV volume)
# ---------------------------------------------------------------------------


def test_arv_counts_voxels_with_spacing():
    labels = np.zeros((6, 6, 6), dtype=np.uint8)
    labels.reshape(-1)[:10] = RV
    subject = _subject_with_labels(labels, labels, spacing=(2.0, 2.0, 2.0))
    assert f_arv(subject) == pytest.approx(80.0)


def test_arv_empty_rv_is_zero():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    assert f_arv(_subject_with_labels(labels)) == 0.0


def test_arv_wedge_shell_matches_analytic_volume():
    # Crescent built as an azimuthal wedge of a spherical shell: the wedge
    # fraction of the shell volume is exact for the continuous region.
    dims, spacing = (90, 90, 90), (1.0, 1.0, 1.0)
    center = np.array([44.5, 44.5, 44.5])
    axes = [np.arange(dims[i]) * spacing[i] for i in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
    theta = np.arctan2(y - center[1], x - center[0])
    half_width = np.deg2rad(75)
    wedge = (r > 25) & (r <= 40) & (np.abs(theta) <= half_width)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[wedge] = RV
    expected = (2 * half_width / (2 * np.pi)) * 4.0 / 3.0 * np.pi * (40**3 - 25**3)
    assert f_arv(_subject_with_labels(labels)) == pytest.approx(expected, rel=0.03)


# ---------------------------------------------------------------------------
# percentile normalization
# ---------------------------------------------------------------------------


def test_fit_normalization_order_statistics_oracle():
    stats = fit_normalization(list(range(101)), Pathology.HCM)
    table = dict(stats.percentile_table)
    assert table[5.0] == pytest.approx(5.0)
    assert table[50.0] == pytest.approx(50.0)
    assert table[95.0] == pytest.approx(95.0)


def test_fit_normalization_all_equal_values():
    stats = fit_normalization([3.2] * 10, Pathology.ARV)
    assert all(v == pytest.approx(3.2) for _, v in stats.percentile_table)


def test_fit_normalization_two_values_interpolates():
    stats = fit_normalization([0.0, 10.0], Pathology.DCM)
    assert dict(stats.percentile_table)[50.0] == pytest.approx(5.0)


def test_fit_normalization_rejects_short_input():
    with pytest.raises(EmptyInputError):
        fit_normalization([1.0], Pathology.DCM)


def test_normalize_to_gamma_at_p50():
    stats = fit_normalization(list(range(101)), Pathology.HCM)
    assert normalize_to_gamma(50.0, stats).gamma == pytest.approx(0.50)


def test_normalize_to_gamma_clamps_below_table():
    stats = fit_normalization(list(range(101)), Pathology.HCM)
    assert normalize_to_gamma(-10.0, stats).gamma == 0.0
    assert normalize_to_gamma(1e6, stats).gamma == 1.0


def test_normalize_to_gamma_decreasing_at_p50():
    stats = fit_normalization(list(range(101)), Pathology.MINF)
    assert stats.direction == "decreasing"
    assert normalize_to_gamma(50.0, stats).gamma == pytest.approx(0.50)
    # low EF is severe
    assert normalize_to_gamma(-5.0, stats).gamma == 1.0


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=40),
    st.floats(min_value=-120, max_value=120),
    st.floats(min_value=-120, max_value=120),
)
def test_normalize_monotone(values, x, y):
    stats = fit_normalization(values, Pathology.HCM, direction="increasing")
    lo, hi = sorted((x, y))
    g_lo = normalize_to_gamma(lo, stats).gamma
    g_hi = normalize_to_gamma(hi, stats).gamma
    assert g_lo <= g_hi + 1e-12
    dec = fit_normalization(values, Pathology.MINF, direction="decreasing")
    assert normalize_to_gamma(lo, dec).gamma >= normalize_to_gamma(hi, dec).gamma - 1e-12


def test_stats_json_round_trip():
    stats = fit_normalization([1.0, 2.0, 5.0, 9.0], Pathology.ARV)
    again = NormalizationStats.from_json_dict(stats.to_json_dict())
    assert again == stats
