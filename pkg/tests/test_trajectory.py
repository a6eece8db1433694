from __future__ import annotations

import numpy as np
import pytest

from cardiolattice.anchors import Anchor, AnchorSet
from cardiolattice.errors import (
    MissingPathologyError,
    NonMonotoneMappingError,
    NTooSmallError,
    ZeroVectorError,
)
from cardiolattice.metrics import dice3d
from cardiolattice.phantom import GridSpec, decode, encode, make_phantom_subject
from cardiolattice.severity import f_hcm, fit_normalization, normalize_to_gamma
from cardiolattice.trajectory import (
    SeverityMapping,
    build_segment,
    build_severity_mapping,
    evaluate_severity_at,
    isotonic_repair,
    load_cohort,
    resample_weights,
    save_cohort,
    slerp,
    synthesize_cohort,
)
from cardiolattice.volume import POOL, Pathology, volume_of

GRID = GridSpec((64, 64, 64), (2.0, 2.0, 2.0))


# ---------------------------------------------------------------------------
# slerp
# ---------------------------------------------------------------------------


def test_slerp_endpoints_exact(rng):
    z0 = rng.random(8) + 0.1
    z1 = rng.random(8) + 0.1
    np.testing.assert_array_equal(slerp(z0, z1, 0.0), z0)
    np.testing.assert_array_equal(slerp(z0, z1, 1.0), z1)


def test_slerp_orthogonal_midpoint():
    z0 = np.array([1.0, 0.0, 0.0])
    z1 = np.array([0.0, 1.0, 0.0])
    mid = slerp(z0, z1, 0.5)
    np.testing.assert_allclose(mid, (z0 + z1) / np.sqrt(2.0), atol=1e-9)


def test_slerp_collinear_falls_back_to_linear():
    z0 = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(slerp(z0, 2.0 * z0, 0.5), 1.5 * z0, atol=1e-12)


def test_slerp_zero_vector_raises():
    with pytest.raises(ZeroVectorError):
        slerp(np.zeros(3), np.ones(3), 0.5)


def test_slerp_angle_grows_linearly(rng):
    z0 = rng.random(6) + 0.2
    z1 = rng.random(6) + 0.2
    z0 /= np.linalg.norm(z0)
    z1 /= np.linalg.norm(z1)
    theta = np.arccos(np.clip(np.dot(z0, z1), -1, 1))
    for w in (0.25, 0.5, 0.75):
        zw = slerp(z0, z1, w)
        ang = np.arccos(
            np.clip(np.dot(z0, zw) / (np.linalg.norm(z0) * np.linalg.norm(zw)), -1, 1)
        )
        assert ang == pytest.approx(w * theta, abs=1e-9)


# ---------------------------------------------------------------------------
# monotone repair and inversion
# ---------------------------------------------------------------------------


def test_isotonic_repair_fixes_small_inversions():
    values = [0.0, 0.2, 0.18, 0.3, 0.29, 0.5]
    repaired = isotonic_repair(values)
    assert np.all(np.diff(repaired) >= 0)
    assert repaired[0] == 0.0
    # projection does not move already monotone values
    monotone = [0.0, 0.1, 0.4, 0.9]
    np.testing.assert_array_equal(isotonic_repair(monotone), monotone)


def _mapping_from_fn(fn, knots=51):
    omegas = np.linspace(0.0, 1.0, knots)
    return SeverityMapping(
        omegas=tuple(float(w) for w in omegas),
        gammas=tuple(float(fn(w)) for w in omegas),
    )


def test_resample_weights_quadratic_analytic_inverse():
    mapping = _mapping_from_fn(lambda w: w * w)
    got = resample_weights(mapping, 3)
    np.testing.assert_allclose(got, [0.0, np.sqrt(0.5), 1.0], atol=1e-3)


def test_resample_weights_linear_identity():
    mapping = _mapping_from_fn(lambda w: w)
    got = resample_weights(mapping, 5)
    np.testing.assert_allclose(got, np.linspace(0, 1, 5), atol=1e-9)


def test_resample_weights_endpoints_only():
    mapping = _mapping_from_fn(lambda w: 0.2 + 0.6 * w**3)
    np.testing.assert_array_equal(resample_weights(mapping, 2), [0.0, 1.0])


def test_resample_weights_rejects_small_n_and_flat_mapping():
    mapping = _mapping_from_fn(lambda w: w)
    with pytest.raises(NTooSmallError):
        resample_weights(mapping, 1)
    with pytest.raises(NonMonotoneMappingError):
        resample_weights(_mapping_from_fn(lambda w: 0.5), 3)


def test_resample_weights_uniform_targets_property(rng):
    mapping = _mapping_from_fn(lambda w: 0.1 + 0.8 * (w**2 + 0.2 * w) / 1.2)
    n = 9
    omega_stars = resample_weights(mapping, n)
    assert np.all(np.diff(omega_stars) > 0)
    from scipy.interpolate import PchipInterpolator

    spline = PchipInterpolator(np.asarray(mapping.omegas), np.asarray(mapping.gammas))
    achieved = spline(omega_stars)
    targets = np.linspace(mapping.gamma_min, mapping.gamma_max, n)
    np.testing.assert_allclose(achieved, targets, atol=1e-9)


# ---------------------------------------------------------------------------
# severity mapping on phantom segments
# ---------------------------------------------------------------------------


def _hcm_stats():
    sweep = [
        f_hcm(make_phantom_subject(f"sw{i}", Pathology.HCM, s, GRID, seed=40 + i))
        for i, s in enumerate(np.linspace(0.0, 1.0, 12))
    ]
    return fit_normalization(sweep, Pathology.HCM)


def _hcm_segment(stats):
    src = make_phantom_subject("src", Pathology.HCM, 0.1, GRID, seed=1)
    tgt = make_phantom_subject("tgt", Pathology.HCM, 0.9, GRID, seed=2)
    g_src = normalize_to_gamma(f_hcm(src), stats).gamma
    g_tgt = normalize_to_gamma(f_hcm(tgt), stats).gamma
    return build_segment(src, tgt, g_src, g_tgt, Pathology.HCM), src, tgt


def test_mapping_sample_grid_and_endpoint_anchoring():
    stats = _hcm_stats()
    segment, _, _ = _hcm_segment(stats)
    mapping = build_severity_mapping(segment, 2, f_hcm, stats, GRID)
    assert mapping.omegas == (0.0, 0.5, 1.0)
    full = build_severity_mapping(segment, 16, f_hcm, stats, GRID)
    assert abs(full.gammas[0] - segment.gamma_src) <= 0.02
    assert abs(full.gammas[-1] - segment.gamma_tgt) <= 0.02


def test_mapping_affine_family_stays_affine():
    # Collinear endpoints make the interpolation exactly linear per slot, so
    # the mean pool radius (cube root of pool volume) is affine in omega.
    z0 = np.array([20.0, 11.0, 10.0, 5.0, 1.0, 1.0, 0.3, 0.2])
    z1 = 2.0 * z0
    grid = GridSpec((72, 72, 72), (2.0, 2.0, 2.0))

    def mean_pool_radius(subject):
        return (volume_of(subject.ed[1], POOL) * 3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)

    radii = np.linspace(12.0, 27.0, 101)
    stats = fit_normalization(radii, Pathology.OTHER, direction="increasing")

    from cardiolattice.phantom import LatentVector
    from cardiolattice.trajectory import TrajectorySegment

    segment = TrajectorySegment(
        pathology=Pathology.OTHER,
        index=0,
        source_id="a",
        target_id="b",
        gamma_src=0.0,
        gamma_tgt=1.0,
        latents={"ed": (LatentVector(z0), LatentVector(z1)), "es": (LatentVector(z0), LatentVector(z1))},
    )
    j = 20
    mapping = build_severity_mapping(segment, j, mean_pool_radius, stats, grid)
    gammas = np.asarray(mapping.gammas)
    chord = gammas[0] + (gammas[-1] - gammas[0]) * np.arange(j + 1) / j
    assert np.max(np.abs(gammas - chord)) <= 0.02


# ---------------------------------------------------------------------------
# cohort synthesis
# ---------------------------------------------------------------------------


def _mini_anchor_set(stats, src, tgt):
    g_src = normalize_to_gamma(f_hcm(src), stats).gamma
    g_tgt = normalize_to_gamma(f_hcm(tgt), stats).gamma
    a0 = Anchor(src.id, Pathology.HCM, g_src, 5)
    a1 = Anchor(tgt.id, Pathology.HCM, g_tgt, 95)
    return AnchorSet(
        regime="A7",
        anchors=(a0, a1),
        selections={Pathology.HCM: (a0, a1)},
        selection_slots=2,
    )


@pytest.fixture(scope="module")
def hcm_setup():
    stats = _hcm_stats()
    src = make_phantom_subject("src", Pathology.HCM, 0.1, GRID, seed=1)
    tgt = make_phantom_subject("tgt", Pathology.HCM, 0.9, GRID, seed=2)
    anchor_set = _mini_anchor_set(stats, src, tgt)
    return stats, src, tgt, anchor_set


def test_two_anchor_cohort_has_interior_points_only(hcm_setup):
    stats, src, tgt, anchor_set = hcm_setup
    cohort = synthesize_cohort(
        anchor_set, Pathology.HCM, {"src": src, "tgt": tgt}, stats, GRID,
        seed=5, n_per_segment=5, j_probes=12,
    )
    assert len(cohort.patients) == 3
    gammas = cohort.gammas
    assert np.all(np.diff(gammas) > 0)
    for g in gammas:
        for anchor_gamma in cohort.anchor_gammas:
            assert abs(g - anchor_gamma) > 1e-6


def test_cohort_deterministic_bytes(hcm_setup):
    stats, src, tgt, anchor_set = hcm_setup
    kwargs = dict(stats=stats, grid=GRID, seed=9, n_per_segment=4, j_probes=8)
    c1 = synthesize_cohort(anchor_set, Pathology.HCM, {"src": src, "tgt": tgt}, **kwargs)
    c2 = synthesize_cohort(anchor_set, Pathology.HCM, {"src": src, "tgt": tgt}, **kwargs)
    for p1, p2 in zip(c1.patients, c2.patients):
        assert p1.id == p2.id
        assert p1.ed[0].values.tobytes() == p2.ed[0].values.tobytes()
        assert np.array_equal(p1.ed[1].labels, p2.ed[1].labels)
        assert np.array_equal(p1.es[1].labels, p2.es[1].labels)


def test_segment_endpoints_reproduce_anchor_masks(hcm_setup):
    stats, src, tgt, anchor_set = hcm_setup
    cohort = synthesize_cohort(
        anchor_set, Pathology.HCM, {"src": src, "tgt": tgt}, stats, GRID,
        seed=5, n_per_segment=4, j_probes=8,
    )
    segment = build_segment(src, tgt, cohort.anchor_gammas[0], cohort.anchor_gammas[1], Pathology.HCM)
    for subject, omega in ((src, 0.0), (tgt, 1.0)):
        for phase in ("ed", "es"):
            _, decoded_mask = decode(segment.latent_at(phase, omega), GRID)
            for label in (1, 2, 3):
                assert dice3d(decoded_mask, subject.phase(phase)[1], label) >= 0.95


def test_synthesize_requires_two_anchors(hcm_setup):
    stats, src, _, _ = hcm_setup
    a0 = Anchor("src", Pathology.HCM, 0.1, 5)
    lone = AnchorSet("A7", (a0,), {Pathology.HCM: (a0,)}, 1)
    with pytest.raises(MissingPathologyError):
        synthesize_cohort(lone, Pathology.HCM, {"src": src}, stats, GRID, seed=1, n_per_segment=4)


def test_cohort_save_load_round_trip(tmp_path, hcm_setup):
    stats, src, tgt, anchor_set = hcm_setup
    cohort = synthesize_cohort(
        anchor_set, Pathology.HCM, {"src": src, "tgt": tgt}, stats, GRID,
        seed=5, n_per_segment=4, j_probes=8,
    )
    save_cohort(cohort, tmp_path / "cohort")
    loaded = load_cohort(tmp_path / "cohort")
    assert loaded.pathology == cohort.pathology
    assert loaded.regime == cohort.regime
    assert len(loaded.patients) == len(cohort.patients)
    for p1, p2 in zip(cohort.patients, loaded.patients):
        assert p1.id == p2.id
        assert p1.gamma == p2.gamma
        assert p1.ed[0].values.tobytes() == p2.ed[0].values.tobytes()
        assert np.array_equal(p1.es[1].labels, p2.es[1].labels)
    assert loaded.segments == cohort.segments
