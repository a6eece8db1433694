from __future__ import annotations

import numpy as np
import pytest

from cardiolattice.anchors import AnchorSet, anchor_gamma_targets, select_anchors
from cardiolattice.errors import MissingHealthyError, MissingPathologyError
from cardiolattice.severity import fit_normalization, normalize_to_gamma
from cardiolattice.volume import LabelMask, Pathology, Subject, VoxelGrid

PATHOLOGIES = (Pathology.DCM, Pathology.HCM, Pathology.MINF, Pathology.ARV)


def _dummy_subject(subject_id: str, pathology: Pathology) -> Subject:
    image = VoxelGrid(np.zeros((2, 2, 2), dtype=np.float32), (1.0, 1.0, 1.0))
    mask = LabelMask(np.zeros((2, 2, 2), dtype=np.uint8), (1.0, 1.0, 1.0))
    return Subject(subject_id, (image, mask), (image, mask), pathology)


def _entry(subject_id: str, pathology: Pathology, biomarkers: dict) -> tuple:
    return (_dummy_subject(subject_id, pathology), biomarkers)


def _uniform_stats():
    # Percentile value at rank k is exactly k for every pathology.
    return {p: fit_normalization(list(range(101)), p) for p in PATHOLOGIES}


def _cohort(shared_baseline: bool = False):
    """Cohort where every selection target has an exact, unique winner.

    With ``shared_baseline`` one healthy subject sits exactly at the
    gamma=0.05 target of both DCM and HCM.
    """
    entries = []
    # Healthy baselines. Gamma 0.05 targets: value 5 for increasing
    # biomarkers, value 95 for the decreasing MINF scale.
    far = {p: 50.0 for p in PATHOLOGIES}
    if shared_baseline:
        entries.append(_entry("h_shared", Pathology.HEALTHY, {**far, Pathology.DCM: 5.0, Pathology.HCM: 5.0}))
    else:
        entries.append(_entry("h_dcm", Pathology.HEALTHY, {**far, Pathology.DCM: 5.0}))
        entries.append(_entry("h_hcm", Pathology.HEALTHY, {**far, Pathology.HCM: 5.0}))
    entries.append(_entry("h_minf", Pathology.HEALTHY, {**far, Pathology.MINF: 95.0}))
    entries.append(_entry("h_arv", Pathology.HEALTHY, {**far, Pathology.ARV: 5.0}))

    for p in PATHOLOGIES:
        flip = p == Pathology.MINF
        for tag, gamma_target in (("g95", 0.95), ("g50", 0.50), ("g25", 0.25), ("g75", 0.75)):
            value = (1.0 - float(tag[1:]) / 100.0) * 100.0 if flip else float(tag[1:])
            entries.append(_entry(f"{p.value.lower()}_{tag}", p, {p: value}))
    return entries


def test_anchor_gamma_targets_per_regime():
    assert anchor_gamma_targets("A7") == [0.05, 0.95]
    assert anchor_gamma_targets("A11") == [0.05, 0.50, 0.95]
    assert anchor_gamma_targets("A19") == [0.05, 0.25, 0.50, 0.75, 0.95]
    with pytest.raises(ValueError):
        anchor_gamma_targets("A3")


def test_a7_with_distinct_baselines_has_eight_subjects():
    anchor_set = select_anchors(_cohort(), _uniform_stats(), "A7")
    assert anchor_set.subject_count == 8
    assert anchor_set.selection_slots == 8


def test_a7_with_shared_baseline_has_seven_subjects():
    anchor_set = select_anchors(_cohort(shared_baseline=True), _uniform_stats(), "A7")
    assert anchor_set.selection_slots == 8
    assert anchor_set.subject_count == 7


def test_regime_growth_and_nesting():
    cohort, stats = _cohort(), _uniform_stats()
    a7 = select_anchors(cohort, stats, "A7")
    a11 = select_anchors(cohort, stats, "A11")
    a19 = select_anchors(cohort, stats, "A19")
    # +4 and +8 selection slots before deduplication
    assert a11.selection_slots == a7.selection_slots + 4
    assert a19.selection_slots == a11.selection_slots + 8
    # on this collision-free cohort the subject counts grow the same way
    assert a11.subject_count == a7.subject_count + 4
    assert a19.subject_count == a11.subject_count + 8
    assert a7.subject_ids <= a11.subject_ids <= a19.subject_ids


def test_dedup_bound():
    anchor_set = select_anchors(_cohort(shared_baseline=True), _uniform_stats(), "A19")
    assert anchor_set.subject_count <= 4 * 5


def test_anchor_gamma_self_consistent():
    cohort, stats = _cohort(), _uniform_stats()
    biomarker_by_id = {entry[0].id: entry[1] for entry in cohort}
    anchor_set = select_anchors(cohort, stats, "A19")
    for pathology, chain in anchor_set.selections.items():
        for anchor in chain:
            expected = normalize_to_gamma(
                biomarker_by_id[anchor.subject_id][pathology], stats[pathology]
            ).gamma
            assert anchor.gamma == pytest.approx(expected)


def test_trajectories_strictly_increasing_in_gamma():
    anchor_set = select_anchors(_cohort(), _uniform_stats(), "A19")
    for chain in anchor_set.selections.values():
        gammas = [a.gamma for a in chain]
        assert all(b > a for a, b in zip(gammas, gammas[1:]))
        assert len(gammas) == 5


def test_minf_baseline_is_high_ef_healthy_subject():
    anchor_set = select_anchors(_cohort(), _uniform_stats(), "A7")
    chain = anchor_set.selections[Pathology.MINF]
    assert chain[0].subject_id == "h_minf"
    assert chain[0].gamma == pytest.approx(0.05)
    assert chain[-1].gamma == pytest.approx(0.95)


def test_ties_break_to_lower_subject_id():
    stats = _uniform_stats()
    entries = _cohort()
    # two DCM subjects equidistant from the gamma=0.95 target value 95
    entries = [e for e in entries if e[0].id != "dcm_g95"]
    entries.append(_entry("dcm_zz", Pathology.DCM, {Pathology.DCM: 96.0}))
    entries.append(_entry("dcm_aa", Pathology.DCM, {Pathology.DCM: 94.0}))
    anchor_set = select_anchors(entries, stats, "A7")
    assert "dcm_aa" in anchor_set.subject_ids
    assert "dcm_zz" not in anchor_set.subject_ids


def test_missing_groups_raise():
    stats = _uniform_stats()
    cohort = _cohort()
    no_healthy = [e for e in cohort if e[0].pathology != Pathology.HEALTHY]
    with pytest.raises(MissingHealthyError):
        select_anchors(no_healthy, stats, "A7")
    no_arv = [e for e in cohort if e[0].pathology != Pathology.ARV]
    with pytest.raises(MissingPathologyError):
        select_anchors(no_arv, stats, "A7")


def test_anchor_set_json_round_trip():
    anchor_set = select_anchors(_cohort(), _uniform_stats(), "A11")
    data = anchor_set.to_json_dict()
    again = AnchorSet.from_json_dict(data)
    assert again.regime == anchor_set.regime
    assert again.subject_ids == anchor_set.subject_ids
    assert again.selections[Pathology.DCM] == anchor_set.selections[Pathology.DCM]
