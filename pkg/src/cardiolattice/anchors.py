"""Anchor selection: pin real subjects to target severity percentiles.

Three cumulative labeling regimes pick anchors at fixed gamma targets per
pathology (0.05/0.95, plus 0.50, plus 0.25/0.75). The gamma-0.05 baseline
comes from the healthy subjects, the rest from that pathology's subjects;
"nearest" means minimal absolute biomarker distance to the percentile
value, ties broken by the lower subject id. A subject shared across
pathologies is labeled once, so the deduplicated anchor list can be
smaller than the number of selection slots; the per-pathology selections
are kept alongside because a shared subject carries a different gamma
under each pathology's severity scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import MissingHealthyError, MissingPathologyError
from .severity import NormalizationStats, normalize_to_gamma
from .volume import Pathology, Subject

REGIMES = ("A7", "A11", "A19")

_REGIME_GAMMA_TARGETS: dict[str, tuple[float, ...]] = {
    "A7": (0.05, 0.95),
    "A11": (0.05, 0.50, 0.95),
    "A19": (0.05, 0.25, 0.50, 0.75, 0.95),
}


def anchor_gamma_targets(regime: str) -> list[float]:
    """Gamma targets for a labeling regime, ascending."""
    if regime not in _REGIME_GAMMA_TARGETS:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return sorted(_REGIME_GAMMA_TARGETS[regime])


@dataclass(frozen=True)
class Anchor:
    """One labeled subject pinned to a severity percentile."""

    subject_id: str
    pathology: Pathology
    gamma: float
    target_percentile: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"anchor gamma must lie in [0,1], got {self.gamma}")
        if self.target_percentile not in (5, 25, 50, 75, 95):
            raise ValueError(f"unsupported target percentile {self.target_percentile}")


@dataclass(frozen=True)
class AnchorSet:
    """Deduplicated anchors plus the per-pathology trajectory selections."""

    regime: str
    anchors: tuple[Anchor, ...]
    selections: Mapping[Pathology, tuple[Anchor, ...]]
    selection_slots: int

    @property
    def subject_ids(self) -> frozenset[str]:
        return frozenset(anchor.subject_id for anchor in self.anchors)

    @property
    def subject_count(self) -> int:
        return len(self.anchors)

    def trajectory(self, pathology: Pathology) -> tuple[Anchor, ...]:
        """Anchors of one pathology's trajectory, strictly increasing in gamma."""
        return self.selections[pathology]

    def to_json_dict(self) -> dict:
        return {
            "regime": self.regime,
            "anchors": [
                {
                    "subject_id": a.subject_id,
                    "pathology": a.pathology.value,
                    "gamma": a.gamma,
                    "target_percentile": a.target_percentile,
                }
                for a in self.anchors
            ],
            "selections": {
                pathology.value: [
                    {
                        "subject_id": a.subject_id,
                        "gamma": a.gamma,
                        "target_percentile": a.target_percentile,
                    }
                    for a in chain
                ]
                for pathology, chain in sorted(
                    self.selections.items(), key=lambda kv: kv[0].value
                )
            },
            "selection_slots": self.selection_slots,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AnchorSet":
        anchors = tuple(
            Anchor(
                subject_id=a["subject_id"],
                pathology=Pathology(a["pathology"]),
                gamma=float(a["gamma"]),
                target_percentile=int(a["target_percentile"]),
            )
            for a in data["anchors"]
        )
        selections = {
            Pathology(name): tuple(
                Anchor(
                    subject_id=a["subject_id"],
                    pathology=Pathology(name),
                    gamma=float(a["gamma"]),
                    target_percentile=int(a["target_percentile"]),
                )
                for a in chain
            )
            for name, chain in data["selections"].items()
        }
        return cls(
            regime=data["regime"],
            anchors=anchors,
            selections=selections,
            selection_slots=int(data["selection_slots"]),
        )


CohortEntry = tuple[Subject, Mapping[Pathology, float]]


def _target_biomarker(stats: NormalizationStats, gamma_target: float) -> float:
    """Biomarker value whose normalized severity equals the gamma target."""
    rank = gamma_target * 100.0
    if stats.direction == "decreasing":
        rank = 100.0 - rank
    return stats.value_at_rank(rank)


def _nearest(entries: Sequence[CohortEntry], pathology: Pathology, value: float) -> CohortEntry:
    return min(
        entries,
        key=lambda entry: (abs(entry[1][pathology] - value), entry[0].id),
    )


def select_anchors(
    cohort: Sequence[CohortEntry],
    stats: Mapping[Pathology, NormalizationStats],
    regime: str,
) -> AnchorSet:
    """Pick the anchor set for a regime from a cohort with known biomarkers."""
    targets = anchor_gamma_targets(regime)
    healthy = [entry for entry in cohort if entry[0].pathology == Pathology.HEALTHY]
    if not healthy:
        raise MissingHealthyError("cohort has no healthy subject for the baseline anchor")

    selections: dict[Pathology, tuple[Anchor, ...]] = {}
    slots = 0
    for pathology in sorted(stats, key=lambda p: p.value):
        table = stats[pathology]
        diseased = [entry for entry in cohort if entry[0].pathology == pathology]
        if not diseased:
            raise MissingPathologyError(f"cohort has no {pathology.value} subject")

        chain: list[Anchor] = []
        for gamma_target in targets:
            pool = healthy if gamma_target == targets[0] else diseased
            subject, biomarkers = _nearest(pool, pathology, _target_biomarker(table, gamma_target))
            slots += 1
            chain.append(
                Anchor(
                    subject_id=subject.id,
                    pathology=pathology,
                    gamma=normalize_to_gamma(biomarkers[pathology], table).gamma,
                    target_percentile=int(round(gamma_target * 100)),
                )
            )

        # one anchor per subject per trajectory, strictly increasing gamma
        seen: dict[str, Anchor] = {}
        for anchor in chain:
            seen.setdefault(anchor.subject_id, anchor)
        ordered = sorted(seen.values(), key=lambda a: (a.gamma, a.subject_id))
        pruned: list[Anchor] = []
        for anchor in ordered:
            if pruned and anchor.gamma <= pruned[-1].gamma:
                continue
            pruned.append(anchor)
        selections[pathology] = tuple(pruned)

    deduped: dict[str, Anchor] = {}
    for pathology in sorted(selections, key=lambda p: p.value):
        for anchor in selections[pathology]:
            deduped.setdefault(anchor.subject_id, anchor)
    anchors = tuple(sorted(deduped.values(), key=lambda a: (a.pathology.value, a.gamma, a.subject_id)))
    return AnchorSet(regime=regime, anchors=anchors, selections=selections, selection_slots=slots)
