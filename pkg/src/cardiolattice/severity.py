"""Disease-severity biomarkers and the percentile map onto gamma in [0, 1].

Each pathology gets a mask-derived biomarker and a direction:

* DCM: LV sphericity index at ED (short over long pool axis), increasing;
* HCM: myocardial volume at ED (mm^3), increasing;
* MINF: LV ejection fraction, decreasing (lower EF means more severe);
* ARV: RV cavity volume at ED (mm^3), increasing.

Biomarkers map to gamma through a percentile table fitted on a reference
cohort: the k-th percentile corresponds to gamma k/100 for increasing
biomarkers (1 - k/100 for decreasing ones). Values outside the stored
P5..P95 range clamp to 0 or 1, which damps outliers at both ends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DegenerateMaskError, EmptyInputError, ZeroEDVolumeError
from .volume import MYO, POOL, RV, Pathology, Subject, principal_axis_lengths, volume_of

PERCENTILE_RANKS = (5.0, 25.0, 50.0, 75.0, 95.0)

Direction = str  # "increasing" | "decreasing"

SEVERITY_DIRECTIONS: dict[Pathology, Direction] = {
    Pathology.DCM: "increasing",
    Pathology.HCM: "increasing",
    Pathology.MINF: "decreasing",
    Pathology.ARV: "increasing",
}


@dataclass(frozen=True)
class SeverityScore:
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0,1], got {self.gamma}")


def f_dcm(subject: Subject) -> float:
    """LV sphericity index at end-diastole: short over long pool axis."""
    mask = subject.ed[1]
    if int(np.count_nonzero(mask.labels == POOL)) < 2:
        raise DegenerateMaskError(f"subject {subject.id}: LV pool too small at ED")
    long, short = principal_axis_lengths(mask, POOL)
    if long <= 0:
        raise DegenerateMaskError(f"subject {subject.id}: zero-length LV pool axis")
    return short / long


def f_hcm(subject: Subject) -> float:
    """Myocardial volume (mm^3) at end-diastole."""
    return volume_of(subject.ed[1], MYO)


def f_minf(subject: Subject) -> float:
    """LV ejection fraction from ED/ES cavity volumes."""
    v_ed = volume_of(subject.ed[1], POOL)
    v_es = volume_of(subject.es[1], POOL)
    if v_ed <= 0:
        raise ZeroEDVolumeError(f"subject {subject.id}: empty LV pool at ED")
    return (v_ed - v_es) / v_ed


def f_arv(subject: Subject) -> float:
    """RV cavity volume (mm^3) at end-diastole."""
    return volume_of(subject.ed[1], RV)


SEVERITY_FUNCTIONS: dict[Pathology, Callable[[Subject], float]] = {
    Pathology.DCM: f_dcm,
    Pathology.HCM: f_hcm,
    Pathology.MINF: f_minf,
    Pathology.ARV: f_arv,
}


@dataclass(frozen=True)
class NormalizationStats:
    """Percentile table mapping a biomarker onto its severity scale."""

    pathology: Pathology
    percentile_table: tuple[tuple[float, float], ...]
    direction: Direction

    def __post_init__(self) -> None:
        ranks = [k for k, _ in self.percentile_table]
        values = [v for _, v in self.percentile_table]
        if sorted(set(ranks)) != list(ranks):
            raise ValueError("percentile ranks must be strictly increasing")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("percentile values must be nondecreasing")
        missing = set(PERCENTILE_RANKS) - set(ranks)
        if missing:
            raise ValueError(f"percentile table must cover ranks {sorted(missing)}")
        if self.direction not in ("increasing", "decreasing"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def ranks(self) -> np.ndarray:
        return np.array([k for k, _ in self.percentile_table])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.percentile_table])

    def value_at_rank(self, rank: float) -> float:
        """Biomarker value at a percentile rank, interpolated within the table."""
        return float(np.interp(rank, self.ranks, self.values))

    def to_json_dict(self) -> dict:
        return {
            "pathology": self.pathology.value,
            "direction": self.direction,
            "percentiles": [[k, v] for k, v in self.percentile_table],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NormalizationStats":
        return cls(
            pathology=Pathology(data["pathology"]),
            percentile_table=tuple((float(k), float(v)) for k, v in data["percentiles"]),
            direction=data["direction"],
        )


def fit_normalization(
    biomarkers: Sequence[float],
    pathology: Pathology,
    direction: Union[Direction, None] = None,
) -> NormalizationStats:
    """Fit the percentile table by linear interpolation between order statistics."""
    values = np.asarray(list(biomarkers), dtype=np.float64)
    if values.size < 2:
        raise EmptyInputError(f"need at least 2 biomarker values, got {values.size}")
    table = tuple((k, float(np.percentile(values, k, method="linear"))) for k in PERCENTILE_RANKS)
    if direction is None:
        direction = SEVERITY_DIRECTIONS.get(pathology, "increasing")
    return NormalizationStats(pathology=pathology, percentile_table=table, direction=direction)


def normalize_to_gamma(
    biomarker: float,
    stats: NormalizationStats,
    direction: Union[Direction, None] = None,
) -> SeverityScore:
    """Map a biomarker to gamma via the percentile table.

    In-table values interpolate to rank/100; values below the table minimum
    clamp to rank 0 and above the maximum to rank 1. For decreasing
    biomarkers the rank is flipped so severity still grows with gamma.
    """
    if direction is None:
        direction = stats.direction
    values = stats.values
    ranks = stats.ranks
    if biomarker < values[0]:
        quantile = 0.0
    elif biomarker > values[-1]:
        quantile = 1.0
    else:
        quantile = float(np.interp(biomarker, values, ranks)) / 100.0
    gamma = quantile if direction == "increasing" else 1.0 - quantile
    return SeverityScore(gamma=min(1.0, max(0.0, gamma)))


def gamma_for(subject: Subject, pathology: Pathology, stats: NormalizationStats) -> SeverityScore:
    """Severity of one subject under a pathology's biomarker and table."""
    biomarker = SEVERITY_FUNCTIONS[pathology](subject)
    return normalize_to_gamma(biomarker, stats)
