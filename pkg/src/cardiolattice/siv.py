"""Leakage-free interleaved train/validation plans over severity-ordered cohorts.

An expert cell is parameterized by a severity granularity ``delta_gamma``
and an interleaving factor ``alpha``. The cohort (one severity-ordered
trajectory) is subsampled at the stride closest to the requested
granularity; within the subsampled sequence, every index k with
``k mod (alpha + 1) == 0`` validates and every other index trains,
together with all real anchors. Validation samples are therefore never
anchors, never trained on, and each one is more severe than the training
samples of the block before it.

The stride is capped at endpoint sampling: a granularity wider than the
trajectory span degrades gracefully to its two extreme samples instead of
failing, which keeps every lattice cell constructible on desk-scale
cohorts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .anchors import AnchorSet
from .errors import EmptyCohortError, StepTooCoarseError
from .trajectory import VirtualCohort


@dataclass(frozen=True)
class PlanEntry:
    """One subsampled cohort element with its role in the schedule."""

    k: int
    patient_id: str
    gamma: float
    role: str  # "train" | "val"


@dataclass(frozen=True)
class SIVPlan:
    """Deterministic train/validation partition for one (delta_gamma, alpha) cell."""

    delta_gamma: float
    alpha: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    a_max: int
    sequences: tuple[tuple[PlanEntry, ...], ...]
    anchor_ids: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "delta_gamma": self.delta_gamma,
            "alpha": self.alpha,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "a_max": self.a_max,
            "anchor_ids": list(self.anchor_ids),
            "sequences": [
                [
                    {"k": e.k, "patient_id": e.patient_id, "gamma": e.gamma, "role": e.role}
                    for e in seq
                ]
                for seq in self.sequences
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SIVPlan":
        return cls(
            delta_gamma=float(data["delta_gamma"]),
            alpha=int(data["alpha"]),
            train_ids=tuple(data["train_ids"]),
            val_ids=tuple(data["val_ids"]),
            a_max=int(data["a_max"]),
            anchor_ids=tuple(data["anchor_ids"]),
            sequences=tuple(
                tuple(
                    PlanEntry(
                        k=int(e["k"]),
                        patient_id=e["patient_id"],
                        gamma=float(e["gamma"]),
                        role=e["role"],
                    )
                    for e in seq
                )
                for seq in data["sequences"]
            ),
        )


def _anchor_id_tuple(anchors: Union[AnchorSet, Iterable[str]]) -> tuple[str, ...]:
    if isinstance(anchors, AnchorSet):
        return tuple(sorted(anchors.subject_ids))
    return tuple(sorted(set(anchors)))


def partition(
    cohort: VirtualCohort,
    anchors: Union[AnchorSet, Iterable[str]],
    delta_gamma: float,
    alpha: int,
) -> SIVPlan:
    """Build the interleaved plan for one cohort trajectory.

    The subsampling stride is ``round(delta_gamma / base_step)`` over the
    cohort's severity grid, clamped to [1, len - 1] so the coarsest
    granularity still samples both trajectory extremes.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be a positive integer, got {alpha}")
    if delta_gamma <= 0:
        raise ValueError(f"delta_gamma must be positive, got {delta_gamma}")
    n = len(cohort.patients)
    if n == 0:
        raise EmptyCohortError("cannot partition an empty cohort")
    if n < 2:
        raise StepTooCoarseError("cohort needs at least 2 virtual patients to split")

    gammas = cohort.gammas
    if np.any(np.diff(gammas) <= 0):
        raise ValueError("cohort must be strictly ordered by gamma")

    base_step = cohort.base_step
    stride = int(round(delta_gamma / base_step)) if base_step > 0 else n - 1
    stride = max(1, min(stride, n - 1))

    entries = []
    for k, idx in enumerate(range(0, n, stride)):
        patient = cohort.patients[idx]
        role = "val" if k % (alpha + 1) == 0 else "train"
        entries.append(PlanEntry(k=k, patient_id=patient.id, gamma=patient.gamma, role=role))

    anchor_ids = _anchor_id_tuple(anchors)
    train_ids = tuple(e.patient_id for e in entries if e.role == "train") + anchor_ids
    val_ids = tuple(e.patient_id for e in entries if e.role == "val")
    return SIVPlan(
        delta_gamma=float(delta_gamma),
        alpha=int(alpha),
        train_ids=train_ids,
        val_ids=val_ids,
        a_max=entries[-1].k,
        sequences=(tuple(entries),),
        anchor_ids=anchor_ids,
    )


def merge_plans(plans: Sequence[SIVPlan]) -> SIVPlan:
    """Union the per-trajectory plans of one lattice cell."""
    if not plans:
        raise EmptyCohortError("no plans to merge")
    head = plans[0]
    if any((p.delta_gamma, p.alpha) != (head.delta_gamma, head.alpha) for p in plans):
        raise ValueError("cannot merge plans with different (delta_gamma, alpha)")
    anchor_ids = tuple(sorted(set().union(*(p.anchor_ids for p in plans))))
    virtual_train: list[str] = []
    val_ids: list[str] = []
    sequences: list[tuple[PlanEntry, ...]] = []
    for plan in plans:
        sequences.extend(plan.sequences)
        val_ids.extend(plan.val_ids)
        virtual_train.extend(i for i in plan.train_ids if i not in set(plan.anchor_ids))
    return SIVPlan(
        delta_gamma=head.delta_gamma,
        alpha=head.alpha,
        train_ids=tuple(virtual_train) + anchor_ids,
        val_ids=tuple(val_ids),
        a_max=max(p.a_max for p in plans),
        sequences=tuple(sequences),
        anchor_ids=anchor_ids,
    )


def verify_plan(plan: SIVPlan, anchors: Union[AnchorSet, Iterable[str]]) -> list[str]:
    """Check the schedule's three guarantees; returns violations (empty = valid).

    (1) no anchor validates, (2) train and validation are disjoint, and
    (3) within each sequence every validation sample is at least as severe
    as the alpha training samples of the preceding block.
    """
    violations: list[str] = []
    anchor_ids = set(_anchor_id_tuple(anchors))

    leaked = anchor_ids.intersection(plan.val_ids)
    for sid in sorted(leaked):
        violations.append(f"anchor {sid} appears in validation")

    shared = set(plan.train_ids).intersection(plan.val_ids)
    for sid in sorted(shared):
        violations.append(f"id {sid} appears in both train and validation")

    window = plan.alpha + 1
    for seq_index, seq in enumerate(plan.sequences):
        gamma_by_k = {e.k: e.gamma for e in seq if e.role == "train"}
        for entry in seq:
            if entry.role != "val" or entry.k == 0:
                continue
            for j in range(max(0, entry.k - window + 1), entry.k):
                other = gamma_by_k.get(j)
                if other is not None and entry.gamma < other:
                    violations.append(
                        f"sequence {seq_index}: validation k={entry.k} "
                        f"(gamma={entry.gamma:.4f}) is less severe than "
                        f"training k={j} (gamma={other:.4f})"
                    )
    return violations


def save_plan(plan: SIVPlan, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_plan(path) -> SIVPlan:
    from pathlib import Path

    return SIVPlan.from_json_dict(json.loads(Path(path).read_text()))
