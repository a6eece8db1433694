"""Test-time dynamic activation: proxy scoring, per-class selection, fusion.

For every lattice cell the proxy score of a class is the mean predicted
probability of that class over the cell's own predicted (argmax) region:
confident, internally consistent experts score high without any labels.
Each foreground class activates its best-scoring expert; the fused mask
takes each class's probability from its own activated expert, scores
background as the mean background probability of the activated experts
(selections counted with repetition), and assigns the per-voxel argmax
with ties to the lowest class index.

Activation never updates expert state: the lattice is bit-identical
before and after any number of inferences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import EmptyTableError
from .lattice import ExpertSpec, Lattice, SampleStore, predict
from .volume import (
    FOREGROUND_CLASSES,
    CLASS_NAMES,
    LabelMask,
    ProbabilityMap,
    VoxelGrid,
    argmax_labels,
    require_same_geometry,
)


def proxy_score(pm: ProbabilityMap, label: int) -> float:
    """Mean probability of a class over its own predicted region; 0 if empty."""
    if label not in FOREGROUND_CLASSES:
        raise ValueError(f"proxy score is defined for foreground classes, got {label}")
    predicted = np.argmax(pm.probs, axis=0) == label
    if not predicted.any():
        return 0.0
    return float(pm.probs[label][predicted].mean())


def score_table(
    predictions: Mapping[ExpertSpec, ProbabilityMap]
) -> dict[ExpertSpec, dict[int, float]]:
    """Proxy scores for every (expert, foreground class) pair."""
    return {
        spec: {c: proxy_score(pm, c) for c in FOREGROUND_CLASSES}
        for spec, pm in predictions.items()
    }


def select_experts(
    scores: Mapping[ExpertSpec, Mapping[int, float]]
) -> dict[int, ExpertSpec]:
    """Per-class argmax over experts; ties go to the earlier lattice cell."""
    if not scores:
        raise EmptyTableError("cannot select experts from an empty score table")
    ordered = sorted(scores)
    selected: dict[int, ExpertSpec] = {}
    for c in FOREGROUND_CLASSES:
        best_spec, best_score = None, -np.inf
        for spec in ordered:
            value = scores[spec][c]
            if value > best_score:
                best_spec, best_score = spec, value
        selected[c] = best_spec  # type: ignore[assignment]
    return selected


def fuse(selected: Mapping[int, tuple[ExpertSpec, ProbabilityMap]]) -> LabelMask:
    """Fuse the per-class activated experts into the final mask.

    Candidate score for class c is c's probability from its own activated
    expert; the background candidate is the mean background probability of
    the activated experts. Per-voxel argmax, ties to the lowest class index.
    """
    missing = [c for c in FOREGROUND_CLASSES if c not in selected]
    if missing:
        raise EmptyTableError(f"fusion needs a selected expert for classes {missing}")
    maps = [selected[c][1] for c in FOREGROUND_CLASSES]
    for pm in maps[1:]:
        require_same_geometry(maps[0], pm)
    background = np.mean([pm.probs[0].astype(np.float64) for pm in maps], axis=0)
    candidates = np.stack(
        [background] + [selected[c][1].probs[c].astype(np.float64) for c in FOREGROUND_CLASSES]
    )
    labels = np.argmax(candidates, axis=0).astype(np.uint8)
    return LabelMask(labels, maps[0].spacing)


@dataclass(frozen=True, eq=False)
class ActivationResult:
    """Outcome of dynamic activation for one test image."""

    scores: Mapping[ExpertSpec, Mapping[int, float]]
    selected: Mapping[int, ExpertSpec]
    selected_scores: Mapping[int, float]
    fused: LabelMask

    def to_json_dict(self, output_mask_path: Optional[str] = None) -> dict:
        rows = []
        for spec in sorted(self.scores):
            row = {
                "delta_gamma": spec.delta_gamma,
                "alpha": spec.alpha,
                "phase": spec.phase,
            }
            for c in FOREGROUND_CLASSES:
                row[f"psi_{CLASS_NAMES[c]}"] = self.scores[spec][c]
            rows.append(row)
        selected = {
            CLASS_NAMES[c]: {
                "delta_gamma": self.selected[c].delta_gamma,
                "alpha": self.selected[c].alpha,
                "phase": self.selected[c].phase,
                "psi": self.selected_scores[c],
            }
            for c in FOREGROUND_CLASSES
        }
        out = {"scores": rows, "selected": selected}
        if output_mask_path is not None:
            out["output_mask"] = output_mask_path
        return out


def run_activation(
    lattice: Lattice,
    image: VoxelGrid,
    store: Optional[SampleStore] = None,
    test_id: Optional[str] = None,
) -> ActivationResult:
    """Score every cell, activate per-class experts, and fuse the mask.

    Streams over cells in lattice order so only the currently selected
    experts' maps stay in memory; the result is identical to scoring a full
    fan-out and selecting afterwards.
    """
    from .lattice import fan_out, normalize_for_ncc

    sims_by_key = None
    if store is not None and len(store) > 0 and store.geometry()[0] == image.dims:
        normalized_image = normalize_for_ncc(image.values.ravel())
        keys = sorted({key for expert in lattice.cells.values() for key in expert.sample_ids})
        if keys:
            sims = store.normalized_matrix(keys) @ normalized_image
            sims_by_key = dict(zip(keys, (float(s) for s in sims)))

    scores: dict[ExpertSpec, dict[int, float]] = {}
    best_maps: dict[int, tuple[ExpertSpec, ProbabilityMap]] = {}
    best_scores: dict[int, float] = {c: -np.inf for c in FOREGROUND_CLASSES}
    for spec in lattice.specs:
        pm = predict(lattice.expert(spec), image, store, test_id=test_id, _sims_by_key=sims_by_key)
        cell_scores = {c: proxy_score(pm, c) for c in FOREGROUND_CLASSES}
        scores[spec] = cell_scores
        for c in FOREGROUND_CLASSES:
            if cell_scores[c] > best_scores[c]:
                best_scores[c] = cell_scores[c]
                best_maps[c] = (spec, pm)

    selected = select_experts(scores)
    for c in FOREGROUND_CLASSES:
        assert selected[c] == best_maps[c][0]
    fused = fuse(best_maps)
    return ActivationResult(
        scores=scores,
        selected=selected,
        selected_scores={c: best_scores[c] for c in FOREGROUND_CLASSES},
        fused=fused,
    )
