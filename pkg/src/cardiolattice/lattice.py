"""Lattice of segmentation experts over (delta_gamma, alpha, phase) cells.

Each cell trains an expert on its own interleaved train/validation plan,
restricted to one cardiac phase; the canonical ten granularities by five
interleavings therefore yield one hundred experts across the two phases.
The built-in expert is a deterministic exemplar voter: it retains its
training (image, mask) pairs by reference, scores a test image against
them with normalized cross-correlation, and softmax-weights the top-k
exemplar masks into a per-voxel class distribution. Hyperparameters
(k, tau) are picked per cell by mean foreground Dice on the cell's
validation samples over a small fixed grid, ties to the earlier grid
point. Externally computed probability maps can stand in for any cell
through the ``external`` expert kind, which reads one PLV1 map per test
case from disk.

Training and inference are pure with respect to expert state; fan-out over
cells is order-independent and caches per-sample similarities so a test
image is correlated against each unique retained sample once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .anchors import AnchorSet
from .errors import (
    EmptySetError,
    EmptyTrainSetError,
    GeometryMismatchError,
    InvariantViolationError,
    MissingExternalMapError,
)
from .siv import SIVPlan
from .trajectory import VirtualCohort
from .volume import (
    FOREGROUND_CLASSES,
    NUM_CLASSES,
    PHASES,
    LabelMask,
    ProbabilityMap,
    Subject,
    VoxelGrid,
    load_volume,
)

# Grid order resolves validation ties toward the softer parameterization
# (more neighbors, flatter weights): a one-hot k=1 expert saturates every
# downstream confidence score, so it must strictly win validation to be kept.
HYPERPARAM_GRID: tuple[tuple[int, float], ...] = tuple(
    (k, tau) for k in (5, 3, 1) for tau in (0.2, 0.1, 0.05)
)


@dataclass(frozen=True, order=True)
class ExpertSpec:
    """One lattice cell: severity granularity, interleaving factor, cardiac phase."""

    delta_gamma: float
    alpha: int
    phase: str = "ed"

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def cell_name(self) -> str:
        return f"dg{self.delta_gamma:g}_a{self.alpha}_{self.phase}"


def build_lattice_specs(
    granularities: Iterable[float],
    interleavings: Iterable[int],
    phases: Sequence[str] = PHASES,
) -> list[ExpertSpec]:
    """Cartesian product of the axes, deduplicated; granularity-major, then
    interleaving, then phase."""
    d_values = sorted(set(float(d) for d in granularities))
    q_values = sorted(set(int(a) for a in interleavings))
    phase_values = sorted(set(phases))
    if not d_values or not q_values or not phase_values:
        raise EmptySetError("lattice axes must be nonempty")
    return [ExpertSpec(d, a, p) for d in d_values for a in q_values for p in phase_values]


# ---------------------------------------------------------------------------
# sample store
# ---------------------------------------------------------------------------


def phase_key(sample_id: str, phase: str) -> str:
    return f"{sample_id}#{phase}"


class SampleStore:
    """Shared pool of (image, mask) samples, one entry per subject phase.

    Keeps a lazily built cache of zero-mean unit-norm flattened images so
    cross-correlations reduce to dot products; a constant image normalizes
    to the zero vector and correlates to 0 with everything.
    """

    def __init__(self) -> None:
        self._samples: dict[str, tuple[VoxelGrid, LabelMask]] = {}
        self._normalized: dict[str, np.ndarray] = {}
        self._flat_labels: dict[str, np.ndarray] = {}

    def add(self, key: str, image: VoxelGrid, mask: LabelMask) -> None:
        if key in self._samples:
            raise InvariantViolationError(f"duplicate sample key {key!r}")
        self._samples[key] = (image, mask)

    def add_subject(self, subject: Subject) -> None:
        for phase in PHASES:
            image, mask = subject.phase(phase)
            self.add(phase_key(subject.id, phase), image, mask)

    def __contains__(self, key: str) -> bool:
        return key in self._samples

    def __len__(self) -> int:
        return len(self._samples)

    def keys(self) -> list[str]:
        return sorted(self._samples)

    def image(self, key: str) -> VoxelGrid:
        return self._samples[key][0]

    def mask(self, key: str) -> LabelMask:
        return self._samples[key][1]

    def geometry(self) -> tuple[tuple[int, int, int], tuple[float, float, float]]:
        key = next(iter(self._samples))
        image = self._samples[key][0]
        return image.dims, image.spacing

    def flat_labels(self, key: str) -> np.ndarray:
        if key not in self._flat_labels:
            self._flat_labels[key] = self._samples[key][1].labels.ravel()
        return self._flat_labels[key]

    def normalized(self, key: str) -> np.ndarray:
        if key not in self._normalized:
            values = self._samples[key][0].values.ravel().astype(np.float32)
            self._normalized[key] = normalize_for_ncc(values)
        return self._normalized[key]

    def normalized_matrix(self, keys: Sequence[str]) -> np.ndarray:
        return np.stack([self.normalized(k) for k in keys])


def normalize_for_ncc(flat: np.ndarray) -> np.ndarray:
    centered = flat.astype(np.float32) - np.float32(flat.mean())
    norm = float(np.linalg.norm(centered))
    if norm == 0.0:
        return np.zeros_like(centered)
    return centered / np.float32(norm)


def build_sample_store(
    cohorts: Sequence[VirtualCohort], subjects: Mapping[str, Subject]
) -> SampleStore:
    """Pool the virtual patients and the anchor subjects, both phases each."""
    store = SampleStore()
    for cohort in cohorts:
        for patient in cohort.patients:
            store.add_subject(patient.as_subject())
    for subject_id in sorted(subjects):
        store.add_subject(subjects[subject_id])
    return store


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Expert:
    """Trained predictor for one lattice cell."""

    spec: ExpertSpec
    kind: str  # "exemplar" | "external"
    sample_ids: tuple[str, ...] = ()
    k: int = 1
    tau: float = 0.1
    val_dice: float = float("nan")
    external_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ("exemplar", "external"):
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.kind == "exemplar" and (self.k < 1 or self.tau <= 0):
            raise ValueError("exemplar expert needs k >= 1 and tau > 0")
        if self.kind == "external" and not self.external_dir:
            raise ValueError("external expert needs a map directory")


def _split_phase_keys(
    ids: Sequence[str], store: SampleStore, phases: Sequence[str] = PHASES
) -> list[str]:
    keys = []
    for sample_id in ids:
        for phase in phases:
            key = phase_key(sample_id, phase)
            if key in store:
                keys.append(key)
    return keys


def _rank_by_similarity(sims: np.ndarray) -> np.ndarray:
    # descending similarity, ties to the earlier retained sample
    return np.lexsort((np.arange(sims.size), -sims))


def _softmax_weights(scores: np.ndarray, tau: float) -> np.ndarray:
    scaled = scores.astype(np.float64) / tau
    scaled -= scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def _vote_scores(weights: np.ndarray, label_stack: np.ndarray) -> np.ndarray:
    """Class scores (classes, voxels) from weighted one-hot exemplar masks."""
    scores = np.zeros((NUM_CLASSES, label_stack.shape[1]), dtype=np.float64)
    for c in range(NUM_CLASSES):
        scores[c] = weights @ (label_stack == c)
    return scores


def _mean_foreground_dice(pred_flat: np.ndarray, target_flat: np.ndarray) -> float:
    total = 0.0
    for c in FOREGROUND_CLASSES:
        in_p = pred_flat == c
        in_t = target_flat == c
        denom = int(in_p.sum()) + int(in_t.sum())
        total += 1.0 if denom == 0 else 2.0 * int(np.count_nonzero(in_p & in_t)) / denom
    return total / len(FOREGROUND_CLASSES)


def train_expert(spec: ExpertSpec, plan: SIVPlan, store: SampleStore) -> Expert:
    """Fit one exemplar expert on its plan's training split.

    Retains both cardiac phases of the training ids (the correlation
    ranking routes a test image to phase-matched exemplars on its own) and
    grid-searches (k, tau) for the best mean foreground Dice on the plan's
    validation samples of the cell's phase, which is what the cell
    specializes in.
    """
    train_keys = _split_phase_keys(plan.train_ids, store)
    if not train_keys:
        raise EmptyTrainSetError(f"plan {spec.cell_name} has no training samples in the store")
    val_keys = _split_phase_keys(plan.val_ids, store, (spec.phase,))

    if not val_keys:
        k, tau = HYPERPARAM_GRID[0]
        return Expert(spec=spec, kind="exemplar", sample_ids=tuple(train_keys), k=k, tau=tau)

    train_matrix = store.normalized_matrix(train_keys)
    val_matrix = store.normalized_matrix(val_keys)
    sims = val_matrix @ train_matrix.T  # (n_val, n_train)

    k_max = min(max(k for k, _ in HYPERPARAM_GRID), len(train_keys))
    combo_scores = np.zeros(len(HYPERPARAM_GRID))
    for v, val_key in enumerate(val_keys):
        ranked = _rank_by_similarity(sims[v])
        top = ranked[:k_max]
        label_stack = np.stack([store.flat_labels(train_keys[i]) for i in top])
        target = store.flat_labels(val_key)
        seen: dict[tuple[int, bytes], float] = {}
        for ci, (k, tau) in enumerate(HYPERPARAM_GRID):
            k_eff = min(k, len(train_keys))
            weights = _softmax_weights(sims[v, top[:k_eff]], tau)
            cache_key = (k_eff, weights.tobytes())
            if cache_key not in seen:
                pred = np.argmax(_vote_scores(weights, label_stack[:k_eff]), axis=0)
                seen[cache_key] = _mean_foreground_dice(pred, target)
            combo_scores[ci] += seen[cache_key]

    best = int(np.argmax(combo_scores))  # first best wins on ties
    k, tau = HYPERPARAM_GRID[best]
    return Expert(
        spec=spec,
        kind="exemplar",
        sample_ids=tuple(train_keys),
        k=min(k, len(train_keys)),
        tau=tau,
        val_dice=float(combo_scores[best] / len(val_keys)),
    )


def _check_geometry(expert_geometry, image: VoxelGrid, spec: ExpertSpec) -> None:
    dims, spacing = expert_geometry
    if image.dims != dims or not np.allclose(image.spacing, spacing, atol=1e-9):
        raise GeometryMismatchError(
            f"cell {spec.cell_name}: image {image.dims}@{image.spacing} does not match "
            f"expert geometry {dims}@{spacing}"
        )


def predict(
    expert: Expert,
    image: VoxelGrid,
    store: Optional[SampleStore] = None,
    test_id: Optional[str] = None,
    _sims_by_key: Optional[Mapping[str, float]] = None,
) -> ProbabilityMap:
    """Multiclass probability map for one test image from one expert."""
    if expert.kind == "external":
        return _predict_external(expert, image, test_id)
    if store is None:
        raise ValueError("exemplar prediction needs the sample store")
    _check_geometry(store.geometry(), image, expert.spec)

    if _sims_by_key is None:
        matrix = store.normalized_matrix(expert.sample_ids)
        sims = matrix @ normalize_for_ncc(image.values.ravel())
    else:
        sims = np.array([_sims_by_key[key] for key in expert.sample_ids], dtype=np.float32)

    ranked = _rank_by_similarity(sims)
    k_eff = min(expert.k, len(expert.sample_ids))
    top = ranked[:k_eff]
    weights = _softmax_weights(sims[top], expert.tau)
    label_stack = np.stack([store.flat_labels(expert.sample_ids[i]) for i in top])
    scores = _vote_scores(weights, label_stack)
    probs = scores.reshape((NUM_CLASSES,) + image.dims).astype(np.float32)
    return ProbabilityMap(probs, image.spacing)


def _predict_external(expert: Expert, image: VoxelGrid, test_id: Optional[str]) -> ProbabilityMap:
    if not test_id:
        raise MissingExternalMapError(
            f"cell {expert.spec.cell_name}: external prediction needs a test id"
        )
    spec = expert.spec
    case_dir = Path(expert.external_dir) / test_id
    # phase-specific map preferred; a phase-agnostic <dg>_<alpha>.plv serves both
    candidates = [
        case_dir / f"{spec.delta_gamma:g}_{spec.alpha}_{spec.phase}.plv",
        case_dir / f"{spec.delta_gamma:g}_{spec.alpha}.plv",
    ]
    path = next((p for p in candidates if p.exists()), None)
    if path is None:
        raise MissingExternalMapError(
            f"cell {spec.cell_name}: no stored map at {candidates[0]} or {candidates[1]}"
        )
    pm = load_volume(path)
    if not isinstance(pm, ProbabilityMap):
        raise MissingExternalMapError(f"{path} does not hold a probability map")
    if pm.dims != image.dims:
        raise GeometryMismatchError(
            f"cell {expert.spec.cell_name}: stored map dims {pm.dims} != image dims {image.dims}"
        )
    return pm


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lattice:
    """All trained expert cells plus the axis definitions."""

    granularities: tuple[float, ...]
    interleavings: tuple[int, ...]
    phases: tuple[str, ...]
    cells: Mapping[ExpertSpec, Expert]

    def __post_init__(self) -> None:
        expected = len(self.granularities) * len(self.interleavings) * len(self.phases)
        if len(self.cells) != expected:
            raise InvariantViolationError(
                f"lattice must hold {expected} cells, got {len(self.cells)}"
            )

    @property
    def specs(self) -> list[ExpertSpec]:
        return [
            ExpertSpec(d, a, p)
            for d in self.granularities
            for a in self.interleavings
            for p in self.phases
        ]

    def expert(self, spec: ExpertSpec) -> Expert:
        return self.cells[spec]


class CellErrors(Exception):
    """Aggregated per-cell failures with cell attribution."""

    def __init__(self, failures: Sequence[tuple[ExpertSpec, Exception]]):
        self.failures = list(failures)
        details = "; ".join(
            f"(delta_gamma={spec.delta_gamma:g}, alpha={spec.alpha}): {err}"
            for spec, err in self.failures
        )
        super().__init__(f"{len(self.failures)} lattice cell(s) failed: {details}")


def train_lattice(
    specs: Sequence[ExpertSpec],
    plans: Mapping[ExpertSpec, SIVPlan],
    store: SampleStore,
    jobs: int = 1,
) -> Lattice:
    """Train every cell independently; output is identical for any job count."""
    def _train(spec: ExpertSpec) -> tuple[ExpertSpec, Expert]:
        return spec, train_expert(spec, plans[spec], store)

    results: dict[ExpertSpec, Expert] = {}
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for spec, expert in pool.map(_train, specs):
                results[spec] = expert
    else:
        for spec in specs:
            results[spec] = _train(spec)[1]
    return Lattice(
        granularities=tuple(sorted(set(s.delta_gamma for s in specs))),
        interleavings=tuple(sorted(set(s.alpha for s in specs))),
        phases=tuple(sorted(set(s.phase for s in specs))),
        cells=results,
    )


def fan_out(
    lattice: Lattice,
    image: VoxelGrid,
    store: Optional[SampleStore] = None,
    test_id: Optional[str] = None,
) -> dict[ExpertSpec, ProbabilityMap]:
    """Predict with every cell; deterministic and evaluation-order independent."""
    sims_by_key: Optional[dict[str, float]] = None
    if store is not None and len(store) > 0 and store.geometry()[0] == image.dims:
        normalized_image = normalize_for_ncc(image.values.ravel())
        keys = sorted(
            {key for expert in lattice.cells.values() for key in expert.sample_ids}
        )
        if keys:
            sims = store.normalized_matrix(keys) @ normalized_image
            sims_by_key = dict(zip(keys, (float(s) for s in sims)))

    results: dict[ExpertSpec, ProbabilityMap] = {}
    failures: list[tuple[ExpertSpec, Exception]] = []
    for spec in lattice.specs:
        try:
            results[spec] = predict(
                lattice.expert(spec), image, store, test_id=test_id, _sims_by_key=sims_by_key
            )
        except Exception as exc:  # aggregated below with attribution
            failures.append((spec, exc))
    if failures:
        raise CellErrors(failures)
    return results


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_lattice(lattice: Lattice, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "granularities": list(lattice.granularities),
        "interleavings": list(lattice.interleavings),
        "phases": list(lattice.phases),
        "cells": [
            {
                "delta_gamma": spec.delta_gamma,
                "alpha": spec.alpha,
                "phase": spec.phase,
                "kind": expert.kind,
                "params": {"k": expert.k, "tau": expert.tau, "val_dice": expert.val_dice},
                "sample_ids": list(expert.sample_ids),
                "external_dir": expert.external_dir,
            }
            for spec, expert in sorted(lattice.cells.items())
        ],
    }
    (directory / "lattice.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return directory


def load_lattice(directory: Union[str, Path]) -> Lattice:
    data = json.loads((Path(directory) / "lattice.json").read_text())
    cells = {}
    for cell in data["cells"]:
        spec = ExpertSpec(float(cell["delta_gamma"]), int(cell["alpha"]), cell["phase"])
        cells[spec] = Expert(
            spec=spec,
            kind=cell["kind"],
            sample_ids=tuple(cell["sample_ids"]),
            k=int(cell["params"]["k"]),
            tau=float(cell["params"]["tau"]),
            val_dice=float(cell["params"]["val_dice"]),
            external_dir=cell["external_dir"],
        )
    return Lattice(
        granularities=tuple(float(d) for d in data["granularities"]),
        interleavings=tuple(int(a) for a in data["interleavings"]),
        phases=tuple(data["phases"]),
        cells=cells,
    )
