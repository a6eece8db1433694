"""Continuous severity trajectories between anchors and virtual cohort synthesis.

A trajectory segment connects two adjacent anchors of one pathology. Both
cardiac phases are encoded into latent phantom parameters and interpolated
spherically along a shared path weight omega; pairing the phases at equal
omega keeps phase-coupled biomarkers (ejection fraction) evaluable for
every interpolated sample.

Because severity is generally nonlinear along the path, equal omega steps
give unevenly spaced severities. The mapping omega -> gamma is therefore
probed at J+1 points, repaired to be monotone (adjacent-violator pooling
absorbs small sampling inversions), interpolated with a shape-preserving
monotone cubic, and inverted at uniformly spaced severity targets. Decoding
the inverted weights yields virtual patients with near-uniform severity
spacing; the segment endpoints are the real anchors and are excluded from
the cohort.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .anchors import Anchor, AnchorSet
from .errors import (
    MissingPathologyError,
    NonMonotoneMappingError,
    NTooSmallError,
    ZeroVectorError,
)
from .phantom import GridSpec, LatentVector, decode, encode, rasterize_labels, quantize_params
from .severity import NormalizationStats, SEVERITY_FUNCTIONS, normalize_to_gamma
from .volume import LabelMask, PHASES, Pathology, Subject, VoxelGrid, load_volume, store_volume

SeverityFn = Callable[[Subject], float]


# ---------------------------------------------------------------------------
# spherical interpolation
# ---------------------------------------------------------------------------

_COLLINEAR_ANGLE_RAD = 1e-6


def slerp_array(v0: np.ndarray, v1: np.ndarray, omega: float) -> np.ndarray:
    """Spherical linear interpolation with a linear fallback for collinear inputs."""
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    n0 = float(np.linalg.norm(v0))
    n1 = float(np.linalg.norm(v1))
    if n0 == 0.0 or n1 == 0.0:
        raise ZeroVectorError("spherical interpolation endpoints must be nonzero")
    cos_theta = float(np.clip(np.dot(v0, v1) / (n0 * n1), -1.0, 1.0))
    theta = float(np.arccos(cos_theta))
    if theta < _COLLINEAR_ANGLE_RAD:
        return (1.0 - omega) * v0 + omega * v1
    sin_theta = np.sin(theta)
    return (np.sin((1.0 - omega) * theta) / sin_theta) * v0 + (
        np.sin(omega * theta) / sin_theta
    ) * v1


def slerp(z0: Union[LatentVector, np.ndarray], z1: Union[LatentVector, np.ndarray], omega: float):
    """Interpolate two latent vectors; returns the same kind as its inputs."""
    if isinstance(z0, LatentVector) or isinstance(z1, LatentVector):
        p0 = z0.params if isinstance(z0, LatentVector) else np.asarray(z0)
        p1 = z1.params if isinstance(z1, LatentVector) else np.asarray(z1)
        return LatentVector(slerp_array(p0, p1, omega))
    return slerp_array(z0, z1, omega)


# ---------------------------------------------------------------------------
# segments and severity mapping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySegment:
    """One anchor-to-anchor piece of a pathology trajectory, both phases."""

    pathology: Pathology
    index: int
    source_id: str
    target_id: str
    gamma_src: float
    gamma_tgt: float
    latents: Mapping[str, tuple[LatentVector, LatentVector]]

    def __post_init__(self) -> None:
        if not self.gamma_src < self.gamma_tgt:
            raise ValueError(
                f"segment endpoints must have increasing gamma, got "
                f"{self.gamma_src} -> {self.gamma_tgt}"
            )
        missing = [p for p in PHASES if p not in self.latents]
        if missing:
            raise ValueError(f"segment lacks latents for phases {missing}")

    def latent_at(self, phase: str, omega: float) -> LatentVector:
        z_src, z_tgt = self.latents[phase]
        return slerp(z_src, z_tgt, omega)


def build_segment(
    source: Subject,
    target: Subject,
    gamma_src: float,
    gamma_tgt: float,
    pathology: Pathology,
    index: int = 0,
) -> TrajectorySegment:
    """Encode both phases of both anchor subjects into a segment."""
    latents = {
        phase: (encode(*source.phase(phase)), encode(*target.phase(phase)))
        for phase in PHASES
    }
    return TrajectorySegment(
        pathology=pathology,
        index=index,
        source_id=source.id,
        target_id=target.id,
        gamma_src=gamma_src,
        gamma_tgt=gamma_tgt,
        latents=latents,
    )


@dataclass(frozen=True)
class SeverityMapping:
    """Sampled path-weight to severity mapping, monotone after repair."""

    omegas: tuple[float, ...]
    gammas: tuple[float, ...]
    gammas_raw: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        omegas = np.asarray(self.omegas)
        if omegas.size < 2 or omegas[0] != 0.0 or omegas[-1] != 1.0:
            raise ValueError("omegas must run from 0.0 to 1.0")
        if np.any(np.diff(omegas) <= 0):
            raise ValueError("omegas must be strictly increasing")
        if len(self.gammas) != omegas.size:
            raise ValueError("gammas and omegas must have equal length")

    @property
    def gamma_min(self) -> float:
        return self.gammas[0]

    @property
    def gamma_max(self) -> float:
        return self.gammas[-1]


def isotonic_repair(values: Sequence[float]) -> np.ndarray:
    """Nondecreasing least-squares projection by adjacent-violator pooling."""
    n = len(values)
    level = np.empty(n)
    weight = np.empty(n)
    count = 0
    for value in values:
        level[count] = value
        weight[count] = 1.0
        count += 1
        while count > 1 and level[count - 2] > level[count - 1]:
            merged = (
                level[count - 2] * weight[count - 2] + level[count - 1] * weight[count - 1]
            ) / (weight[count - 2] + weight[count - 1])
            weight[count - 2] += weight[count - 1]
            level[count - 2] = merged
            count -= 1
    out = np.empty(n)
    idx = 0
    for block in range(count):
        size = int(weight[block])
        out[idx : idx + size] = level[block]
        idx += size
    return out


def _zero_image(grid: GridSpec) -> VoxelGrid:
    return VoxelGrid(np.zeros(grid.dims, dtype=np.float32), grid.spacing)


def _mask_only_subject(
    segment: TrajectorySegment, omega: float, grid: GridSpec, blank: VoxelGrid
) -> Subject:
    # Severity biomarkers are mask functions, so probing the path does not
    # need image synthesis.
    pairs = {}
    for phase in PHASES:
        labels = rasterize_labels(quantize_params(segment.latent_at(phase, omega)), grid)
        pairs[phase] = (blank, LabelMask(labels, grid.spacing))
    return Subject("probe", pairs["ed"], pairs["es"], segment.pathology)


def evaluate_severity_at(
    segment: TrajectorySegment,
    omegas: Sequence[float],
    severity_fn: SeverityFn,
    stats: NormalizationStats,
    grid: GridSpec,
) -> np.ndarray:
    """Severity gamma of decoded samples at the given path weights."""
    blank = _zero_image(grid)
    out = np.empty(len(omegas))
    for i, omega in enumerate(omegas):
        subject = _mask_only_subject(segment, float(omega), grid, blank)
        out[i] = normalize_to_gamma(severity_fn(subject), stats).gamma
    return out


def build_severity_mapping(
    segment: TrajectorySegment,
    j_probes: int,
    severity_fn: SeverityFn,
    stats: NormalizationStats,
    grid: GridSpec,
) -> SeverityMapping:
    """Probe the path at J+1 equal weights and repair severities to monotone."""
    if j_probes < 2:
        raise ValueError(f"need at least 2 probe intervals, got {j_probes}")
    omegas = np.arange(j_probes + 1) / j_probes
    omegas[-1] = 1.0
    raw = evaluate_severity_at(segment, omegas, severity_fn, stats, grid)
    repaired = isotonic_repair(raw)
    return SeverityMapping(
        omegas=tuple(float(w) for w in omegas),
        gammas=tuple(float(g) for g in repaired),
        gammas_raw=tuple(float(g) for g in raw),
    )


def resample_weights(mapping: SeverityMapping, n_samples: int) -> np.ndarray:
    """Invert the omega->gamma spline at uniformly spaced severity targets.

    Returns the path weights whose severities are ``gamma_min + t * step``
    with ``step = (gamma_max - gamma_min) / (n_samples - 1)``; the first and
    last weights are exactly 0 and 1.
    """
    if n_samples < 2:
        raise NTooSmallError(f"need at least 2 resampling targets, got {n_samples}")
    gammas = np.asarray(mapping.gammas)
    if np.any(np.diff(gammas) < 0):
        raise NonMonotoneMappingError("mapping must be monotone; run repair first")
    span = mapping.gamma_max - mapping.gamma_min
    if span <= 1e-9:
        raise NonMonotoneMappingError("mapping is flat; severity does not change along path")

    spline = PchipInterpolator(np.asarray(mapping.omegas), gammas)
    targets = mapping.gamma_min + np.arange(n_samples) * (span / (n_samples - 1))
    out = np.empty(n_samples)
    out[0], out[-1] = 0.0, 1.0
    for t in range(1, n_samples - 1):
        gamma_t = targets[t]
        out[t] = brentq(lambda w: float(spline(w)) - gamma_t, 0.0, 1.0, xtol=1e-12)
    return out


# ---------------------------------------------------------------------------
# virtual patients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VirtualPatient:
    """Fully labeled synthetic sample at one severity state."""

    id: str
    pathology: Pathology
    gamma: float
    omega: float
    segment_index: int
    sample_index: int
    achieved_gamma: float
    ed: tuple[VoxelGrid, LabelMask]
    es: tuple[VoxelGrid, LabelMask]

    def as_subject(self) -> Subject:
        return Subject(self.id, self.ed, self.es, self.pathology)


@dataclass(frozen=True)
class SegmentRecord:
    """Provenance of one synthesized segment, kept for manifests and reports."""

    index: int
    source_id: str
    target_id: str
    gamma_src: float
    gamma_tgt: float
    n_samples: int
    delta_gamma: float
    omega_stars: tuple[float, ...]
    mapping_omegas: tuple[float, ...]
    mapping_gammas: tuple[float, ...]
    mapping_gammas_raw: tuple[float, ...]


@dataclass(frozen=True)
class VirtualCohort:
    """Severity-ordered virtual patients of one pathology trajectory."""

    pathology: Pathology
    regime: str
    grid: GridSpec
    patients: tuple[VirtualPatient, ...]
    segments: tuple[SegmentRecord, ...]
    anchor_ids: tuple[str, ...]
    anchor_gammas: tuple[float, ...]

    @property
    def gammas(self) -> np.ndarray:
        return np.array([p.gamma for p in self.patients])

    @property
    def base_step(self) -> float:
        """Median consecutive severity spacing of the cohort grid."""
        if len(self.patients) < 2:
            return 0.0
        return float(np.median(np.diff(self.gammas)))


def synthesize_cohort(
    anchor_set: AnchorSet,
    pathology: Pathology,
    subjects: Mapping[str, Subject],
    stats: NormalizationStats,
    grid: GridSpec,
    seed: int,
    n_per_segment: int,
    j_probes: int = 50,
    severity_fn: Optional[SeverityFn] = None,
) -> VirtualCohort:
    """Synthesize the virtual cohort along one pathology's anchor chain.

    Every adjacent anchor pair becomes a segment sampled at ``n_per_segment``
    uniformly spaced severities whose interior points (the endpoints are the
    real anchors) are decoded into virtual patients. Deterministic for fixed
    inputs and seed.
    """
    chain = anchor_set.trajectory(pathology)
    if len(chain) < 2:
        raise MissingPathologyError(
            f"pathology {pathology.value} has {len(chain)} anchors; need at least 2"
        )
    if severity_fn is None:
        severity_fn = SEVERITY_FUNCTIONS[pathology]

    patients: list[VirtualPatient] = []
    records: list[SegmentRecord] = []
    for k, (src, tgt) in enumerate(zip(chain, chain[1:])):
        segment = build_segment(
            subjects[src.subject_id],
            subjects[tgt.subject_id],
            src.gamma,
            tgt.gamma,
            pathology,
            index=k,
        )
        mapping = build_severity_mapping(segment, j_probes, severity_fn, stats, grid)
        omega_stars = resample_weights(mapping, n_per_segment)
        delta_gamma = (mapping.gamma_max - mapping.gamma_min) / (n_per_segment - 1)

        for t in range(1, n_per_segment - 1):
            omega = float(omega_stars[t])
            gamma_target = mapping.gamma_min + t * delta_gamma
            pairs = {}
            for pi, phase in enumerate(PHASES):
                z = segment.latent_at(phase, omega)
                pairs[phase] = decode(z, grid, seed=seed + 2 * t + pi)
            patient_id = f"vp-{pathology.value.lower()}-s{k}-t{t:03d}"
            probe = Subject(patient_id, pairs["ed"], pairs["es"], pathology)
            achieved = normalize_to_gamma(severity_fn(probe), stats).gamma
            patients.append(
                VirtualPatient(
                    id=patient_id,
                    pathology=pathology,
                    gamma=float(gamma_target),
                    omega=omega,
                    segment_index=k,
                    sample_index=t,
                    achieved_gamma=float(achieved),
                    ed=pairs["ed"],
                    es=pairs["es"],
                )
            )
        records.append(
            SegmentRecord(
                index=k,
                source_id=src.subject_id,
                target_id=tgt.subject_id,
                gamma_src=src.gamma,
                gamma_tgt=tgt.gamma,
                n_samples=n_per_segment,
                delta_gamma=float(delta_gamma),
                omega_stars=tuple(float(w) for w in omega_stars),
                mapping_omegas=mapping.omegas,
                mapping_gammas=mapping.gammas,
                mapping_gammas_raw=mapping.gammas_raw,
            )
        )

    patients.sort(key=lambda p: p.gamma)
    return VirtualCohort(
        pathology=pathology,
        regime=anchor_set.regime,
        grid=grid,
        patients=tuple(patients),
        segments=tuple(records),
        anchor_ids=tuple(a.subject_id for a in chain),
        anchor_gammas=tuple(a.gamma for a in chain),
    )


# ---------------------------------------------------------------------------
# cohort persistence
# ---------------------------------------------------------------------------


def save_cohort(cohort: VirtualCohort, directory: Union[str, Path]) -> Path:
    """Write the cohort manifest and one PLV1 file set per patient and phase."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patients = []
    for patient in cohort.patients:
        files = {}
        for phase in PHASES:
            image, mask = getattr(patient, phase)
            files[f"{phase}_image"] = f"{patient.id}_{phase}.plv"
            files[f"{phase}_mask"] = f"{patient.id}_{phase}_mask.plv"
            store_volume(image, directory / files[f"{phase}_image"])
            store_volume(mask, directory / files[f"{phase}_mask"])
        patients.append(
            {
                "id": patient.id,
                "gamma": patient.gamma,
                "omega": patient.omega,
                "segment_index": patient.segment_index,
                "sample_index": patient.sample_index,
                "achieved_gamma": patient.achieved_gamma,
                "files": files,
            }
        )
    manifest = {
        "pathology": cohort.pathology.value,
        "regime": cohort.regime,
        "grid": {"dims": list(cohort.grid.dims), "spacing_mm": list(cohort.grid.spacing)},
        "anchors": {
            "ids": list(cohort.anchor_ids),
            "gammas": list(cohort.anchor_gammas),
        },
        "segments": [
            {
                "index": r.index,
                "source_id": r.source_id,
                "target_id": r.target_id,
                "gamma_src": r.gamma_src,
                "gamma_tgt": r.gamma_tgt,
                "n_samples": r.n_samples,
                "delta_gamma": r.delta_gamma,
                "omega_stars": list(r.omega_stars),
                "mapping": {
                    "omegas": list(r.mapping_omegas),
                    "gammas": list(r.mapping_gammas),
                    "gammas_raw": list(r.mapping_gammas_raw),
                },
            }
            for r in cohort.segments
        ],
        "patients": patients,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_cohort(directory: Union[str, Path]) -> VirtualCohort:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    grid = GridSpec(tuple(manifest["grid"]["dims"]), tuple(manifest["grid"]["spacing_mm"]))
    patients = []
    for entry in manifest["patients"]:
        pairs = {}
        for phase in PHASES:
            image = load_volume(directory / entry["files"][f"{phase}_image"])
            mask = load_volume(directory / entry["files"][f"{phase}_mask"])
            pairs[phase] = (image, mask)
        patients.append(
            VirtualPatient(
                id=entry["id"],
                pathology=Pathology(manifest["pathology"]),
                gamma=float(entry["gamma"]),
                omega=float(entry["omega"]),
                segment_index=int(entry["segment_index"]),
                sample_index=int(entry["sample_index"]),
                achieved_gamma=float(entry["achieved_gamma"]),
                ed=pairs["ed"],
                es=pairs["es"],
            )
        )
    segments = tuple(
        SegmentRecord(
            index=int(r["index"]),
            source_id=r["source_id"],
            target_id=r["target_id"],
            gamma_src=float(r["gamma_src"]),
            gamma_tgt=float(r["gamma_tgt"]),
            n_samples=int(r["n_samples"]),
            delta_gamma=float(r["delta_gamma"]),
            omega_stars=tuple(float(w) for w in r["omega_stars"]),
            mapping_omegas=tuple(float(w) for w in r["mapping"]["omegas"]),
            mapping_gammas=tuple(float(g) for g in r["mapping"]["gammas"]),
            mapping_gammas_raw=tuple(float(g) for g in r["mapping"]["gammas_raw"]),
        )
        for r in manifest["segments"]
    )
    return VirtualCohort(
        pathology=Pathology(manifest["pathology"]),
        regime=manifest["regime"],
        grid=grid,
        patients=tuple(patients),
        segments=segments,
        anchor_ids=tuple(manifest["anchors"]["ids"]),
        anchor_gammas=tuple(manifest["anchors"]["gammas"]),
    )
