"""End-to-end orchestration: stages, content-hash caching, and run manifests.

Stage boundaries are directories under the configured output root; each
stage writes a stamp holding the digest of everything it consumed (config
subsection, upstream stamps, input files). Re-running a stage whose digest
is unchanged is a no-op, so full-pipeline retries are cheap and two runs
with identical inputs produce bit-identical artifacts. Nothing written
here embeds timestamps.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .activation import run_activation
from .anchors import AnchorSet, select_anchors
from .config import PipelineConfig
from .errors import DataError
from .lattice import (
    ExpertSpec,
    SampleStore,
    build_lattice_specs,
    build_sample_store,
    fan_out,
    load_lattice,
    save_lattice,
    train_lattice,
)
from .metrics import MetricReport, dice3d, evaluate_masks
from .phantom import GridSpec, make_phantom_subject
from .report import (
    activation_heatmap_figure,
    cell_dice_figure,
    save_figure,
    severity_mapping_figure,
    write_json,
    write_metric_outputs,
)
from .severity import (
    SEVERITY_FUNCTIONS,
    NormalizationStats,
    fit_normalization,
    normalize_to_gamma,
)
from .siv import SIVPlan, load_plan, merge_plans, partition, save_plan, verify_plan
from .trajectory import VirtualCohort, load_cohort, save_cohort, synthesize_cohort
from .volume import (
    FOREGROUND_CLASSES,
    PHASES,
    LabelMask,
    Pathology,
    Subject,
    VoxelGrid,
    argmax_labels,
    load_volume,
    preprocess,
    store_volume,
)

PIPELINE_VERSION = "1"

STAGES = ("severity", "anchors", "synth", "siv", "train", "infer", "eval")


def substream_seed(seed: int, name: str) -> int:
    """Independent deterministic seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# subject directories
# ---------------------------------------------------------------------------


def save_subject(subject: Subject, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json({"id": subject.id, "pathology": subject.pathology.value}, directory / "meta.json")
    for phase in PHASES:
        image, mask = subject.phase(phase)
        store_volume(image, directory / f"{phase}.plv")
        store_volume(mask, directory / f"{phase}_mask.plv")
    return directory


def load_subject(directory: Union[str, Path]) -> Subject:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DataError(f"subject directory {directory} has no meta.json")
    meta = json.loads(meta_path.read_text())
    pairs = {}
    for phase in PHASES:
        image = load_volume(directory / f"{phase}.plv")
        mask = load_volume(directory / f"{phase}_mask.plv")
        if not isinstance(image, VoxelGrid) or not isinstance(mask, LabelMask):
            raise DataError(f"{directory}: {phase} volumes have unexpected kinds")
        pairs[phase] = (image, mask)
    return Subject(meta["id"], pairs["ed"], pairs["es"], Pathology(meta["pathology"]))


def load_subjects_dir(directory: Union[str, Path]) -> dict[str, Subject]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"subject directory {directory} does not exist")
    subjects = {}
    for child in sorted(p for p in directory.iterdir() if p.is_dir()):
        subject = load_subject(child)
        subjects[subject.id] = subject
    if not subjects:
        raise DataError(f"subject directory {directory} holds no subjects")
    return subjects


def make_phantom_subjects_dir(
    directory: Union[str, Path],
    grid: GridSpec,
    seed: int,
    n_healthy: int = 6,
    n_per_pathology: int = 8,
    pathologies: Sequence[Pathology] = (
        Pathology.DCM,
        Pathology.HCM,
        Pathology.MINF,
        Pathology.ARV,
    ),
) -> list[str]:
    """Write a synthetic labeled cohort in the subject-directory layout."""
    from .phantom import make_phantom_cohort

    directory = Path(directory)
    cohort = make_phantom_cohort(
        grid, seed, n_healthy=n_healthy, n_per_pathology=n_per_pathology, pathologies=pathologies
    )
    for subject in cohort:
        save_subject(subject, directory / subject.id)
    return [s.id for s in cohort]


def make_phantom_test_dir(
    directory: Union[str, Path],
    grid: GridSpec,
    seed: int,
    severities: Sequence[float] = (0.3, 0.62),
    pathologies: Sequence[Pathology] = (
        Pathology.DCM,
        Pathology.HCM,
        Pathology.MINF,
        Pathology.ARV,
    ),
) -> list[str]:
    """Held-out phantom subjects at severities between the anchor endpoints.

    Test subjects carry mild anatomical jitter: off the exact trajectory
    manifold, but representative of the between-anchor states the cohort
    is meant to cover.
    """
    rng = np.random.default_rng(substream_seed(seed, "test-jitter"))
    directory = Path(directory)
    ids = []
    for pathology in pathologies:
        for si, severity in enumerate(severities):
            subject = make_phantom_subject(
                f"test-{pathology.value.lower()}-{si}",
                pathology,
                float(severity),
                grid,
                seed=substream_seed(seed, f"test:{pathology.value}:{si}"),
                jitter=rng,
                jitter_scale=0.35,
            )
            save_subject(subject, directory / subject.id)
            ids.append(subject.id)
    return ids


# ---------------------------------------------------------------------------
# digests and stamps
# ---------------------------------------------------------------------------


def _json_digest(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _dir_digest(directory: Path) -> str:
    digest = hashlib.sha256()
    if not directory.is_dir():
        return "missing"
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name != ".stamp.json":
            digest.update(str(path.relative_to(directory)).encode())
            digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


@dataclass
class StageStatus:
    name: str
    status: str  # "ran" | "cached"
    digest: str


class Pipeline:
    """Runs the stages against one configuration, caching by content digest."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self._subjects: Optional[dict[str, Subject]] = None
        self._test_subjects: Optional[dict[str, Subject]] = None
        self.statuses: list[StageStatus] = []

    # -- shared lazily loaded inputs ---------------------------------------

    def subjects(self) -> dict[str, Subject]:
        if self._subjects is None:
            loaded = load_subjects_dir(self.config.subjects_dir)
            if self.config.preprocess is not None:
                loaded = {
                    sid: preprocess(subject, self.config.preprocess)
                    for sid, subject in loaded.items()
                }
            self._subjects = loaded
        return self._subjects

    def test_subjects(self) -> dict[str, Subject]:
        if self.config.test_dir is None:
            raise DataError("config has no paths.test_dir; nothing to infer on")
        if self._test_subjects is None:
            loaded = load_subjects_dir(self.config.test_dir)
            if self.config.preprocess is not None:
                loaded = {
                    sid: preprocess(subject, self.config.preprocess)
                    for sid, subject in loaded.items()
                }
            self._test_subjects = loaded
        return self._test_subjects

    # -- stamp helpers ------------------------------------------------------

    _STAGE_DIRS = {"eval": "reports"}

    def _stage_dir(self, name: str) -> Path:
        return self.out / self._STAGE_DIRS.get(name, name)

    def _stamp_path(self, name: str) -> Path:
        return self._stage_dir(name) / ".stamp.json"

    def _is_cached(self, name: str, digest: str) -> bool:
        stamp = self._stamp_path(name)
        if not stamp.exists():
            return False
        try:
            return json.loads(stamp.read_text()).get("digest") == digest
        except json.JSONDecodeError:
            return False

    def _finish(self, name: str, digest: str, ran: bool) -> str:
        write_json({"digest": digest, "version": PIPELINE_VERSION}, self._stamp_path(name))
        self.statuses.append(StageStatus(name, "ran" if ran else "cached", digest))
        return digest

    def _run_stage(self, name: str, digest_inputs, executor) -> str:
        digest = _json_digest([PIPELINE_VERSION, name, digest_inputs])
        if self._is_cached(name, digest):
            self.statuses.append(StageStatus(name, "cached", digest))
            return digest
        stage_dir = self._stage_dir(name)
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True, exist_ok=True)
        executor(stage_dir)
        return self._finish(name, digest, ran=True)

    def _upstream_digest(self, name: str) -> str:
        stamp = self._stamp_path(name)
        if not stamp.exists():
            raise DataError(f"stage {name!r} has not run yet; run it first or use `run`")
        return json.loads(stamp.read_text())["digest"]

    # -- stages ---------------------------------------------------------------

    def stage_severity(self) -> str:
        config = self.config
        digest_inputs = {
            "subjects": _dir_digest(Path(config.subjects_dir)),
            "pathologies": [p.value for p in config.pathologies],
            "preprocess": config.config_digest_dict()["preprocess"],
        }

        def execute(stage_dir: Path) -> None:
            subjects = self.subjects()
            rows = []
            biomarkers: dict[str, dict[Pathology, float]] = {}
            for sid in sorted(subjects):
                subject = subjects[sid]
                values = {p: SEVERITY_FUNCTIONS[p](subject) for p in config.pathologies}
                biomarkers[sid] = values
            stats: dict[Pathology, NormalizationStats] = {}
            for pathology in config.pathologies:
                # The severity scale is percentile rank within the diseased
                # group; healthy subjects sit at or below its lower end.
                group = [
                    biomarkers[sid][pathology]
                    for sid, subject in sorted(subjects.items())
                    if subject.pathology == pathology
                ]
                stats[pathology] = fit_normalization(group, pathology)
                write_json(
                    stats[pathology].to_json_dict(),
                    stage_dir / f"stats_{pathology.value}.json",
                )
            for sid in sorted(subjects):
                subject = subjects[sid]
                rows.append(
                    {
                        "subject_id": sid,
                        "pathology": subject.pathology.value,
                        "biomarkers": {p.value: biomarkers[sid][p] for p in config.pathologies},
                        "gamma": {
                            p.value: normalize_to_gamma(biomarkers[sid][p], stats[p]).gamma
                            for p in config.pathologies
                        },
                    }
                )
            write_json({"subjects": rows}, stage_dir / "severity.json")

        return self._run_stage("severity", digest_inputs, execute)

    def load_stats(self) -> dict[Pathology, NormalizationStats]:
        stage_dir = self._stage_dir("severity")
        stats = {}
        for pathology in self.config.pathologies:
            path = stage_dir / f"stats_{pathology.value}.json"
            if not path.exists():
                raise DataError(f"missing {path}; run the severity stage first")
            stats[pathology] = NormalizationStats.from_json_dict(json.loads(path.read_text()))
        return stats

    def load_biomarkers(self) -> dict[str, dict[Pathology, float]]:
        path = self._stage_dir("severity") / "severity.json"
        if not path.exists():
            raise DataError(f"missing {path}; run the severity stage first")
        rows = json.loads(path.read_text())["subjects"]
        return {
            row["subject_id"]: {Pathology(k): float(v) for k, v in row["biomarkers"].items()}
            for row in rows
        }

    def stage_anchors(self) -> str:
        digest_inputs = {
            "severity": self._upstream_digest("severity"),
            "regime": self.config.regime,
        }

        def execute(stage_dir: Path) -> None:
            subjects = self.subjects()
            biomarkers = self.load_biomarkers()
            stats = self.load_stats()
            cohort_entries = [
                (subjects[sid], biomarkers[sid]) for sid in sorted(subjects)
            ]
            anchor_set = select_anchors(cohort_entries, stats, self.config.regime)
            write_json(anchor_set.to_json_dict(), stage_dir / "anchors.json")

        return self._run_stage("anchors", digest_inputs, execute)

    def load_anchor_set(self) -> AnchorSet:
        path = self._stage_dir("anchors") / "anchors.json"
        if not path.exists():
            raise DataError(f"missing {path}; run the anchors stage first")
        return AnchorSet.from_json_dict(json.loads(path.read_text()))

    def stage_synth(self) -> str:
        config = self.config
        digest_inputs = {
            "anchors": self._upstream_digest("anchors"),
            "trajectory": config.config_digest_dict()["trajectory"],
            "grid": config.config_digest_dict()["grid"],
            "seed": config.seed,
        }

        def execute(stage_dir: Path) -> None:
            subjects = self.subjects()
            stats = self.load_stats()
            anchor_set = self.load_anchor_set()
            figures_dir = stage_dir / "figures"
            for pathology in config.pathologies:
                cohort = synthesize_cohort(
                    anchor_set,
                    pathology,
                    subjects,
                    stats[pathology],
                    config.grid,
                    seed=substream_seed(config.seed, f"synth:{pathology.value}"),
                    n_per_segment=config.samples_per_segment,
                    j_probes=config.path_probe_count,
                )
                save_cohort(cohort, stage_dir / pathology.value.lower())
                save_figure(
                    severity_mapping_figure(cohort),
                    figures_dir / f"severity_mapping_{pathology.value.lower()}.png",
                )

        return self._run_stage("synth", digest_inputs, execute)

    def load_cohorts(self) -> dict[Pathology, VirtualCohort]:
        stage_dir = self._stage_dir("synth")
        cohorts = {}
        for pathology in self.config.pathologies:
            path = stage_dir / pathology.value.lower()
            if not (path / "manifest.json").exists():
                raise DataError(f"missing cohort at {path}; run the synth stage first")
            cohorts[pathology] = load_cohort(path)
        return cohorts

    def lattice_specs(self) -> list[ExpertSpec]:
        return build_lattice_specs(
            self.config.granularities, self.config.interleavings, self.config.phases
        )

    def stage_siv(self) -> str:
        config = self.config
        digest_inputs = {
            "synth": self._upstream_digest("synth"),
            "lattice": config.config_digest_dict()["lattice"],
        }

        def execute(stage_dir: Path) -> None:
            cohorts = self.load_cohorts()
            anchor_set = self.load_anchor_set()
            plans_dir = stage_dir / "plans"
            index = []
            for spec in self.lattice_specs():
                per_trajectory = [
                    partition(cohorts[p], anchor_set, spec.delta_gamma, spec.alpha)
                    for p in config.pathologies
                ]
                plan = merge_plans(per_trajectory)
                violations = verify_plan(plan, anchor_set)
                if violations:
                    raise DataError(
                        f"cell {spec.cell_name} produced an invalid plan: {violations}"
                    )
                save_plan(plan, plans_dir / f"{spec.cell_name}.json")
                index.append(
                    {
                        "delta_gamma": spec.delta_gamma,
                        "alpha": spec.alpha,
                        "phase": spec.phase,
                        "file": f"plans/{spec.cell_name}.json",
                        "train_count": len(plan.train_ids),
                        "val_count": len(plan.val_ids),
                    }
                )
            write_json({"cells": index}, stage_dir / "plans.json")

        return self._run_stage("siv", digest_inputs, execute)

    def load_plans(self) -> dict[ExpertSpec, SIVPlan]:
        stage_dir = self._stage_dir("siv")
        if not (stage_dir / "plans.json").exists():
            raise DataError(f"missing {stage_dir / 'plans.json'}; run the siv stage first")
        plans = {}
        for spec in self.lattice_specs():
            plans[spec] = load_plan(stage_dir / "plans" / f"{spec.cell_name}.json")
        return plans

    def build_store(self) -> SampleStore:
        cohorts = self.load_cohorts()
        anchor_set = self.load_anchor_set()
        subjects = self.subjects()
        anchor_subjects = {sid: subjects[sid] for sid in anchor_set.subject_ids}
        return build_sample_store(list(cohorts.values()), anchor_subjects)

    def stage_train(self) -> str:
        digest_inputs = {
            "siv": self._upstream_digest("siv"),
            "jobs_invariant": True,
        }

        def execute(stage_dir: Path) -> None:
            store = self.build_store()
            plans = self.load_plans()
            lattice = train_lattice(self.lattice_specs(), plans, store, jobs=self.config.jobs)
            save_lattice(lattice, stage_dir)

        return self._run_stage("train", digest_inputs, execute)

    def stage_infer(self) -> str:
        config = self.config
        digest_inputs = {
            "train": self._upstream_digest("train"),
            "test": _dir_digest(Path(config.test_dir)) if config.test_dir else None,
        }

        def execute(stage_dir: Path) -> None:
            lattice = load_lattice(self._stage_dir("train"))
            store = self.build_store()
            figures_dir = stage_dir / "figures"
            cases = self.test_cases()
            for case_id, image, _ in cases:
                result = run_activation(lattice, image, store, test_id=case_id)
                case_dir = stage_dir / case_id
                mask_path = store_volume(result.fused, case_dir / "mask.plv")
                write_json(
                    result.to_json_dict(output_mask_path=mask_path.name),
                    case_dir / "activation.json",
                )
                save_figure(
                    activation_heatmap_figure(result, case_id),
                    figures_dir / f"activation_{case_id}.png",
                )

        return self._run_stage("infer", digest_inputs, execute)

    def test_cases(self) -> list[tuple[str, VoxelGrid, LabelMask]]:
        """(case id, image, ground-truth mask) per test subject and phase."""
        cases = []
        for sid, subject in sorted(self.test_subjects().items()):
            for phase in self.config.phases:
                image, mask = subject.phase(phase)
                cases.append((f"{sid}_{phase}", image, mask))
        return cases

    def stage_eval(self) -> str:
        digest_inputs = {"infer": self._upstream_digest("infer")}

        def execute(stage_dir: Path) -> None:
            lattice = load_lattice(self._stage_dir("train"))
            store = self.build_store()
            infer_dir = self._stage_dir("infer")
            rows: dict[str, MetricReport] = {}
            cell_totals: dict[ExpertSpec, float] = {spec: 0.0 for spec in lattice.specs}
            activation_fg_dice = []
            for case_id, image, truth in self.test_cases():
                fused = load_volume(infer_dir / case_id / "mask.plv")
                rows[case_id] = evaluate_masks(fused, truth)
                activation_fg_dice.append(
                    float(np.mean([dice3d(fused, truth, c) for c in FOREGROUND_CLASSES]))
                )
                predictions = fan_out(lattice, image, store, test_id=case_id)
                for spec, pm in predictions.items():
                    pred = argmax_labels(pm)
                    cell_totals[spec] += float(
                        np.mean([dice3d(pred, truth, c) for c in FOREGROUND_CLASSES])
                    )
            n_cases = len(rows)
            cell_means = {spec: total / n_cases for spec, total in cell_totals.items()}
            cell_rows = [
                {
                    "delta_gamma": spec.delta_gamma,
                    "alpha": spec.alpha,
                    "phase": spec.phase,
                    "mean_foreground_dice": cell_means[spec],
                }
                for spec in sorted(cell_means)
            ]
            activation_summary = {
                "mean_foreground_dice": float(np.mean(activation_fg_dice)),
                "cell_mean_foreground_dice_min": float(min(cell_means.values())),
                "cell_mean_foreground_dice_median": float(np.median(list(cell_means.values()))),
                "cell_mean_foreground_dice_max": float(max(cell_means.values())),
            }
            outputs = write_metric_outputs(
                stage_dir,
                rows,
                extra={"cells": cell_rows, "activation": activation_summary},
            )
            save_figure(
                cell_dice_figure(cell_means, "mean foreground Dice per cell"),
                stage_dir / "figures" / "cell_dice.png",
            )
            cells_tsv = stage_dir / "cells.tsv"
            lines = ["delta_gamma\talpha\tphase\tmean_foreground_dice"]
            for row in cell_rows:
                lines.append(
                    f"{row['delta_gamma']:g}\t{row['alpha']}\t{row['phase']}\t"
                    f"{row['mean_foreground_dice']:.6f}"
                )
            cells_tsv.write_text("\n".join(lines) + "\n")

        return self._run_stage("eval", digest_inputs, execute)

    # -- full run -------------------------------------------------------------

    def run(self) -> dict:
        self.stage_severity()
        self.stage_anchors()
        self.stage_synth()
        self.stage_siv()
        self.stage_train()
        if self.config.test_dir is not None:
            self.stage_infer()
            self.stage_eval()
        manifest = {
            "config": self.config.config_digest_dict(),
            "stages": {
                s.name: {"status": s.status, "digest": s.digest} for s in self.statuses
            },
        }
        write_json(manifest, self.out / "run_manifest.json")
        return manifest


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute every configured stage; returns the run manifest."""
    return Pipeline(config).run()
