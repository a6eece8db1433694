"""Pipeline configuration: JSON schema, defaults, and validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import ConfigError
from .metrics import LossWeights
from .phantom import GridSpec
from .volume import PHASES, Pathology, PreprocessSpec

DEFAULT_GRANULARITIES = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEFAULT_INTERLEAVINGS = (2, 4, 6, 8, 10)
DEFAULT_PATHOLOGIES = (Pathology.DCM, Pathology.HCM, Pathology.MINF, Pathology.ARV)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a deterministic end-to-end run needs."""

    subjects_dir: Path
    out_dir: Path
    seed: int = 1234
    regime: str = "A7"
    pathologies: tuple[Pathology, ...] = DEFAULT_PATHOLOGIES
    grid: GridSpec = GridSpec((64, 64, 64), (2.0, 2.0, 2.0))
    samples_per_segment: int = 20
    path_probe_count: int = 50
    granularities: tuple[float, ...] = DEFAULT_GRANULARITIES
    interleavings: tuple[int, ...] = DEFAULT_INTERLEAVINGS
    phases: tuple[str, ...] = PHASES
    test_dir: Optional[Path] = None
    jobs: int = 1
    preprocess: Optional[PreprocessSpec] = None
    loss_weights: LossWeights = LossWeights()

    def __post_init__(self) -> None:
        if self.regime not in ("A7", "A11", "A19"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if not self.pathologies:
            raise ConfigError("pathology list must be nonempty")
        if self.samples_per_segment < 3:
            raise ConfigError("samples_per_segment must be at least 3 (anchors plus interior)")
        if self.path_probe_count < 2:
            raise ConfigError("path_probe_count must be at least 2")
        if not self.granularities or not self.interleavings or not self.phases:
            raise ConfigError("lattice axes must be nonempty")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if any(p not in PHASES for p in self.phases):
            raise ConfigError(f"phases must be drawn from {PHASES}")

    def config_digest_dict(self) -> dict:
        """Stable dict of all determinism-relevant settings."""
        return {
            "seed": self.seed,
            "regime": self.regime,
            "pathologies": [p.value for p in self.pathologies],
            "grid": {"dims": list(self.grid.dims), "spacing_mm": list(self.grid.spacing)},
            "trajectory": {
                "samples_per_segment": self.samples_per_segment,
                "path_probe_count": self.path_probe_count,
            },
            "lattice": {
                "granularities": list(self.granularities),
                "interleavings": list(self.interleavings),
                "phases": list(self.phases),
            },
            "preprocess": None
            if self.preprocess is None
            else {
                "in_plane_spacing_mm": self.preprocess.in_plane_spacing_mm,
                "margin": self.preprocess.margin,
                "dims": list(self.preprocess.dims),
            },
        }


def _require(data: dict, key: str, context: str) -> object:
    if key not in data:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return data[key]


def config_from_dict(data: dict, base_dir: Union[str, Path] = ".") -> PipelineConfig:
    base = Path(base_dir)
    try:
        paths = _require(data, "paths", "config")
        subjects_dir = base / str(_require(paths, "subjects_dir", "config.paths"))
        out_dir = base / str(_require(paths, "out_dir", "config.paths"))
        test_dir = paths.get("test_dir")

        grid_data = data.get("grid", {})
        grid = GridSpec(
            tuple(grid_data.get("dims", (64, 64, 64))),
            tuple(grid_data.get("spacing_mm", (2.0, 2.0, 2.0))),
        )
        trajectory = data.get("trajectory", {})
        lattice = data.get("lattice", {})
        preprocess_data = data.get("preprocess")
        preprocess = None
        if preprocess_data:
            preprocess = PreprocessSpec(
                in_plane_spacing_mm=float(preprocess_data["in_plane_spacing_mm"]),
                margin=float(preprocess_data["margin"]),
                dims=tuple(preprocess_data["dims"]),
            )
        weights_data = data.get("loss_weights", {})
        weights = LossWeights(**{k: float(v) for k, v in weights_data.items()})

        return PipelineConfig(
            subjects_dir=subjects_dir,
            out_dir=out_dir,
            test_dir=None if test_dir is None else base / str(test_dir),
            seed=int(data.get("seed", 1234)),
            regime=str(data.get("regime", "A7")),
            pathologies=tuple(Pathology(p) for p in data.get(
                "pathologies", [p.value for p in DEFAULT_PATHOLOGIES]
            )),
            grid=grid,
            samples_per_segment=int(trajectory.get("samples_per_segment", 20)),
            path_probe_count=int(trajectory.get("path_probe_count", 50)),
            granularities=tuple(float(d) for d in lattice.get(
                "granularities", DEFAULT_GRANULARITIES
            )),
            interleavings=tuple(int(a) for a in lattice.get(
                "interleavings", DEFAULT_INTERLEAVINGS
            )),
            phases=tuple(lattice.get("phases", list(PHASES))),
            jobs=int(data.get("jobs", 1)),
            preprocess=preprocess,
            loss_weights=weights,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(
    path: Union[str, Path],
    seed: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: Optional[int] = None,
) -> PipelineConfig:
    """Read a JSON config file; paths are resolved relative to the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    config = config_from_dict(data, base_dir=path.parent)
    if seed is not None:
        config = replace(config, seed=seed)
    if out_dir is not None:
        config = replace(config, out_dir=Path(out_dir))
    if jobs is not None:
        config = replace(config, jobs=jobs)
    return config
