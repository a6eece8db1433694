"""Voxel-grid data model, geometry primitives, preprocessing, and volume I/O.

Conventions used throughout the package:

* arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``;
* voxel coordinates are cell centers, physical position = index * spacing;
* images are float32 in [0, 1], masks are uint8 with labels
  0=background, 1=RV, 2=myocardium, 3=LV pool;
* every type is immutable after construction (arrays are frozen), so all
  operations here are pure functions safe to call from concurrent workers.

Volumes persist in the "PLV1" format: a raw little-endian payload file
(``*.plv``) with elements in x-fastest order, channel blocks concatenated,
plus a JSON sidecar header (``*.plv.json``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    DimensionMismatchError,
    EmptyMaskError,
    FewerThanTwoVoxelsError,
    GeometryMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

BACKGROUND, RV, MYO, POOL = 0, 1, 2, 3
FOREGROUND_CLASSES = (RV, MYO, POOL)
NUM_CLASSES = 4
CLASS_NAMES = {BACKGROUND: "background", RV: "rv", MYO: "myo", POOL: "pool"}

Triple = tuple[int, int, int]
Spacing = tuple[float, float, float]


class Pathology(str, Enum):
    HEALTHY = "Healthy"
    DCM = "DCM"
    HCM = "HCM"
    MINF = "MINF"
    ARV = "ARV"
    OTHER = "Other"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def _check_spacing(spacing: Sequence[float]) -> Spacing:
    s = tuple(float(v) for v in spacing)
    if len(s) != 3 or any(v <= 0 for v in s):
        raise MalformedHeaderError(f"spacing must be 3 positive values, got {spacing!r}")
    return s  # type: ignore[return-value]


def _check_dims(dims: Sequence[int]) -> Triple:
    d = tuple(int(v) for v in dims)
    if len(d) != 3 or any(v <= 0 for v in d):
        raise MalformedHeaderError(f"dims must be 3 positive integers, got {dims!r}")
    return d  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """3D scalar image on a spaced grid, values normalized to [0, 1]."""

    values: np.ndarray
    spacing: Spacing

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise DimensionMismatchError(f"expected 3D values, got shape {values.shape}")
        _check_dims(values.shape)
        lo, hi = float(values.min()), float(values.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise DataError(f"image values outside [0,1]: min={lo}, max={hi}")
        object.__setattr__(self, "values", _freeze(np.clip(values, 0.0, 1.0)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return self.values.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Multi-label segmentation paired with a :class:`VoxelGrid` geometry."""

    labels: np.ndarray
    spacing: Spacing

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DimensionMismatchError(f"expected 3D labels, got shape {labels.shape}")
        _check_dims(labels.shape)
        if labels.max(initial=0) >= NUM_CLASSES or labels.min(initial=0) < 0:
            raise DataError("labels must lie in {0,1,2,3}")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return self.labels.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-voxel class probabilities, channel-first (4, nx, ny, nz)."""

    probs: np.ndarray
    spacing: Spacing

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float32)
        if probs.ndim != 4 or probs.shape[0] != NUM_CLASSES:
            raise DimensionMismatchError(
                f"expected ({NUM_CLASSES}, nx, ny, nz) probabilities, got {probs.shape}"
            )
        _check_dims(probs.shape[1:])
        if probs.min() < -1e-6 or probs.max() > 1 + 1e-6:
            raise DataError("probabilities outside [0,1]")
        sums = probs.astype(np.float64).sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-6):
            worst = float(np.abs(sums - 1.0).max())
            raise DataError(f"per-voxel sums deviate from 1 by {worst}")
        object.__setattr__(self, "probs", _freeze(probs))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return self.probs.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Subject:
    """A labeled subject: (image, mask) pairs at both cardiac phases."""

    id: str
    ed: tuple[VoxelGrid, LabelMask]
    es: tuple[VoxelGrid, LabelMask]
    pathology: Pathology

    def __post_init__(self) -> None:
        pairs = [self.ed, self.es]
        ref = pairs[0][0]
        for image, mask in pairs:
            if image.dims != ref.dims or image.spacing != ref.spacing:
                raise GeometryMismatchError(f"subject {self.id}: phase dims/spacing differ")
            require_same_geometry(image, mask)

    def phase(self, name: str) -> tuple[VoxelGrid, LabelMask]:
        if name == "ed":
            return self.ed
        if name == "es":
            return self.es
        raise KeyError(name)


PHASES = ("ed", "es")

GridLike = Union[VoxelGrid, LabelMask, ProbabilityMap]


def require_same_geometry(a: GridLike, b: GridLike) -> None:
    if a.dims != b.dims:
        raise GeometryMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise GeometryMismatchError(f"spacing differs: {a.spacing} vs {b.spacing}")


# ---------------------------------------------------------------------------
# geometry primitives
# ---------------------------------------------------------------------------


def volume_of(mask: LabelMask, label: int) -> float:
    """Physical volume (mm^3) of one label region; 0.0 when empty."""
    if label not in FOREGROUND_CLASSES:
        raise ValueError(f"label must be a foreground class, got {label}")
    count = int(np.count_nonzero(mask.labels == label))
    return count * mask.voxel_volume_mm3


def _voxel_coords_mm(mask: LabelMask, label: int) -> np.ndarray:
    idx = np.argwhere(mask.labels == label)
    return idx.astype(np.float64) * np.asarray(mask.spacing)


def principal_axis_lengths(mask: LabelMask, label: int) -> tuple[float, float]:
    """Extents (mm) of a label region along its principal directions.

    Returns ``(long, short)``: the max-minus-min projection of voxel
    centers onto the first and last principal component of their
    physical coordinates.
    """
    coords = _voxel_coords_mm(mask, label)
    if coords.shape[0] < 2:
        raise FewerThanTwoVoxelsError(
            f"label {label} has {coords.shape[0]} voxels; need at least 2"
        )
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending eigenvalues
    proj_long = centered @ eigvecs[:, -1]
    proj_short = centered @ eigvecs[:, 0]
    return (
        float(proj_long.max() - proj_long.min()),
        float(proj_short.max() - proj_short.min()),
    )


def principal_extents(mask: LabelMask, label: int) -> np.ndarray:
    """All three principal extents (mm), descending."""
    coords = _voxel_coords_mm(mask, label)
    if coords.shape[0] < 2:
        raise FewerThanTwoVoxelsError(
            f"label {label} has {coords.shape[0]} voxels; need at least 2"
        )
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / coords.shape[0]
    _, eigvecs = np.linalg.eigh(cov)
    proj = centered @ eigvecs
    extents = proj.max(axis=0) - proj.min(axis=0)
    return np.sort(extents)[::-1]


def argmax_labels(pm: ProbabilityMap) -> LabelMask:
    """Per-voxel argmax over classes; ties break toward the lowest index."""
    return LabelMask(np.argmax(pm.probs, axis=0).astype(np.uint8), pm.spacing)


def one_hot(mask: LabelMask) -> ProbabilityMap:
    """Encode a mask as a confident probability map."""
    probs = np.zeros((NUM_CLASSES,) + mask.dims, dtype=np.float32)
    for c in range(NUM_CLASSES):
        probs[c] = mask.labels == c
    return ProbabilityMap(probs, mask.spacing)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessSpec:
    """Target geometry: in-plane spacing (mm), crop margin fraction, output dims."""

    in_plane_spacing_mm: float
    margin: float
    dims: Triple

    def __post_init__(self) -> None:
        if self.in_plane_spacing_mm <= 0:
            raise ValueError("in-plane spacing must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        object.__setattr__(self, "dims", _check_dims(self.dims))


def _resize_coords(n_in: int, n_out: int) -> np.ndarray:
    # Endpoint-aligned sampling: output index 0 maps to input 0 and the last
    # output index maps to the last input index, so identity resizes are exact
    # and foreground touching the crop box edges stays on the volume faces.
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def _resample_image(values: np.ndarray, out_dims: Triple) -> np.ndarray:
    coords = np.meshgrid(
        *[_resize_coords(values.shape[i], out_dims[i]) for i in range(3)], indexing="ij"
    )
    out = ndimage.map_coordinates(
        values.astype(np.float64), np.stack(coords), order=1, mode="nearest"
    )
    return out.astype(np.float32)


def _resample_mask(labels: np.ndarray, out_dims: Triple) -> np.ndarray:
    idx = [
        np.clip(np.round(_resize_coords(labels.shape[i], out_dims[i])), 0, labels.shape[i] - 1).astype(
            np.intp
        )
        for i in range(3)
    ]
    return labels[np.ix_(idx[0], idx[1], idx[2])]


def _crop_box(union_fg: np.ndarray, margin: float) -> tuple[slice, slice, slice]:
    if not union_fg.any():
        raise EmptyMaskError("cannot locate crop box: union mask is empty")
    slices = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        nonzero = np.where(union_fg.any(axis=other))[0]
        lo, hi = int(nonzero[0]), int(nonzero[-1])
        extent = hi - lo + 1
        pad = int(round(margin * extent / 2.0))
        slices.append(slice(max(0, lo - pad), min(union_fg.shape[axis], hi + pad + 1)))
    return tuple(slices)  # type: ignore[return-value]


def _minmax_normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def preprocess(subject: Subject, target: PreprocessSpec) -> Subject:
    """Resample in-plane, crop around the union foreground, resize, normalize.

    The crop box is the union (ED+ES) foreground bounding box padded
    symmetrically so each axis extent grows by the margin fraction. Images
    are interpolated trilinearly, masks nearest-neighbor; intensities are
    min-max normalized per phase (a constant image maps to all zeros).
    """
    src_spacing = subject.ed[0].spacing
    nx, ny, nz = subject.ed[0].dims
    sp = target.in_plane_spacing_mm
    mid_dims = (
        int(round((nx - 1) * src_spacing[0] / sp)) + 1,
        int(round((ny - 1) * src_spacing[1] / sp)) + 1,
        nz,
    )

    resampled: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for phase in PHASES:
        image, mask = subject.phase(phase)
        resampled[phase] = (
            _resample_image(image.values, mid_dims),
            _resample_mask(mask.labels, mid_dims),
        )

    union_fg = (resampled["ed"][1] > 0) | (resampled["es"][1] > 0)
    box = _crop_box(union_fg, target.margin)

    out_spacing = (sp, sp, src_spacing[2])
    pairs = {}
    for phase in PHASES:
        values, labels = resampled[phase]
        values = _minmax_normalize(_resample_image(values[box], target.dims))
        labels = _resample_mask(labels[box], target.dims)
        pairs[phase] = (VoxelGrid(values, out_spacing), LabelMask(labels, out_spacing))

    return Subject(subject.id, pairs["ed"], pairs["es"], subject.pathology)


# ---------------------------------------------------------------------------
# PLV1 I/O
# ---------------------------------------------------------------------------

_MAGIC = "PLV1"
_KINDS = {"image", "mask", "prob"}


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def store_volume(volume: GridLike, path: Union[str, Path]) -> Path:
    """Write a volume as PLV1 (raw payload + JSON sidecar). Returns the payload path."""
    path = Path(path)
    if isinstance(volume, VoxelGrid):
        kind, channels, dtype = "image", 1, "f32"
        payload = volume.values.ravel(order="F").astype("<f4")
    elif isinstance(volume, LabelMask):
        kind, channels, dtype = "mask", 1, "u8"
        payload = volume.labels.ravel(order="F").astype(np.uint8)
    elif isinstance(volume, ProbabilityMap):
        kind, channels, dtype = "prob", NUM_CLASSES, "f32"
        payload = np.concatenate(
            [volume.probs[c].ravel(order="F") for c in range(NUM_CLASSES)]
        ).astype("<f4")
    else:
        raise TypeError(f"cannot store {type(volume).__name__}")

    dims = volume.dims
    header = {
        "magic": _MAGIC,
        "kind": kind,
        "dims": list(dims),
        "spacing_mm": [float(s) for s in volume.spacing],
        "channels": channels,
        "dtype": dtype,
        "byte_order": "little",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.tobytes())
    _header_path(path).write_text(json.dumps(header, sort_keys=True) + "\n")
    return path


def load_volume(path: Union[str, Path]) -> GridLike:
    """Read a PLV1 volume; the round trip with :func:`store_volume` is bit-exact."""
    path = Path(path)
    header_path = _header_path(path)
    if not header_path.exists():
        raise MalformedHeaderError(f"missing sidecar header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"unparsable header {header_path}: {exc}") from exc

    for key in ("magic", "kind", "dims", "spacing_mm", "channels", "dtype", "byte_order"):
        if key not in header:
            raise MalformedHeaderError(f"header missing field {key!r}")
    if header["magic"] != _MAGIC:
        raise MalformedHeaderError(f"bad magic {header['magic']!r}")
    if header["kind"] not in _KINDS:
        raise MalformedHeaderError(f"unknown kind {header['kind']!r}")
    if header["byte_order"] != "little":
        raise MalformedHeaderError(f"unsupported byte order {header['byte_order']!r}")
    dims = _check_dims(header["dims"])
    spacing = _check_spacing(header["spacing_mm"])
    channels = int(header["channels"])

    expected_channels = NUM_CLASSES if header["kind"] == "prob" else 1
    if channels != expected_channels:
        raise MalformedHeaderError(
            f"kind {header['kind']!r} requires {expected_channels} channels, header says {channels}"
        )
    expected_dtype = "u8" if header["kind"] == "mask" else "f32"
    if header["dtype"] != expected_dtype:
        raise MalformedHeaderError(
            f"kind {header['kind']!r} requires dtype {expected_dtype!r}, header says {header['dtype']!r}"
        )

    np_dtype = np.dtype("<f4") if expected_dtype == "f32" else np.dtype(np.uint8)
    raw = np.frombuffer(path.read_bytes(), dtype=np_dtype)
    expected = channels * dims[0] * dims[1] * dims[2]
    if raw.size < expected:
        raise TruncatedPayloadError(f"payload has {raw.size} elements, expected {expected}")
    if raw.size > expected:
        raise DimensionMismatchError(f"payload has {raw.size} elements, expected {expected}")

    if header["kind"] == "image":
        return VoxelGrid(raw.reshape(dims, order="F"), spacing)
    if header["kind"] == "mask":
        return LabelMask(raw.reshape(dims, order="F"), spacing)
    per_channel = dims[0] * dims[1] * dims[2]
    probs = np.stack(
        [raw[c * per_channel : (c + 1) * per_channel].reshape(dims, order="F") for c in range(channels)]
    )
    return ProbabilityMap(probs, spacing)
