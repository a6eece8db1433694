"""Segmentation and image-similarity metrics plus composite loss evaluation.

Conventions (the literature leaves these open, so they are pinned here):

* Dice of two empty regions is 1.0; one empty region gives 0.0.
* Surface voxels use 6-connectivity; anything outside the grid counts as
  background, so voxels on the volume faces are boundary voxels.
* The 95th percentile of pooled symmetric surface distances is linearly
  interpolated.
* SSIM uses a 7x7x7 box window with reflective edges, C1=0.01^2 and
  C2=0.03^2 on the [0, 1] intensity range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import (
    EmptySurfaceError,
    GeometryMismatchError,
    TooSmallGridError,
    ZeroVarianceError,
)
from .volume import (
    FOREGROUND_CLASSES,
    NUM_CLASSES,
    LabelMask,
    VoxelGrid,
    require_same_geometry,
)


def dice3d(a: LabelMask, b: LabelMask, label: int) -> float:
    """Dice overlap of one label region; both-empty pairs count as 1.0."""
    require_same_geometry(a, b)
    in_a = a.labels == label
    in_b = b.labels == label
    na, nb = int(in_a.sum()), int(in_b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(in_a & in_b))
    return 2.0 * inter / (na + nb)


def boundary_voxels(mask: LabelMask, label: int) -> np.ndarray:
    """Centers (mm) of foreground voxels with a face-neighbor outside the region."""
    region = mask.labels == label
    if not region.any():
        return np.empty((0, 3))
    padded = np.pad(region, 1, constant_values=False)
    interior = np.ones_like(region)
    for axis in range(3):
        lo = tuple(
            slice(0, -2) if a == axis else slice(1, -1) for a in range(3)
        )
        hi = tuple(
            slice(2, None) if a == axis else slice(1, -1) for a in range(3)
        )
        interior &= padded[lo] & padded[hi]
    boundary = region & ~interior
    return np.argwhere(boundary).astype(np.float64) * np.asarray(mask.spacing)


def hd95(a: LabelMask, b: LabelMask, label: int) -> float:
    """95th percentile of pooled symmetric boundary distances, in mm."""
    require_same_geometry(a, b)
    pa = boundary_voxels(a, label)
    pb = boundary_voxels(b, label)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptySurfaceError(f"label {label} empty in one or both masks")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95))


def inverse_volume_weights(target: LabelMask, classes: Sequence[int] = FOREGROUND_CLASSES) -> dict[int, float]:
    """Per-class weights: inverse relative volume, normalized so max weight is 1."""
    counts = {c: int(np.count_nonzero(target.labels == c)) for c in classes}
    present = {c: n for c, n in counts.items() if n > 0}
    if not present:
        return {}
    total = sum(present.values())
    raw = {c: total / n for c, n in present.items()}
    top = max(raw.values())
    return {c: v / top for c, v in raw.items()}


def generalized_dice(
    pred: LabelMask,
    target: LabelMask,
    weights: Optional[Mapping[int, float]] = None,
) -> float:
    """Weighted multi-class Dice loss: 1 - sum(w_c * dice_c) / sum(w_c).

    Weights default to the inverse relative volume of each class present in
    the target, normalized so the largest weight is 1. A target with no
    foreground yields 0.0.
    """
    require_same_geometry(pred, target)
    if weights is None:
        weights = inverse_volume_weights(target)
    if not weights:
        return 0.0
    num = sum(w * dice3d(pred, target, c) for c, w in weights.items())
    den = sum(weights.values())
    return 1.0 - num / den


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def ssim(a: np.ndarray | VoxelGrid, b: np.ndarray | VoxelGrid, window: int = 7) -> float:
    """Mean local structural similarity of two fields on the [0, 1] range."""
    av = a.values if isinstance(a, VoxelGrid) else np.asarray(a)
    bv = b.values if isinstance(b, VoxelGrid) else np.asarray(b)
    if isinstance(a, VoxelGrid) and isinstance(b, VoxelGrid):
        require_same_geometry(a, b)
    elif av.shape != bv.shape:
        raise GeometryMismatchError(f"shapes differ: {av.shape} vs {bv.shape}")
    av = av.astype(np.float64)
    bv = bv.astype(np.float64)

    def box(x: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(x, size=window, mode="reflect")

    mu_a, mu_b = box(av), box(bv)
    var_a = box(av * av) - mu_a**2
    var_b = box(bv * bv) - mu_b**2
    cov = box(av * bv) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def ncc(a: np.ndarray | VoxelGrid, b: np.ndarray | VoxelGrid) -> float:
    """Pearson correlation of voxel values; raises on constant inputs."""
    av = (a.values if isinstance(a, VoxelGrid) else np.asarray(a)).ravel().astype(np.float64)
    bv = (b.values if isinstance(b, VoxelGrid) else np.asarray(b)).ravel().astype(np.float64)
    if av.shape != bv.shape:
        raise GeometryMismatchError(f"sizes differ: {av.size} vs {bv.size}")
    az = av - av.mean()
    bz = bv - bv.mean()
    sa = float(np.sqrt((az * az).sum()))
    sb = float(np.sqrt((bz * bz).sum()))
    if sa == 0.0 or sb == 0.0:
        raise ZeroVarianceError("correlation undefined for constant input")
    return float((az * bz).sum() / (sa * sb))


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel 3-vector displacement (mm), channel-first (3, nx, ny, nz)."""

    vectors: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 4 or vectors.shape[0] != 3:
            raise GeometryMismatchError(f"expected (3, nx, ny, nz), got {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("displacements must be finite")
        vectors = np.ascontiguousarray(vectors)
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)


def smoothness(phi: DeformationField) -> float:
    """Mean squared Jacobian magnitude of the displacement field.

    Forward differences per voxel step; each (component, axis) pair
    contributes the mean of its squared differences, summed over pairs.
    A linear ramp of slope s along one axis therefore scores exactly s^2.
    """
    vectors = phi.vectors
    if any(n < 2 for n in vectors.shape[1:]):
        raise TooSmallGridError("need at least 2 voxels per axis for differences")
    total = 0.0
    for comp in range(3):
        for axis in range(3):
            diffs = np.diff(vectors[comp], axis=axis)
            total += float(np.mean(diffs**2))
    return total


def _one_hot_channels(mask: LabelMask) -> np.ndarray:
    out = np.zeros((NUM_CLASSES,) + mask.dims, dtype=np.float64)
    for c in range(NUM_CLASSES):
        out[c] = mask.labels == c
    return out


def correction_loss(
    image_warp: VoxelGrid,
    image_target: VoxelGrid,
    mask_warp: LabelMask,
    mask_target: LabelMask,
) -> float:
    """Mean absolute image difference plus mean absolute one-hot mask difference."""
    require_same_geometry(image_warp, image_target)
    require_same_geometry(mask_warp, mask_target)
    image_term = float(np.mean(np.abs(image_warp.values.astype(np.float64) - image_target.values)))
    mask_term = float(np.mean(np.abs(_one_hot_channels(mask_warp) - _one_hot_channels(mask_target))))
    return image_term + mask_term


def mask_loss(pred: LabelMask, target: LabelMask) -> float:
    """Per-class weighted sum of Dice, SSIM, and correlation losses.

    Each foreground class present in the target contributes
    ``w_c * ((1 - dice_c) + (1 - ssim_c) + (1 - ncc_c))`` computed on its
    one-hot channel; a constant channel pair contributes no correlation term.
    """
    require_same_geometry(pred, target)
    weights = inverse_volume_weights(target)
    total = 0.0
    for c, w in weights.items():
        pc = (pred.labels == c).astype(np.float64)
        tc = (target.labels == c).astype(np.float64)
        term = (1.0 - dice3d(pred, target, c)) + (1.0 - ssim(pc, tc))
        try:
            term += 1.0 - ncc(pc, tc)
        except ZeroVarianceError:
            pass
        total += w * term
    return total


@dataclass(frozen=True)
class LossWeights:
    """Weighting factors for the composite training objectives."""

    align: float = 1.0
    fid: float = 1.0
    mask: float = 20.0
    corr: float = 20.0
    sm: float = 40.0
    img_ssim: float = 10.0
    lpips: float = 1.0


@dataclass(frozen=True)
class CompositeLosses:
    align: float
    fid: float
    total: float


def composite_losses(
    corr: float,
    sm: float,
    img_ssim_loss: float,
    mask: float,
    weights: LossWeights = LossWeights(),
    lpips_score: Optional[float] = None,
) -> CompositeLosses:
    """Combine component losses into alignment, fidelity, and total terms.

    The perceptual term is an external hook: it contributes 0 unless a
    score is supplied.
    """
    align = weights.corr * corr + weights.sm * sm
    lpips = lpips_score if lpips_score is not None else 0.0
    fid = weights.lpips * lpips + weights.img_ssim * img_ssim_loss
    total = weights.align * align + weights.fid * fid + weights.mask * mask
    return CompositeLosses(align=align, fid=fid, total=total)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

# Table column order follows the clinical convention: Pool, Myo, RV.
TABLE_CLASS_ORDER = (3, 2, 1)
TABLE_CLASS_LABELS = {3: "Pool", 2: "Myo", 1: "RV"}


@dataclass(frozen=True)
class MetricReport:
    """Per-class Dice and HD95 plus averages, with optional loss components."""

    dice: Mapping[int, float]
    hd95_mm: Mapping[int, float]
    losses: Mapping[str, float] = field(default_factory=dict)

    @property
    def dice_avg(self) -> float:
        return float(np.mean([self.dice[c] for c in TABLE_CLASS_ORDER]))

    @property
    def hd95_avg(self) -> float:
        return float(np.mean([self.hd95_mm[c] for c in TABLE_CLASS_ORDER]))

    def to_json_dict(self) -> dict:
        out = {
            "dice": {TABLE_CLASS_LABELS[c].lower(): self.dice[c] for c in TABLE_CLASS_ORDER},
            "dice_avg": self.dice_avg,
            "hd95_mm": {TABLE_CLASS_LABELS[c].lower(): self.hd95_mm[c] for c in TABLE_CLASS_ORDER},
            "hd95_avg_mm": self.hd95_avg,
        }
        if self.losses:
            out["losses"] = dict(sorted(self.losses.items()))
        return out


def evaluate_masks(pred: LabelMask, target: LabelMask) -> MetricReport:
    """Dice and HD95 per foreground class; HD95 is inf when a surface is empty
    on exactly one side and 0 when both are empty."""
    dice = {c: dice3d(pred, target, c) for c in FOREGROUND_CLASSES}
    distances = {}
    for c in FOREGROUND_CLASSES:
        pred_empty = not np.any(pred.labels == c)
        target_empty = not np.any(target.labels == c)
        if pred_empty and target_empty:
            distances[c] = 0.0
        elif pred_empty or target_empty:
            distances[c] = float("inf")
        else:
            distances[c] = hd95(pred, target, c)
    return MetricReport(dice=dice, hd95_mm=distances)


def format_report_table(rows: Mapping[str, MetricReport]) -> str:
    """Aligned plain-text table with Dice and HD95 columns per class."""
    headers = (
        ["case"]
        + [f"Dice {TABLE_CLASS_LABELS[c]}" for c in TABLE_CLASS_ORDER]
        + ["Dice Avg"]
        + [f"HD95 {TABLE_CLASS_LABELS[c]}" for c in TABLE_CLASS_ORDER]
        + ["HD95 Avg"]
    )
    body = []
    for name, report in rows.items():
        body.append(
            [name]
            + [f"{report.dice[c]:.3f}" for c in TABLE_CLASS_ORDER]
            + [f"{report.dice_avg:.3f}"]
            + [f"{report.hd95_mm[c]:.2f}" for c in TABLE_CLASS_ORDER]
            + [f"{report.hd95_avg:.2f}"]
        )
    widths = [max(len(headers[i]), *(len(r[i]) for r in body)) if body else len(headers[i]) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    return "\n".join(lines) + "\n"
