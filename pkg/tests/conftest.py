from __future__ import annotations

import numpy as np
import pytest

from cardiolattice.volume import LabelMask, Subject, VoxelGrid, Pathology


def ellipsoid_indicator(dims, spacing, center_mm, semi_axes_mm) -> np.ndarray:
    """Boolean voxel-center membership test for an axis-aligned ellipsoid."""
    axes = [np.arange(dims[i]) * spacing[i] for i in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    cx, cy, cz = center_mm
    a, b, c = semi_axes_mm
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0


def mask_from_indicator(indicator: np.ndarray, spacing, label: int = 3) -> LabelMask:
    labels = np.zeros(indicator.shape, dtype=np.uint8)
    labels[indicator] = label
    return LabelMask(labels, spacing)


def flat_subject(labels_ed: np.ndarray, labels_es: np.ndarray, spacing,
                 pathology=Pathology.HEALTHY, subject_id="s0") -> Subject:
    """Subject whose images are derived deterministically from the masks."""
    def make_pair(labels):
        values = (labels.astype(np.float32) / 3.0).clip(0.0, 1.0)
        return VoxelGrid(values, spacing), LabelMask(labels, spacing)

    return Subject(subject_id, make_pair(labels_ed), make_pair(labels_es), pathology)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
