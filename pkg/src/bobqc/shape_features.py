"""Per-organ shape descriptors: normalized volume, sphericity, eccentricity."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .eigen import eigvalsh3
from .volume_io import LabelVolume

ECC_DEGENERATE = 1e-12  # mm^2; below this lambda_max the organ is a point


class EmptyBodyError(ValueError):
    pass


class EmptyOrganError(ValueError):
    pass


@dataclass(frozen=True)
class OrganFeatures:
    sample_id: str
    class_id: int
    voxel_count: int
    normalized_volume: float
    surface_area: float
    sphericity: float | None
    eccentricity: float | None

    @property
    def present(self) -> bool:
        return self.voxel_count > 0


@dataclass(frozen=True)
class BodyStats:
    sample_id: str
    body_voxel_count: int


def _mask(vol: LabelVolume, class_id: int) -> np.ndarray:
    if class_id < 1:
        raise ValueError(f"class_id must be >= 1, got {class_id}")
    return vol.voxels == class_id


def organ_voxel_count(vol: LabelVolume, class_id: int) -> int:
    return int(np.count_nonzero(_mask(vol, class_id)))


def body_voxel_count(vol: LabelVolume, body_classes: Iterable[int] | None = None) -> int:
    """Non-background voxel count, or the count over ``body_classes`` if given."""
    if body_classes is None:
        return int(np.count_nonzero(vol.voxels))
    return int(np.count_nonzero(np.isin(vol.voxels, list(body_classes))))


def normalized_volume(vol: LabelVolume, class_id: int, body_classes=None) -> float:
    body = body_voxel_count(vol, body_classes)
    if body == 0:
        raise EmptyBodyError("empty body")
    return organ_voxel_count(vol, class_id) / body


def _surface_area_of_mask(mask: np.ndarray, spacing) -> float:
    dx, dy, dz = spacing.as_tuple()
    padded = np.pad(mask, 1, constant_values=False)
    # every in/out transition along an axis is exactly one exposed organ face
    fx = np.count_nonzero(padded[1:, :, :] != padded[:-1, :, :])
    fy = np.count_nonzero(padded[:, 1:, :] != padded[:, :-1, :])
    fz = np.count_nonzero(padded[:, :, 1:] != padded[:, :, :-1])
    return fx * (dy * dz) + fy * (dx * dz) + fz * (dx * dy)


def surface_area(vol: LabelVolume, class_id: int) -> float:
    """Exposed-face area in mm^2 (6-neighbourhood, grid edge counts as outside)."""
    mask = _mask(vol, class_id)
    if not mask.any():
        raise EmptyOrganError(f"empty organ: class {class_id}")
    return _surface_area_of_mask(mask, vol.spacing)


def _sphericity(n_voxels: int, area: float, voxel_volume: float) -> float:
    v_phys = n_voxels * voxel_volume
    return math.pi ** (1.0 / 3.0) * (6.0 * v_phys) ** (2.0 / 3.0) / area


def sphericity(vol: LabelVolume, class_id: int) -> float:
    mask = _mask(vol, class_id)
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise EmptyOrganError(f"empty organ: class {class_id}")
    return _sphericity(n, _surface_area_of_mask(mask, vol.spacing), vol.spacing.voxel_volume)


def coordinate_covariance(mask: np.ndarray, spacing) -> np.ndarray:
    """Population covariance (divisor N) of physical voxel-centre coordinates."""
    idx = np.nonzero(mask)
    pts = np.stack(idx, axis=1).astype(np.float64) * np.asarray(spacing.as_tuple())
    centered = pts - pts.mean(axis=0)
    return centered.T @ centered / len(pts)


def _eccentricity(mask: np.ndarray, spacing) -> float:
    lam_min, _, lam_max = eigvalsh3(coordinate_covariance(mask, spacing))
    if lam_max < ECC_DEGENERATE:
        return 0.0
    ratio = max(lam_min, 0.0) / lam_max
    return math.sqrt(min(1.0, max(0.0, 1.0 - ratio)))


def eccentricity(vol: LabelVolume, class_id: int) -> float:
    mask = _mask(vol, class_id)
    if not mask.any():
        raise EmptyOrganError(f"empty organ: class {class_id}")
    return _eccentricity(mask, vol.spacing)


def compute_features(
    vol: LabelVolume,
    sample_id: str,
    universe: Sequence[int] | None = None,
    body_classes: Iterable[int] | None = None,
) -> tuple[list[OrganFeatures], BodyStats]:
    """One OrganFeatures row per class in ``universe`` (default: classes present).

    Classes in the universe that do not occur get a row with zero counts and
    undefined shape values.
    """
    body = body_voxel_count(vol, body_classes)
    if body == 0:
        raise EmptyBodyError(f"empty body in sample {sample_id}")
    if universe is None:
        universe = [int(c) for c in np.unique(vol.voxels) if c != 0]

    rows = []
    for class_id in sorted(int(c) for c in universe):
        mask = _mask(vol, class_id)
        n = int(np.count_nonzero(mask))
        if n == 0:
            rows.append(OrganFeatures(sample_id, class_id, 0, 0.0, 0.0, None, None))
            continue
        area = _surface_area_of_mask(mask, vol.spacing)
        rows.append(
            OrganFeatures(
                sample_id=sample_id,
                class_id=class_id,
                voxel_count=n,
                normalized_volume=n / body,
                surface_area=area,
                sphericity=_sphericity(n, area, vol.spacing.voxel_volume),
                eccentricity=_eccentricity(mask, vol.spacing),
            )
        )
    return rows, BodyStats(sample_id, body)
