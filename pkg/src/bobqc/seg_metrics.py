"""Dice overlap and boundary Hausdorff distance between label volumes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .volume_io import LabelVolume


class DimsMismatchError(ValueError):
    pass


@dataclass
class SegMetrics:
    dice: dict[int, float] = field(default_factory=dict)
    hausdorff: dict[int, float | None] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values()))) if self.dice else float("nan")

    @property
    def mean_hausdorff(self) -> float | None:
        vals = [h for h in self.hausdorff.values() if h is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def skipped_classes(self) -> list[int]:
        return sorted(c for c, h in self.hausdorff.items() if h is None)

    def to_json(self) -> dict:
        return {
            "per_class": {
                str(c): {"dice": self.dice[c], "hausdorff_mm": self.hausdorff[c]}
                for c in sorted(self.dice)
            },
            "mean_dice": self.mean_dice,
            "mean_hausdorff_mm": self.mean_hausdorff,
            "skipped_classes": self.skipped_classes,
        }


def _check_pair(pred: LabelVolume, gt: LabelVolume) -> None:
    if pred.dims != gt.dims:
        raise DimsMismatchError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if pred.spacing != gt.spacing:
        raise DimsMismatchError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")


def dice_masks(p: np.ndarray, g: np.ndarray) -> float:
    sp = int(np.count_nonzero(p))
    sg = int(np.count_nonzero(g))
    if sp + sg == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / (sp + sg)


def dice(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when the class is absent from both."""
    _check_pair(pred, gt)
    return dice_masks(pred.voxels == class_id, gt.voxels == class_id)


def boundary_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Physical centres of mask voxels with a 6-neighbour outside the mask."""
    padded = np.pad(mask, 1, constant_values=False)
    core = padded[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    pts = np.argwhere(core & ~interior).astype(np.float64)
    return pts * np.asarray(spacing.as_tuple())


def hausdorff_masks(p: np.ndarray, g: np.ndarray, spacing) -> float | None:
    if not p.any() or not g.any():
        return None
    bp = boundary_points(p, spacing)
    bg = boundary_points(g, spacing)
    d_pg, _ = cKDTree(bg).query(bp, k=1)
    d_gp, _ = cKDTree(bp).query(bg, k=1)
    return float(max(d_pg.max(), d_gp.max()))


def hausdorff(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float | None:
    """Symmetric Hausdorff distance (mm) between class boundaries.

    Returns None when either mask is empty.
    """
    _check_pair(pred, gt)
    return hausdorff_masks(pred.voxels == class_id, gt.voxels == class_id, pred.spacing)


def evaluate(pred: LabelVolume, gt: LabelVolume, universe: Sequence[int]) -> SegMetrics:
    _check_pair(pred, gt)
    m = SegMetrics()
    for c in sorted(int(c) for c in universe):
        p = pred.voxels == c
        g = gt.voxels == c
        m.dice[c] = dice_masks(p, g)
        m.hausdorff[c] = hausdorff_masks(p, g, pred.spacing)
    return m
