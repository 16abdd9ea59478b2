"""Synthetic labeled body phantoms built from ellipsoids, plus label corruptions.

All randomness comes from numpy's PCG64.  Sample ``i`` of a cohort draws
from ``SeedSequence([seed, i])``, so serial and parallel generation agree.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, ScalarVolume, Spacing, write_nifti

BODY_CLASS = 1
CORRUPTION_KINDS = ("erode", "elongate", "drop", "spill")
JITTER = 0.05


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Organ:
    class_id: int
    center: tuple[float, float, float]  # mm
    semi_axes: tuple[float, float, float]  # mm
    intensity: float = 1.0
    noise: float = 0.1


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: Spacing
    body_center: tuple[float, float, float]
    body_semi_axes: tuple[float, float, float]
    organs: tuple[Organ, ...] = ()
    body_intensity: float = 0.4
    body_noise: float = 0.1
    background_intensity: float = 0.0
    seed: int = 0

    @property
    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.organs]

    @property
    def num_classes(self) -> int:
        return max([BODY_CLASS] + self.class_ids) + 1


@dataclass(frozen=True)
class Corruption:
    kind: str
    target: int
    fraction: float = 0.5  # erode
    length: int = 10  # elongate
    steps: int = 1  # spill
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "erode" and not (0.0 < self.fraction < 1.0):
            raise ValueError("erode fraction must be in (0, 1)")
        if self.kind == "elongate" and self.length < 1:
            raise ValueError("elongate length must be >= 1")
        if self.kind == "spill" and self.steps < 1:
            raise ValueError("spill steps must be >= 1")


def abdomen_template(seed: int = 0) -> PhantomSpec:
    """Four-organ torso phantom on a 64x56x40 grid of 1.5x1.5x2 mm voxels."""
    return PhantomSpec(
        dims=(64, 56, 40),
        spacing=Spacing(1.5, 1.5, 2.0),
        body_center=(48.0, 42.0, 40.0),
        body_semi_axes=(45.0, 39.0, 38.0),
        organs=(
            Organ(2, (62.0, 56.0, 40.0), (17.0, 13.0, 11.0), intensity=0.9),  # liver
            Organ(3, (22.0, 28.0, 40.0), (8.0, 8.0, 8.0), intensity=1.6),  # spleen
            Organ(4, (40.0, 66.0, 32.0), (9.0, 6.0, 7.0), intensity=1.2),  # kidney
            Organ(5, (62.0, 24.0, 30.0), (9.0, 6.0, 7.0), intensity=1.3),  # kidney
        ),
        seed=seed,
    )


def mini_template(seed: int = 0) -> PhantomSpec:
    """Small 20^3 phantom (2 mm voxels) with two contrasted organs, for training."""
    return PhantomSpec(
        dims=(20, 20, 20),
        spacing=Spacing(2.0, 2.0, 2.0),
        body_center=(19.0, 19.0, 19.0),
        body_semi_axes=(17.0, 15.0, 16.0),
        organs=(
            Organ(2, (13.0, 19.0, 19.0), (7.0, 8.0, 8.0), intensity=1.0, noise=0.25),
            Organ(3, (27.0, 17.0, 19.0), (5.0, 5.5, 6.0), intensity=2.0, noise=0.25),
        ),
        body_intensity=0.5,
        body_noise=0.25,
        background_intensity=0.0,
        seed=seed,
    )


TEMPLATES = {"abdomen": abdomen_template, "mini": mini_template}


def _centers_mm(spec: PhantomSpec):
    sx, sy, sz = spec.spacing.as_tuple()
    nx, ny, nz = spec.dims
    return (
        (np.arange(nx) * sx)[:, None, None],
        (np.arange(ny) * sy)[None, :, None],
        (np.arange(nz) * sz)[None, None, :],
    )


def _ellipsoid_mask(grid, center, semi_axes) -> np.ndarray:
    x, y, z = grid
    (cx, cy, cz), (a, b, c) = center, semi_axes
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0


def generate(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Voxelize body and organs (voxel-centre test; later organs win overlaps).

    Intensity is the structure mean plus Gaussian noise of the structure's
    sigma; background uses ``background_intensity`` with the body sigma.
    """
    grid = _centers_mm(spec)
    body = _ellipsoid_mask(grid, spec.body_center, spec.body_semi_axes)
    labels = np.where(body, BODY_CLASS, 0).astype(np.int64)
    mean = np.where(body, spec.body_intensity, spec.background_intensity)
    sigma = np.full(spec.dims, spec.body_noise)
    for organ in spec.organs:
        if organ.class_id <= BODY_CLASS:
            raise PhantomError(f"organ class IDs must exceed the body class {BODY_CLASS}")
        m = _ellipsoid_mask(grid, organ.center, organ.semi_axes)
        if (m & ~body).any():
            raise PhantomError(f"organ {organ.class_id} extends outside the body")
        labels[m] = organ.class_id
        mean = np.where(m, organ.intensity, mean)
        sigma = np.where(m, organ.noise, sigma)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    intensity = mean + sigma * rng.standard_normal(spec.dims)
    return ScalarVolume(intensity.astype(np.float32), spec.spacing), LabelVolume(labels, spec.spacing)


def corrupt(labels: LabelVolume, corruption: Corruption, body_class: int = BODY_CLASS) -> LabelVolume:
    """Apply one label corruption to ``corruption.target``.

    erode: relabel the given fraction of the organ to body, outermost first
      (Euclidean distance to the nearest non-organ voxel centre, ties by flat
      x-fastest index).
    elongate: append a 1-voxel rod of ``length`` along +x from the organ's
      last voxel on the row through its centroid (clipped at the grid edge;
      overwrites whatever it crosses).
    drop: relabel the whole organ to body.
    spill: grow the organ into face-adjacent body voxels ``steps`` times.
    """
    vox = labels.voxels.copy()
    mask = vox == corruption.target
    if not mask.any():
        raise PhantomError(f"corruption target class {corruption.target} is absent")
    kind = corruption.kind

    if kind == "erode":
        n = int(mask.sum())
        n_remove = int(round(corruption.fraction * n))
        padded = np.pad(mask, 1, constant_values=False)
        dist = ndimage.distance_transform_edt(padded, sampling=labels.spacing.as_tuple())[1:-1, 1:-1, 1:-1]
        flat_idx = np.flatnonzero(mask.ravel(order="F"))
        d = dist.ravel(order="F")[flat_idx]
        order = np.lexsort((flat_idx, d))
        remove = flat_idx[order[:n_remove]]
        flat = vox.ravel(order="F")
        flat[remove] = body_class
        vox = flat.reshape(vox.shape, order="F")
    elif kind == "elongate":
        idx = np.argwhere(mask)
        cy, cz = (int(round(v)) for v in idx[:, 1:].mean(axis=0))
        row = np.flatnonzero(mask[:, cy, cz])
        if row.size:
            x_end = int(row.max())
        else:
            x_end = int(idx[:, 0].max())
        stop = min(vox.shape[0], x_end + 1 + corruption.length)
        vox[x_end + 1:stop, cy, cz] = corruption.target
    elif kind == "drop":
        vox[mask] = body_class
    elif kind == "spill":
        struct = ndimage.generate_binary_structure(3, 1)
        grown = mask
        for _ in range(corruption.steps):
            grown = grown | (ndimage.binary_dilation(grown, structure=struct) & (vox == body_class))
        vox[grown] = corruption.target
    return LabelVolume(vox, labels.spacing)


def jitter_spec(template: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """Scale each organ semi-axis by U[0.95, 1.05] and shift each centre
    coordinate by up to 5% of the matching semi-axis."""
    organs = []
    for o in template.organs:
        axes = np.asarray(o.semi_axes)
        scale = rng.uniform(1.0 - JITTER, 1.0 + JITTER, size=3)
        shift = rng.uniform(-JITTER, JITTER, size=3) * axes
        organs.append(replace(
            o,
            center=tuple(float(v) for v in np.asarray(o.center) + shift),
            semi_axes=tuple(float(v) for v in axes * scale),
        ))
    return replace(template, organs=tuple(organs))


@dataclass
class CohortSample:
    id: str
    intensity: ScalarVolume
    labels: LabelVolume
    corruption: Corruption | None = None

    @property
    def corrupted(self) -> bool:
        return self.corruption is not None


def sample_id(index: int) -> str:
    return f"sample_{index:04d}"


def cohort_sample(template: PhantomSpec, index: int, seed: int, corruption: Corruption | None = None) -> CohortSample:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    spec = jitter_spec(template, rng)
    spec = replace(spec, seed=int(rng.integers(0, 2**63 - 1)))
    intensity, labels = generate(spec)
    if corruption is not None:
        labels = corrupt(labels, corruption)
    return CohortSample(sample_id(index), intensity, labels, corruption)


def cohort(
    template: PhantomSpec,
    n: int,
    corrupt_indices: Sequence[int] = (),
    corruptions: Sequence[Corruption] = (),
    seed: int = 0,
) -> list[CohortSample]:
    """``n`` jittered phantoms; ``corrupt_indices[j]`` receives ``corruptions[j]``."""
    if len(corrupt_indices) != len(corruptions):
        raise ValueError("corrupt_indices and corruptions must have equal length")
    if len(set(corrupt_indices)) != len(corrupt_indices):
        raise ValueError("duplicate corrupt index")
    plan = {}
    for i, c in zip(corrupt_indices, corruptions):
        if not (0 <= i < n):
            raise ValueError(f"corrupt index {i} outside [0, {n})")
        plan[int(i)] = c
    return [cohort_sample(template, i, seed, plan.get(i)) for i in range(n)]


def default_corruptions(template: PhantomSpec, count: int) -> list[Corruption]:
    """Cycle erode(0.8) / elongate / drop over the template's organs."""
    ids = template.class_ids
    out = []
    for j in range(count):
        kind = ("erode", "elongate", "drop")[j % 3]
        if kind == "erode":
            out.append(Corruption("erode", ids[0], fraction=0.8))
        elif kind == "elongate":
            target = ids[1 % len(ids)]
            out.append(Corruption("elongate", target, length=25))
        else:
            out.append(Corruption("drop", ids[2 % len(ids)]))
    return out


def pick_corrupt_indices(n: int, count: int, seed: int) -> list[int]:
    if count > n:
        raise ValueError(f"cannot corrupt {count} of {n} samples")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, n, count, 7])))
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def write_cohort(samples: Sequence[CohortSample], out_dir, seed: int, extra: dict | None = None) -> dict:
    """Write each sample as two NIfTI files and a ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        ipath = f"{s.id}_intensity.nii"
        lpath = f"{s.id}_labels.nii"
        write_nifti(s.intensity, out / ipath)
        write_nifti(s.labels, out / lpath)
        entries.append({
            "id": s.id,
            "intensity_path": ipath,
            "label_path": lpath,
            "corrupted": s.corrupted,
            "corruption": s.corruption.kind if s.corruption else None,
        })
    manifest = {"samples": entries, "seed": seed}
    if extra:
        manifest.update(extra)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if "samples" not in manifest:
        raise ValueError(f"{path} is not a dataset manifest")
    manifest["_root"] = str(Path(path).resolve().parent)
    return manifest


def resolve(manifest: dict, rel: str) -> str:
    return os.path.join(manifest.get("_root", "."), rel)
