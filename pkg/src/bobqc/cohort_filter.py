"""Cohort-level organ label filtering: percentile bounds (SOLF) and IQR fences."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .shape_features import OrganFeatures

FEATURES = ("volume", "sphericity", "eccentricity")
FEATURE_ATTR = {
    "volume": "normalized_volume",
    "sphericity": "sphericity",
    "eccentricity": "eccentricity",
}
SCOPES = ("per-organ", "whole-sample")

FEATURE_CSV_HEADER = [
    "sample_id", "class_id", "present", "voxel_count", "normalized_volume",
    "surface_area_mm2", "sphericity", "eccentricity",
]
VERDICT_CSV_HEADER = [
    "sample_id", "class_id", "oor_volume", "oor_sphericity", "oor_eccentricity",
    "missing", "inaccurate",
]
HISTOGRAM_CSV_HEADER = ["class_id", "bin_lo", "bin_hi", "count_all", "count_kept"]


class ManifestMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SolfConfig:
    epsilon: float = 2.0
    features: tuple[str, ...] = FEATURES
    k: int = 2
    scope: str = "per-organ"
    missing_is_inaccurate: bool = False

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 100.0):
            raise ValueError(f"epsilon must be in [0, 100), got {self.epsilon}")
        feats = tuple(self.features)
        unknown = set(feats) - set(FEATURES)
        if unknown or not feats or len(set(feats)) != len(feats):
            raise ValueError(f"features must be a non-empty subset of {FEATURES}, got {feats}")
        object.__setattr__(self, "features", tuple(f for f in FEATURES if f in feats))
        if not (1 <= self.k <= len(feats)):
            raise ValueError(f"k must be in [1, {len(feats)}], got {self.k}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")


@dataclass(frozen=True)
class FeatureBounds:
    class_id: int
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    usable: bool = True


@dataclass(frozen=True)
class FilterVerdict:
    sample_id: str
    class_id: int
    out_of_range: dict[str, bool]
    missing: bool
    inaccurate: bool


def percentile(values: Iterable[float], p: float) -> float:
    """Linear-interpolation percentile on rank ``p/100 * (N-1)``."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("percentile of empty input")
    if not (0.0 <= p <= 100.0):
        raise ValueError(f"p must be in [0, 100], got {p}")
    if any(not math.isfinite(x) for x in xs):
        raise ValueError("percentile input must be finite")
    r = p / 100.0 * (len(xs) - 1)
    lo = math.floor(r)
    hi = math.ceil(r)
    frac = r - lo
    if frac == 0.0:
        return xs[lo]
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def _feature_value(row: OrganFeatures, feature: str) -> float:
    return getattr(row, FEATURE_ATTR[feature])


def _rows_by_class(rows: Iterable[OrganFeatures]) -> dict[int, list[OrganFeatures]]:
    by_class: dict[int, list[OrganFeatures]] = defaultdict(list)
    seen = set()
    for row in rows:
        key = (row.sample_id, row.class_id)
        if key in seen:
            raise ValueError(f"duplicate row for sample {row.sample_id!r} class {row.class_id}")
        seen.add(key)
        by_class[row.class_id].append(row)
    return dict(sorted(by_class.items()))


def solf_bounds(rows: Sequence[OrganFeatures], cfg: SolfConfig) -> dict[int, FeatureBounds]:
    """Per class and feature: (P_{eps/2}, P_{100-eps/2}) over present rows."""
    out = {}
    for class_id, class_rows in _rows_by_class(rows).items():
        present = [r for r in class_rows if r.present]
        if len(present) < 2:
            out[class_id] = FeatureBounds(class_id, {}, usable=False)
            continue
        bounds = {}
        for feat in cfg.features:
            vals = [_feature_value(r, feat) for r in present]
            bounds[feat] = (
                percentile(vals, cfg.epsilon / 2.0),
                percentile(vals, 100.0 - cfg.epsilon / 2.0),
            )
        out[class_id] = FeatureBounds(class_id, bounds)
    return out


def iqr_bounds(rows: Sequence[OrganFeatures], factor: float = 1.5) -> dict[int, FeatureBounds]:
    """Tukey fences on normalized volume: [Q1 - f*IQR, Q3 + f*IQR]."""
    out = {}
    for class_id, class_rows in _rows_by_class(rows).items():
        vals = [r.normalized_volume for r in class_rows if r.present]
        if len(vals) < 2:
            out[class_id] = FeatureBounds(class_id, {}, usable=False)
            continue
        q1 = percentile(vals, 25.0)
        q3 = percentile(vals, 75.0)
        iqr = q3 - q1
        out[class_id] = FeatureBounds(class_id, {"volume": (q1 - factor * iqr, q3 + factor * iqr)})
    return out


def _verdicts(rows, bounds, k, missing_is_inaccurate) -> list[FilterVerdict]:
    verdicts = []
    for row in rows:
        fb = bounds.get(row.class_id)
        if not row.present:
            verdicts.append(FilterVerdict(
                row.sample_id, row.class_id, {f: False for f in FEATURES},
                missing=True, inaccurate=missing_is_inaccurate,
            ))
            continue
        oor = {f: False for f in FEATURES}
        if fb is not None and fb.usable:
            for feat, (lo, hi) in fb.bounds.items():
                v = _feature_value(row, feat)
                oor[feat] = v < lo or v > hi
        verdicts.append(FilterVerdict(
            row.sample_id, row.class_id, oor,
            missing=False, inaccurate=sum(oor.values()) >= k,
        ))
    verdicts.sort(key=lambda v: (v.sample_id, v.class_id))
    return verdicts


def solf_verdicts(rows, bounds: dict[int, FeatureBounds], cfg: SolfConfig) -> list[FilterVerdict]:
    """Flag a present row inaccurate when >= k enabled features leave their bounds."""
    return _verdicts(rows, bounds, cfg.k, cfg.missing_is_inaccurate)


def iqr_verdicts(rows, factor: float = 1.5, missing_is_inaccurate: bool = False) -> list[FilterVerdict]:
    return _verdicts(rows, iqr_bounds(rows, factor), 1, missing_is_inaccurate)


def flagged_samples(verdicts: Iterable[FilterVerdict], include_missing: bool = True) -> set[str]:
    """Samples with at least one inaccurate (or, optionally, missing) organ."""
    return {
        v.sample_id for v in verdicts
        if v.inaccurate or (include_missing and v.missing)
    }


def apply_filter(manifest: dict, verdicts: Sequence[FilterVerdict], scope: str = "per-organ") -> dict:
    """Return a filtered copy of a dataset manifest.

    per-organ: each sample entry gains ``removed_classes`` (labels to reset to
    background).  whole-sample: samples with any inaccurate organ are dropped.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    ids = [s["id"] for s in manifest["samples"]]
    unknown = {v.sample_id for v in verdicts} - set(ids)
    if unknown:
        raise ManifestMismatchError(f"verdicts for samples not in manifest: {sorted(unknown)}")

    bad: dict[str, list[int]] = defaultdict(list)
    for v in verdicts:
        if v.inaccurate:
            bad[v.sample_id].append(v.class_id)

    out = {k: v for k, v in manifest.items() if k != "samples"}
    samples = []
    for s in manifest["samples"]:
        if scope == "whole-sample":
            if s["id"] not in bad:
                samples.append(dict(s))
        else:
            entry = dict(s)
            removed = sorted(set(entry.get("removed_classes", [])) | set(bad.get(s["id"], [])))
            if removed:
                entry["removed_classes"] = removed
            samples.append(entry)
    out["samples"] = samples
    return out


def filter_rows(rows, verdicts, scope: str = "per-organ") -> list[OrganFeatures]:
    """Rows that survive filtration under ``scope``."""
    bad = {(v.sample_id, v.class_id) for v in verdicts if v.inaccurate}
    if scope == "whole-sample":
        bad_samples = {s for s, _ in bad}
        return [r for r in rows if r.sample_id not in bad_samples]
    return [r for r in rows if (r.sample_id, r.class_id) not in bad]


@dataclass(frozen=True)
class ClassHistogram:
    class_id: int
    edges: np.ndarray
    count_all: np.ndarray
    count_kept: np.ndarray


def distribution_report(rows, verdicts, bins: int = 50, scope: str = "per-organ") -> list[ClassHistogram]:
    """Normalized-volume histograms per class before/after filtration.

    Both histograms share edges spanning the unfiltered [min, max].
    """
    kept = {(r.sample_id, r.class_id) for r in filter_rows(rows, verdicts, scope)}
    out = []
    for class_id, class_rows in _rows_by_class(rows).items():
        present = [r for r in class_rows if r.present]
        if not present:
            continue
        all_vals = np.array([r.normalized_volume for r in present])
        kept_vals = np.array([r.normalized_volume for r in present if (r.sample_id, r.class_id) in kept])
        lo, hi = float(all_vals.min()), float(all_vals.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        count_all, edges = np.histogram(all_vals, bins=bins, range=(lo, hi))
        count_kept, _ = np.histogram(kept_vals, bins=edges)
        out.append(ClassHistogram(class_id, edges, count_all, count_kept))
    return out


# --- file formats -----------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else f"{x:.9g}"


def write_feature_csv(rows: Iterable[OrganFeatures], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_CSV_HEADER)
        for r in rows:
            w.writerow([
                r.sample_id, r.class_id, int(r.present), r.voxel_count,
                _fmt(r.normalized_volume), _fmt(r.surface_area),
                _fmt(r.sphericity), _fmt(r.eccentricity),
            ])


def read_feature_csv(path) -> list[OrganFeatures]:
    def opt(s):
        return None if s == "" else float(s)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FEATURE_CSV_HEADER:
            raise ValueError(f"unexpected feature CSV header in {path}: {reader.fieldnames}")
        return [
            OrganFeatures(
                sample_id=rec["sample_id"],
                class_id=int(rec["class_id"]),
                voxel_count=int(rec["voxel_count"]),
                normalized_volume=float(rec["normalized_volume"]),
                surface_area=float(rec["surface_area_mm2"]),
                sphericity=opt(rec["sphericity"]),
                eccentricity=opt(rec["eccentricity"]),
            )
            for rec in reader
        ]


def write_verdict_csv(verdicts: Iterable[FilterVerdict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_CSV_HEADER)
        for v in verdicts:
            w.writerow([
                v.sample_id, v.class_id,
                int(v.out_of_range["volume"]), int(v.out_of_range["sphericity"]),
                int(v.out_of_range["eccentricity"]), int(v.missing), int(v.inaccurate),
            ])


def read_verdict_csv(path) -> list[FilterVerdict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != VERDICT_CSV_HEADER:
            raise ValueError(f"unexpected verdict CSV header in {path}: {reader.fieldnames}")
        return [
            FilterVerdict(
                sample_id=rec["sample_id"],
                class_id=int(rec["class_id"]),
                out_of_range={f: rec[f"oor_{f}"] == "1" for f in FEATURES},
                missing=rec["missing"] == "1",
                inaccurate=rec["inaccurate"] == "1",
            )
            for rec in reader
        ]


def bounds_to_json(bounds: dict[int, FeatureBounds], epsilon, features, k) -> dict:
    doc: dict = {}
    for class_id, fb in sorted(bounds.items()):
        if fb.usable:
            doc[str(class_id)] = {f: {"lo": lo, "hi": hi} for f, (lo, hi) in fb.bounds.items()}
    doc["unusable_classes"] = sorted(c for c, fb in bounds.items() if not fb.usable)
    doc["epsilon"] = epsilon
    doc["features"] = list(features)
    doc["k"] = k
    return doc


def write_bounds_json(bounds, path, epsilon, features, k) -> None:
    with open(path, "w") as fh:
        json.dump(bounds_to_json(bounds, epsilon, features, k), fh, indent=2)
        fh.write("\n")


def write_histogram_csv(hists: Iterable[ClassHistogram], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTOGRAM_CSV_HEADER)
        for h in hists:
            for i in range(len(h.count_all)):
                w.writerow([h.class_id, _fmt(h.edges[i]), _fmt(h.edges[i + 1]),
                            int(h.count_all[i]), int(h.count_kept[i])])
