"""bobqc command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cohort_filter as cf
from . import etta
from . import phantom as ph
from . import seg_metrics as sm
from . import shape_features as sf
from . import tinyseg as ts
from .report import histogram_svg
from .volume_io import LabelVolume, NiftiError, ScalarVolume, read_nifti, write_nifti

log = logging.getLogger("bobqc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("BOBQC_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BOBQC_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigError("BOBQC_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _pmap(fn, items):
    items = list(items)
    workers = min(_threads(), max(len(items), 1))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _config(factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_json(out: Path, args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(out / "run.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_manifest(path) -> dict:
    try:
        manifest = ph.read_manifest(path)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if "root" in manifest:
        manifest["_root"] = manifest["root"]
    return manifest


def _clean_manifest(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if not k.startswith("_")}


def _read_labels(manifest, entry) -> LabelVolume:
    vol = read_nifti(ph.resolve(manifest, entry["label_path"]), "label")
    removed = entry.get("removed_classes")
    if removed:
        vox = np.where(np.isin(vol.voxels, removed), 0, vol.voxels)
        vol = LabelVolume(vox, vol.spacing)
    return vol


def _read_intensity(manifest, entry) -> ScalarVolume:
    return read_nifti(ph.resolve(manifest, entry["intensity_path"]), "scalar")


# --- subcommands --------------------------------------------------------------

def cmd_phantom(args) -> int:
    template = ph.TEMPLATES[args.template](0)
    if args.corrupt < 0 or args.corrupt > args.n or args.n < 1:
        raise ConfigError("need n >= 1 and 0 <= corrupt <= n")
    idx = ph.pick_corrupt_indices(args.n, args.corrupt, args.seed)
    corruptions = ph.default_corruptions(template, args.corrupt)
    samples = ph.cohort(template, args.n, idx, corruptions, args.seed)
    if args.shift:
        samples = [
            ph.CohortSample(s.id, ScalarVolume(s.intensity.voxels + np.float32(args.shift), s.intensity.spacing),
                            s.labels, s.corruption)
            for s in samples
        ]
    out = _outdir(args.out)
    ph.write_cohort(samples, out, args.seed, extra={
        "template": args.template,
        "class_ids": template.class_ids,
        "num_classes": template.num_classes,
        "intensity_shift": args.shift,
    })
    _write_run_json(out, args)
    print(f"wrote {len(samples)} samples ({args.corrupt} corrupted) to {out}")
    return EXIT_OK


def _parse_ids(text):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def cmd_features(args) -> int:
    manifest = _load_manifest(args.manifest)
    universe = _parse_ids(args.classes) or manifest.get("class_ids")

    def one(entry):
        vol = _read_labels(manifest, entry)
        rows, _ = sf.compute_features(vol, entry["id"], universe)
        return rows

    rows = [r for chunk in _pmap(one, manifest["samples"]) for r in chunk]
    out = _outdir(args.out)
    cf.write_feature_csv(rows, out / "features.csv")
    _write_run_json(out, args)
    print(f"wrote {len(rows)} feature rows to {out / 'features.csv'}")
    return EXIT_OK


def cmd_filter(args) -> int:
    features = tuple(f.strip() for f in args.use_features.split(","))
    cfg = _config(cf.SolfConfig, epsilon=args.epsilon, features=features, k=args.k,
                  scope=args.scope, missing_is_inaccurate=args.missing_is_inaccurate)
    if args.iqr_factor < 0:
        raise ConfigError("iqr factor must be >= 0")
    try:
        rows = cf.read_feature_csv(args.features)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read features {args.features}: {exc}") from exc
    if args.method == "solf":
        bounds = cf.solf_bounds(rows, cfg)
        verdicts = cf.solf_verdicts(rows, bounds, cfg)
        doc_features, doc_k = cfg.features, cfg.k
    else:
        bounds = cf.iqr_bounds(rows, args.iqr_factor)
        verdicts = cf.iqr_verdicts(rows, args.iqr_factor, cfg.missing_is_inaccurate)
        doc_features, doc_k = ("volume",), 1

    out = _outdir(args.out)
    cf.write_verdict_csv(verdicts, out / "verdicts.csv")
    cf.write_bounds_json(bounds, out / "bounds.json", args.epsilon, doc_features, doc_k)
    if args.manifest:
        manifest = _load_manifest(args.manifest)
        try:
            filtered = cf.apply_filter(manifest, verdicts, cfg.scope)
        except cf.ManifestMismatchError as exc:
            raise DataError(str(exc)) from exc
        filtered["root"] = manifest["_root"]
        ph.write_manifest(_clean_manifest(filtered), out / "filtered_manifest.json")
    _write_run_json(out, args)

    inaccurate = cf.flagged_samples(verdicts, include_missing=False)
    missing = {v.sample_id for v in verdicts if v.missing}
    print(f"{len(verdicts)} verdicts; {sum(v.inaccurate for v in verdicts)} inaccurate organ labels "
          f"in {len(inaccurate)} samples; {len(missing)} samples with missing organs")
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred_m = _load_manifest(args.pred)
    gt_m = _load_manifest(args.gt)
    preds = {s["id"]: s for s in pred_m["samples"]}
    universe = _parse_ids(args.classes)
    if universe is None and "num_classes" in gt_m:
        universe = list(range(1, gt_m["num_classes"]))

    def one(entry):
        if entry["id"] not in preds:
            raise DataError(f"no prediction for sample {entry['id']}")
        pred = _read_labels(pred_m, preds[entry["id"]])
        gt = _read_labels(gt_m, entry)
        classes = universe
        if classes is None:
            classes = sorted((set(np.unique(pred.voxels)) | set(np.unique(gt.voxels))) - {0})
        try:
            return entry["id"], sm.evaluate(pred, gt, classes)
        except sm.DimsMismatchError as exc:
            raise DataError(f"{preds[entry['id']]['label_path']} vs {entry['label_path']}: {exc}") from exc

    results = _pmap(one, gt_m["samples"])
    cases = {sid: m.to_json() for sid, m in results}
    dice_means = [m.mean_dice for _, m in results]
    hd_means = [m.mean_hausdorff for _, m in results if m.mean_hausdorff is not None]
    doc = {
        "cases": cases,
        "mean_dice": float(np.mean(dice_means)) if dice_means else None,
        "mean_hausdorff_mm": float(np.mean(hd_means)) if hd_means else None,
        "num_cases": len(results),
    }
    out = _outdir(args.out)
    with open(out / "metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_json(out, args)
    print(f"mean dice {doc['mean_dice']:.4f} over {len(results)} cases")
    return EXIT_OK


def _training_set(manifest):
    data = []
    for entry in manifest["samples"]:
        x = _read_intensity(manifest, entry).voxels.astype(np.float64)
        y = _read_labels(manifest, entry).voxels
        data.append((x, y))
    return data


def cmd_train(args) -> int:
    cfg = _config(ts.TrainConfig, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    manifest = _load_manifest(args.manifest)
    data = _training_set(manifest)
    num_classes = manifest.get("num_classes") or int(max(d[1].max() for d in data)) + 1
    shapes = {d[0].shape for d in data}
    if len(shapes) != 1:
        raise DataError(f"training volumes differ in shape: {sorted(shapes)}")
    params = ts.init(args.seed, num_classes)
    params, curve = ts.train(params, data, cfg)
    out = _outdir(args.out)
    ts.save_checkpoint(params, out / "checkpoint.tseg")
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(curve):
            w.writerow([i, repr(loss)])
    _write_run_json(out, args)
    print(f"trained {cfg.epochs} epochs: loss {curve[0]:.4f} -> {curve[-1]:.4f}" if curve else "no epochs run")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return ts.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _write_predictions(out: Path, manifest, entries, checkpoint) -> None:
    doc = {"samples": entries, "checkpoint": str(checkpoint), "source_seed": manifest.get("seed")}
    if "num_classes" in manifest:
        doc["num_classes"] = manifest["num_classes"]
    ph.write_manifest(doc, out / "predictions.json")


def cmd_infer(args) -> int:
    params = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _outdir(args.out)
    entries = []
    for entry in manifest["samples"]:
        vol = _read_intensity(manifest, entry)
        _, labels = etta.infer(params, vol.voxels)
        rel = f"{entry['id']}_pred.nii"
        write_nifti(LabelVolume(labels, vol.spacing), out / rel)
        entries.append({"id": entry["id"], "label_path": rel})
    _write_predictions(out, manifest, entries, args.checkpoint)
    _write_run_json(out, args)
    print(f"wrote {len(entries)} predictions to {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(etta.AdaptConfig, mode=args.mode, steps=args.steps, lr=args.lr, stats_epochs=args.stats_epochs)
    base = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = _outdir(args.out)
    entries = []
    current = base
    for entry in manifest["samples"]:
        vol = _read_intensity(manifest, entry)
        adapted, trace = etta.adapt(current if args.cumulative else base, vol.voxels, cfg)
        if args.cumulative:
            current = adapted
        probs, labels = etta.infer(adapted, vol.voxels)
        sdir = _outdir(out / entry["id"])
        with open(sdir / "entropy_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "entropy"])
            for i, h in enumerate(trace):
                w.writerow([i, repr(h)])
        write_nifti(ScalarVolume(etta.entropy_map(probs).astype(np.float32), vol.spacing),
                    sdir / "entropy_map.nii")
        write_nifti(LabelVolume(labels, vol.spacing), sdir / "pred_labels.nii")
        ts.save_checkpoint(adapted, sdir / "adapted.tseg")
        entries.append({"id": entry["id"], "label_path": f"{entry['id']}/pred_labels.nii"})
    _write_predictions(out, manifest, entries, args.checkpoint)
    _write_run_json(out, args)
    print(f"adapted {len(entries)} samples ({cfg.mode}, {cfg.steps} steps, lr {cfg.lr})")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.bins < 1:
        raise ConfigError("bins must be >= 1")
    try:
        rows = cf.read_feature_csv(args.features)
        verdicts = cf.read_verdict_csv(args.verdicts)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    hists = cf.distribution_report(rows, verdicts, args.bins, args.scope)
    out = _outdir(args.out)
    cf.write_histogram_csv(hists, out / "histograms.csv")
    for h in hists:
        (out / f"class_{h.class_id:03d}.svg").write_text(histogram_svg(h))
    _write_run_json(out, args)
    print(f"wrote {len(hists)} class histograms to {out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bobqc", description="Organ label QC, metrics and test-time adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--corrupt", type=int, default=0, help="number of corrupted samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template", choices=sorted(ph.TEMPLATES), default="abdomen")
    p.add_argument("--shift", type=float, default=0.0, help="global intensity offset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("features", help="per-organ shape features for a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", help="comma-separated class universe (default: manifest class_ids)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("filter", help="flag inaccurate organ labels")
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--method", choices=("solf", "iqr"), default="solf")
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--use-features", default="volume,sphericity,eccentricity")
    p.add_argument("--scope", choices=cf.SCOPES, default="per-organ")
    p.add_argument("--iqr-factor", type=float, default=1.5)
    p.add_argument("--missing-is-inaccurate", action="store_true")
    p.add_argument("--manifest", help="dataset manifest to filter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("metrics", help="Dice and Hausdorff of predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction manifest")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--classes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="train TinySeg on a phantom manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="eval-mode predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("adapt", help="entropy test-time adaptation, then predict")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("stats", "entropy", "both"), default="both")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stats-epochs", type=int, default=1)
    p.add_argument("--cumulative", action="store_true", help="carry adapted parameters across samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="before/after normalized-volume histograms")
    p.add_argument("--features", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--scope", choices=cf.SCOPES, default="per-organ")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bobqc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NiftiError, sf.EmptyBodyError, sf.EmptyOrganError, ph.PhantomError,
            FileNotFoundError) as exc:
        print(f"bobqc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ts.NumericalError as exc:
        print(f"bobqc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
