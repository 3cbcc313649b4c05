"""Command-line surface for the pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Errors are also emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .config import config_to_dict, default_config, load_config
from .data import (CropConfig, augment_dataset, generate_synthetic, load_dataset,
                   load_manifest, preprocess_dataset, save_manifest)
from .errors import AtlasSegError, DataError, NumericalError, UsageError
from .formats import read_dvol, read_dvol_mask, read_obj, write_dvol, write_obj
from .metrics import (MetricsRecord, dice, hd95, read_records_csv, report,
                      write_records_csv)
from .training import optimize_field_direct, predict_field, run_trials
from .unet import load_checkpoint, save_checkpoint, store_from_checkpoint
from .volume import CROP_PROFILES, Volume
from .warp import (marching_cubes_surface, project_surface,
                   rasterize_projected_mask)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_key_epilog() -> str:
    doc = config_to_dict(default_config())
    keys = []

    def walk(node, prefix):
        for k, v in sorted(node.items()):
            dotted = f"{prefix}{k}"
            if isinstance(v, dict):
                walk(v, dotted + ".")
            else:
                keys.append(f"  {dotted} (default {json.dumps(v)})")

    walk(doc, "")
    return "config keys for --set KEY=VALUE:\n" + "\n".join(keys)


def _build_parser() -> _Parser:
    p = _Parser(prog="atlasseg", description=__doc__,
                epilog=_config_key_epilog(),
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key (dotted path)")

    sp = sub.add_parser("config", help="inspect configuration")
    sp.add_argument("--dump-defaults", action="store_true")
    common(sp)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seed", type=int, help="override synth seed")

    sp = sub.add_parser("preprocess", help="crop and normalize a dataset")
    common(sp)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--profile", choices=sorted(CROP_PROFILES),
                    help="crop preset overriding config crop dims/spacing")

    sp = sub.add_parser("train", help="run the seeded trial protocol")
    common(sp)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--workers", type=int, help="parallel trials")

    sp = sub.add_parser("segment", help="produce a field, surface, and mask for one volume")
    common(sp)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--direct", action="store_true",
                    help="optimize the field directly instead of using a checkpoint")
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--atlas", type=Path, required=True,
                    help="directory with image.dvol and mask.dvol")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--pred", type=Path, required=True,
                    help="directory of per-case segment outputs")
    sp.add_argument("--gt", type=Path, required=True,
                    help="directory of <case_id>.dvol ground-truth masks")
    sp.add_argument("--exclusion", type=Path,
                    help="directory of <case_id>.dvol exclusion masks")
    sp.add_argument("--out", type=Path, required=True, help="records CSV path")
    sp.add_argument("--method", default="model")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("ttest", help="paired t-test between two records files")
    sp.add_argument("--a", type=Path, required=True)
    sp.add_argument("--b", type=Path, required=True)
    sp.add_argument("--metric", choices=("dice", "hd95"), required=True)
    sp.add_argument("--out", type=Path, help="write result JSON here (default stdout)")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--op", help="check a single op")
    sp.add_argument("--all", action="store_true", help="check every op and loss")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("report", help="aggregate records into CSV + JSON summary")
    sp.add_argument("--records", type=Path, nargs="+", required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--compare", action="append", default=[], metavar="LEFT:RIGHT")
    return p


def _cmd_config(args) -> int:
    cfg = load_config(args.config, args.overrides) if (args.config or args.overrides) \
        else default_config()
    doc = config_to_dict(cfg)
    if args.dump_defaults:
        doc = config_to_dict(default_config())
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _cmd_synth(args) -> int:
    cfg = load_config(args.config, args.overrides)
    synth = cfg.synth
    if args.seed is not None:
        from dataclasses import replace
        synth = replace(synth, seed=args.seed)
    manifest = generate_synthetic(synth, args.out)
    print(f"wrote {len(manifest.cases)} cases to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = load_config(args.config, args.overrides)
    crop = cfg.crop
    if args.profile:
        preset = CROP_PROFILES[args.profile]
        crop = CropConfig(preset["dims"], preset["spacing"])
    manifest = load_manifest(args.manifest)
    out = preprocess_dataset(manifest, args.out, crop)
    print(f"preprocessed {len(out.cases)} cases onto {crop.dims} @ {crop.spacing} mm")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    tc = cfg.train
    manifest = load_manifest(args.manifest)
    if tc.augment:
        manifest = augment_dataset(manifest, tc.augment_k, tc.augment_amplitude, cfg.seed)
        save_manifest(manifest, manifest.root / "manifest_augmented.json")
    dataset = load_dataset(manifest, tc.t_lower_mm, tc.t_upper_mm)
    grid = dataset.atlas.image.dims
    if tc.unet.dims != grid:
        raise UsageError(
            f"train.unet.dims {tc.unet.dims} does not match the data grid {grid}; "
            f"set --set train.unet.dims='{list(grid)}'")

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers else cfg.workers
    outcome = run_trials(dataset, dataset.atlas, tc, out_dir=out_dir, workers=workers)

    for result in outcome.results:
        trial_dir = out_dir / f"trial_seed{result.seed}"
        trial_dir.mkdir(exist_ok=True)
        save_checkpoint(trial_dir / "checkpoint_best.ckpt", result.checkpoint)
        (trial_dir / "result.json").write_text(json.dumps({
            "seed": result.seed,
            "selected_epoch": result.selected_epoch,
            "checkpoint_id": result.checkpoint_id,
            "val_metrics": result.val_metrics,
            "epochs": result.epochs,
        }, indent=2, sort_keys=True) + "\n")

    write_records_csv(out_dir / "metrics_raw.csv", outcome.records)
    (out_dir / "summary.json").write_text(
        json.dumps(outcome.summary, indent=2, sort_keys=True) + "\n")
    done = outcome.summary["trials_completed"]
    print(f"completed {done}/{len(tc.seeds)} trials; summary in {out_dir/'summary.json'}")
    return 0


def _load_atlas_dir(path: Path):
    image = read_dvol(path / "image.dvol")
    mask = read_dvol_mask(path / "mask.dvol")
    return image, mask


def _cmd_segment(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.direct == (args.checkpoint is not None):
        raise UsageError("provide exactly one of --checkpoint or --direct")
    image = read_dvol(args.image)
    atlas_image, atlas_mask = _load_atlas_dir(args.atlas)
    if image.dims != atlas_image.dims:
        raise DataError(f"image grid {image.dims} does not match atlas {atlas_image.dims}")

    if args.direct:
        from .data import build_atlas_bundle
        tc = cfg.train  # the direct optimizer never touches the network config
        bundle = build_atlas_bundle(atlas_image, atlas_mask, tc.t_lower_mm, tc.t_upper_mm)
        field = optimize_field_direct(image, bundle, tc)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        if tuple(ckpt.config.dims) != image.dims:
            raise DataError(
                f"checkpoint dims {ckpt.config.dims} do not match image {image.dims}")
        store = store_from_checkpoint(ckpt)
        field = predict_field(store, ckpt.config, image)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for c, suffix in enumerate(("dx", "dy", "dz")):
        write_dvol(out / f"field_{suffix}.dvol", Volume(field.disp[c], field.spacing))
    mask = rasterize_projected_mask(atlas_mask, field)
    write_dvol(out / "mask.dvol", mask, dtype="u8")
    surface = project_surface(marching_cubes_surface(atlas_mask), field)
    write_obj(out / "surface.obj", surface)
    print(f"segmented {args.image.name}: {mask.foreground_count()} foreground voxels")
    return 0


def _cmd_eval(args) -> int:
    case_dirs = sorted(d for d in args.pred.iterdir() if d.is_dir())
    if not case_dirs:
        raise DataError(f"no per-case directories under {args.pred}")
    records = []
    for case_dir in case_dirs:
        cid = case_dir.name
        gt_path = args.gt / f"{cid}.dvol"
        if not gt_path.exists():
            raise DataError(f"missing ground truth {gt_path}")
        gt = read_dvol_mask(gt_path)
        exclusion = None
        if args.exclusion:
            epath = args.exclusion / f"{cid}.dvol"
            exclusion = read_dvol_mask(epath) if epath.exists() else None
        pred_mask = read_dvol_mask(case_dir / "mask.dvol")
        pred_surface = read_obj(case_dir / "surface.obj")
        gt_surface = marching_cubes_surface(gt)
        d = dice(pred_mask, gt, exclusion)
        h = hd95(pred_surface, gt_surface, exclusion,
                 sample_spacing_mm=0.5 * min(gt.spacing))
        records.append(MetricsRecord(cid, args.seed, args.method, d, h))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_records_csv(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _records_to_case_values(records, metric):
    from .metrics import summarize_records
    methods = sorted({r.method for r in records})
    merged = summarize_records(records, "+".join(methods))["per_case_median"]
    key = "hd95" if metric == "hd95" else "dice"
    return {cid: v[key] for cid, v in merged.items()}


def _cmd_ttest(args) -> int:
    from .metrics import paired_t_test, glyph, METRIC_HIGHER_IS_BETTER
    rec_a = read_records_csv(args.a)
    rec_b = read_records_csv(args.b)
    va = _records_to_case_values(rec_a, args.metric)
    vb = _records_to_case_values(rec_b, args.metric)
    if set(va) != set(vb):
        raise DataError(f"case sets differ: {sorted(set(va) ^ set(vb))}")
    cases = sorted(va)
    x = np.array([vb[c] for c in cases])  # right = --b
    y = np.array([va[c] for c in cases])
    res = paired_t_test(x, y)
    higher_better = METRIC_HIGHER_IS_BETTER[args.metric]
    right_better = (res.direction > 0) == higher_better and res.direction != 0
    doc = {
        "metric": args.metric,
        "n_cases": len(cases),
        "t": res.t,
        "p_value": res.p_value,
        "direction": res.direction,
        "tier": res.tier,
        "right_better": bool(right_better and res.tier > 0),
        "glyph": glyph(res.tier, right_better),
        "mean_a": float(y.mean()),
        "mean_b": float(x.mean()),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    if args.op:
        results = [gradcheck_mod.check_op(args.op, args.seed)]
    else:
        results = gradcheck_mod.run_all(args.seed)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.name:20s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
        failed += 0 if r.ok else 1
    if failed:
        raise NumericalError(f"{failed} gradient checks failed")
    return 0


def _cmd_report(args) -> int:
    records = []
    for path in args.records:
        records.extend(read_records_csv(path))
    methods = sorted({r.method for r in records})
    comparisons = []
    for item in args.compare:
        if ":" not in item:
            raise UsageError(f"--compare expects LEFT:RIGHT, got {item!r}")
        left, right = item.split(":", 1)
        comparisons.append((left, right))
    if not comparisons and len(methods) == 2:
        comparisons = [(methods[0], methods[1])]
    summary = report(records, comparisons, args.out)
    print(f"report for methods {methods} in {args.out}")
    return 0


_COMMANDS = {
    "config": _cmd_config,
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "ttest": _cmd_ttest,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}

_EXIT_CODES = [(UsageError, 1), (NumericalError, 3), (DataError, 2), (AtlasSegError, 2)]


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except AtlasSegError as exc:
        for cls, code in _EXIT_CODES:
            if isinstance(exc, cls):
                break
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return code
    except OSError as exc:
        print(json.dumps({"error": {"type": "OSError", "message": str(exc)}}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
