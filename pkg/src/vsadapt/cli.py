"""Command-line entry point: ``vsadapt <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment, ensemble, losses, metrics, pipeline, postprocess, preprocess
from .volume import read_nifti, read_probability_map, write_class_array, write_nifti


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(","))


def _xy(text: str):
    return None if text.lower() == "none" else _ints(text)


def cmd_preprocess(args) -> int:
    vol = read_nifti(args.input, as_label=True if args.label else False)
    out = preprocess.preprocess(vol, args.spacing, args.xy, normalize=args.normalize and not args.label,
                                workers=args.workers)
    write_nifti(out, args.output)
    print(json.dumps({"dims": out.dims, "spacing": out.spacing}))
    return 0


def cmd_augment(args) -> int:
    spec = augment.AugmentationSpec(args.kind, args.seed)
    if args.label:
        out = augment.apply_spatial_to_label(read_nifti(args.input, as_label=True), spec)
    else:
        out = augment.apply_augmentation(read_nifti(args.input, as_label=False), spec)
    write_nifti(out, args.output)
    params = {k: v for k, v in augment.draw_params(spec).items() if k != "rng"}
    print(json.dumps({"kind": args.kind, "seed": args.seed, "params": params}))
    return 0


def cmd_reduce_tumor(args) -> int:
    img = read_nifti(args.image, as_label=False)
    lbl = read_nifti(args.label, as_label=True)
    write_nifti(augment.reduce_tumor_signal(img, lbl, args.factor), args.output)
    return 0


def cmd_loss(args) -> int:
    pm = read_probability_map(args.pred)
    target = read_nifti(args.target, as_label=True)
    inp = losses.LossInput.from_volumes(pm, target, args.epsilon)
    if args.kind == "dice":
        res = losses.dice_loss(inp)
    elif args.kind == "ce":
        res = losses.cross_entropy_loss(inp)
    else:
        res = losses.combined_loss(inp, args.weights)
    report = {"kind": args.kind, "epsilon": args.epsilon, "value": res.value}
    if args.kind == "ce":
        report["raw"] = losses.cross_entropy_loss(inp, reduction="sum").value
    if args.grad_out:
        write_class_array(res.gradient, pm.spacing, args.grad_out)
        report["gradient"] = str(args.grad_out)
    print(json.dumps(report))
    return 0


def cmd_metrics(args) -> int:
    if len(args.pred) != len(args.truth):
        raise ValueError("--pred and --truth need the same number of files")
    pairs = {}
    for p, t in zip(args.pred, args.truth):
        cid = Path(p).name.split(".")[0]
        pairs[cid] = (read_nifti(p, as_label=True), read_nifti(t, as_label=True))
    report = metrics.metrics_report(pairs, args.classes)
    if args.out:
        metrics.write_report(report, args.out)
    print(metrics.format_table(report))
    return 0


def _load_features(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_fid(args) -> int:
    a = metrics.feature_stats(_load_features(args.features_a))
    b = metrics.feature_stats(_load_features(args.features_b))
    print(f"{metrics.frechet_distance(a, b):.6f}")
    return 0


def cmd_postprocess(args) -> int:
    lbl = read_nifti(args.input, as_label=True)
    write_nifti(postprocess.keep_largest_component(lbl, args.class_id, args.connectivity), args.output)
    return 0


def cmd_ensemble(args) -> int:
    maps = [read_probability_map(p) for p in args.probs]
    labels = ensemble.argmax_labels(ensemble.ensemble_probs(maps, args.weights))
    if args.keep_largest is not None:
        labels = postprocess.keep_largest_component(labels, args.keep_largest)
    write_nifti(labels, args.output)
    return 0


def cmd_pipeline_assemble(args) -> int:
    pools = json.loads(Path(args.pools).read_text())
    manifest = pipeline.assemble_round(args.round, pools, created=args.created)
    manifest.write(args.out)
    print(json.dumps({"round": manifest.round, "entries": len(manifest.entries), "counts": manifest.counts()}))
    return 0


def cmd_pipeline_run(args) -> int:
    manifest = pipeline.DatasetManifest.load(args.manifest)
    workdir = args.workdir or Path(args.manifest).with_suffix("").with_name(Path(args.manifest).stem + "_run")
    res = pipeline.run_model(manifest, args.runner, args.mode, workdir, variant=args.variant,
                             postprocess=not args.no_postprocess)
    print(json.dumps(res, indent=2))
    return 0


def cmd_schedule(args) -> int:
    spec = pipeline.CUT_STAGES[args.stage]
    epochs = [args.epoch] if args.epoch is not None else range(spec.total_epochs)
    for e in epochs:
        print(f"{e}\t{pipeline.lr_at_epoch(spec, e):.10g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vsadapt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample, crop/pad and normalise one volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--label", action="store_true", help="treat input as a label map (nearest neighbour)")
    p.add_argument("--spacing", type=_floats, default=(1.0, 1.0, 1.0))
    p.add_argument("--xy", type=_xy, default=(256, 256), help="target x,y size or 'none'")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="apply one augmentation")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=augment.KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--label", action="store_true", help="input is a label map (spatial kinds only)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("reduce-tumor", help="scale the VS signal (AT dataset)")
    p.add_argument("--image", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--factor", type=float, default=0.5)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_reduce_tumor)

    p = sub.add_parser("loss", help="evaluate a training loss on a probability map")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--kind", choices=("dice", "ce", "combined"), default="combined")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--weights", type=_floats, default=(1.0, 1.0))
    p.add_argument("--grad-out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("metrics", help="dice / ASSD report")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--classes", type=_ints, default=(1, 2))
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("fid", help="Fréchet distance between two feature CSVs")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("postprocess", help="keep the largest component of one class")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=1)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("ensemble", help="average probability maps and take the argmax")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--weights", type=_floats)
    p.add_argument("--keep-largest", type=int, metavar="CLASS")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("pipeline", help="manifest assembly and external runs")
    psub = p.add_subparsers(dest="pipeline_command", required=True)
    q = psub.add_parser("assemble")
    q.add_argument("--round", type=int, required=True)
    q.add_argument("--pools", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--created", help="fixed timestamp for reproducible manifests")
    q.set_defaults(func=cmd_pipeline_assemble)
    q = psub.add_parser("run")
    q.add_argument("--manifest", required=True)
    q.add_argument("--runner", required=True, help='command template, e.g. "cmd {manifest} {outdir}"')
    q.add_argument("--mode", choices=("train", "predict"), required=True)
    q.add_argument("--workdir")
    q.add_argument("--variant", default="default")
    q.add_argument("--no-postprocess", action="store_true")
    q.set_defaults(func=cmd_pipeline_run)

    p = sub.add_parser("schedule", help="CUT learning rate per epoch")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--epoch", type=int)
    p.set_defaults(func=cmd_schedule)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
