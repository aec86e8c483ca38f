"""Command line: ``pointpose {build-db,train,run,evaluate,bench}``."""
import argparse
import dataclasses
import json
import sys

import numpy as np

from .benchmark import run_benchmark
from .evaluation import write_report
from .exceptions import PointPoseError
from .ingestion import crop_rgb, load_rgb
from .pipeline import (
    PipelineConfig,
    build_database,
    evaluate,
    load_frames,
    read_records,
    records_document,
    run,
    write_json,
)
from .recognition import (
    LogisticModel,
    ModelDatabase,
    extract_baseline_embedding,
    load_external_embedding,
    train_classifier,
)


def _flag_bool(text):
    value = text.strip().lower()
    if value not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")
    return value in ("true", "1", "yes")


def _add_config_flags(parser):
    """One ``--flag`` per PipelineConfig field, e.g. ``--leaf-m 0.01``."""
    parser.add_argument("--config", help="JSON config file; flags override its values")
    for f in dataclasses.fields(PipelineConfig):
        kind = {float: float, int: int, str: str}.get(type(f.default), _flag_bool)
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config(args):
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(PipelineConfig)}
    base = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return base.replace(**overrides)


def _cmd_build_db(args):
    cfg = _config(args)
    db = build_database(args.views, cfg, args.out, log=lambda m: print(m, file=sys.stderr))
    n_views = sum(len(db.views(label)) for label in db.labels)
    print(f"database: {args.out} ({len(db)} instances, {n_views} views)")


def _cmd_train(args):
    frames, _ = load_frames(args.manifest)
    X, y = [], []
    for frame in frames:
        rgb = None
        for ann in frame.annotations:
            if ann.embedding is not None:
                X.append(load_external_embedding(ann.embedding))
            else:
                rgb = load_rgb(frame.rgb) if rgb is None else rgb
                X.append(extract_baseline_embedding(crop_rgb(rgb, ann.bbox), args.dim))
            y.append(ann.label)
    model = train_classifier(np.stack(X), y, l2=args.l2, max_epochs=args.max_epochs, tol=args.tol)
    model.save(args.out)
    print(f"model: {args.out} ({len(model.class_labels)} classes, dim {model.dim})")


def _cmd_run(args):
    cfg = _config(args)
    frames, K = load_frames(args.manifest)
    db = ModelDatabase.load(args.db)
    model = LogisticModel.load(args.model)
    records = run(frames, db, model, cfg, K)
    write_json(args.out, records_document(records, cfg))
    print(f"records: {args.out}")
    if args.report:
        write_json(args.report, evaluate(records, frames))
        print(f"report: {args.report}")


def _cmd_evaluate(args):
    frames, _ = load_frames(args.manifest)
    report = evaluate(read_records(args.records), frames)
    write_report(report, args.out, args.csv)
    print(f"report: {args.out}" + (f", prc: {args.csv}" if args.csv else ""))


def _cmd_bench(args):
    cfg = _config(args)
    result = run_benchmark(cfg, seeds=range(args.seed_start, args.seed_start + args.seeds),
                           n_views=args.views)
    result["config"] = cfg.to_dict()
    write_json(args.out, result)
    s = result["summary"]
    print(f"RANSAC {s['RANSAC']['total_seconds']:.3f} s, FGR {s['FGR']['total_seconds']:.3f} s, "
          f"ratio {s['speed_ratio_ransac_over_fgr']:.1f}x")
    print(f"bench: {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="pointpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", allow_abbrev=False, help="preprocess view clouds into a model database")
    p.add_argument("--views", required=True, help="directory of <instance>/<view>.ply")
    p.add_argument("--out", required=True, help="database directory to write")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_build_db)

    p = sub.add_parser("train", allow_abbrev=False, help="train the instance classifier from annotated frames")
    p.add_argument("--manifest", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=1000, help="baseline embedding length")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", allow_abbrev=False, help="run the pipeline over annotated frames")
    p.add_argument("--manifest", required=True, nargs="+")
    p.add_argument("--db", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="records JSON")
    p.add_argument("--report", help="also write an evaluation report here")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", allow_abbrev=False, help="score records against frame annotations")
    p.add_argument("--records", required=True)
    p.add_argument("--manifest", required=True, nargs="+")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="precision-recall points CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("bench", allow_abbrev=False, help="synthetic RANSAC vs FGR comparison")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--views", type=int, default=10)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PointPoseError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
