"""Command-line interface: corrupt | project | train | restore | index |
retrieve | evaluate | bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys

import numpy as np

from . import bench, lpr, metrics, weathersim
from .bench import ConfigError, Manifest, RunConfig
from .pointcloud import (ProjectionSpec, RangeImage, ScanParseError,
                         back_project, project, read_scan, write_scan)
from .restorenet import (NetConfig, ResLPRNet, TrainOptions, load_checkpoint,
                         save_checkpoint, train)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _projection_from_args(args) -> ProjectionSpec:
    return ProjectionSpec(
        height=args.height, width=args.width,
        fov_up=math.radians(args.fov_up_deg),
        fov_down=math.radians(args.fov_down_deg),
        max_range=args.max_range)


def _add_projection_args(p):
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=1920)
    p.add_argument("--fov-up-deg", type=float, default=3.0)
    p.add_argument("--fov-down-deg", type=float, default=-25.0)
    p.add_argument("--max-range", type=float, default=80.0)


def _scan_files(directory):
    files = sorted(glob.glob(os.path.join(directory, "*.bin")))
    if not files:
        raise ScanParseError(f"no .bin scans under {directory}")
    return files


def cmd_corrupt(args) -> int:
    params = weathersim.severity_preset(args.kind, args.level, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    records = []
    for path in _scan_files(getattr(args, "in")):
        cloud = read_scan(path)
        corrupted, ann = weathersim.corrupt(cloud, args.kind, params)
        write_scan(corrupted, os.path.join(args.out, os.path.basename(path)))
        records.append((cloud.frame_id, ann))
    weathersim.write_annotations(records, os.path.join(args.out, "annotations.txt"))
    print(f"corrupted {len(records)} scans -> {args.out}")
    return 0


def cmd_project(args) -> int:
    spec = _projection_from_args(args)
    img = project(read_scan(getattr(args, "in")), spec)
    np.savez(args.out, dist=img.dist, inten=img.inten, mask=img.mask)
    print(f"projected -> {args.out} ({spec.height}x{spec.width})")
    return 0


def cmd_train(args) -> int:
    manifest = bench.load_manifest(args.manifest)
    if not manifest.train_pairs:
        raise ConfigError("manifest has no train_pairs")
    spec = _projection_from_args(args)
    pairs = []
    for corrupt_path, clean_path in manifest.train_pairs:
        pairs.append((project(read_scan(corrupt_path), spec),
                      project(read_scan(clean_path), spec)))
    net = ResLPRNet(NetConfig(base_channels=args.channels, seed=args.seed))
    opts = TrainOptions(lr=args.lr, epochs=args.epochs,
                        patch=(args.patch_h, args.patch_w), seed=args.seed)
    curve = train(net, pairs, opts)
    save_checkpoint(net, args.out)
    print(f"trained {len(curve)} steps; loss {curve[0]:.4f} -> {curve[-1]:.4f}; "
          f"checkpoint -> {args.out}")
    return 0


def cmd_restore(args) -> int:
    net = load_checkpoint(args.ckpt)
    spec = _projection_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for path in _scan_files(getattr(args, "in")):
        cloud = read_scan(path)
        restored = bench.restore_cloud(cloud, net, spec)
        write_scan(restored, os.path.join(args.out, os.path.basename(path)))
        count += 1
    print(f"restored {count} scans -> {args.out}")
    return 0


def cmd_index(args) -> int:
    poses = bench.read_pose_file(args.poses)
    db = lpr.PlaceDatabase(rings=args.rings, sectors=args.sectors)
    for path in _scan_files(getattr(args, "in")):
        scan_id = int(os.path.splitext(os.path.basename(path))[0])
        if scan_id not in poses:
            raise ConfigError(f"no pose for scan {scan_id}")
        desc = lpr.make_descriptor(read_scan(path), args.rings, args.sectors,
                                   args.max_radius)
        db.add(scan_id, poses[scan_id], desc)
    db.save(args.out)
    print(f"indexed {len(db)} scans -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    db = lpr.PlaceDatabase.load(args.db)
    desc = lpr.make_descriptor(read_scan(args.query), db.rings, db.sectors,
                               args.max_radius)
    for sid, dist in db.query(desc, top_n=args.top_n):
        print(f"{sid} {dist:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    db = lpr.PlaceDatabase.load(args.db)
    db_poses = dict(zip(db.ids, db.poses))
    query_poses = bench.read_pose_file(args.query_poses)
    records = []
    for path in _scan_files(args.queries):
        qid = int(os.path.splitext(os.path.basename(path))[0])
        if qid not in query_poses:
            raise ConfigError(f"no pose for query {qid}")
        desc = lpr.make_descriptor(read_scan(path), db.rings, db.sectors,
                                   args.max_radius)
        exclude = None
        if args.exclude_recent:
            exclude = [i for i in db.ids if abs(i - qid) <= args.exclude_recent]
        ranked = db.query(desc, top_n=args.top_n, exclude_ids=exclude)
        records.append(metrics.RetrievalRecord(
            query_id=qid, matches=tuple(ranked),
            query_pose=query_poses[qid], db_poses=db_poses))
    row = metrics.score_records(records, "unknown", 0, "none", args.pos_radius)
    print(f"AUC={row.auc:.4f} F1={row.f1:.4f} "
          f"R@1={row.r1:.4f} R@5={row.r5:.4f} R@20={row.r20:.4f}")
    if args.out:
        metrics.write_csv([row], args.out)
    return 0


def _bench_config(raw: dict, args) -> RunConfig:
    proj = raw.get("projection", {})
    spec = ProjectionSpec(
        height=proj.get("height", 64), width=proj.get("width", 1920),
        fov_up=math.radians(proj.get("fov_up_deg", 3.0)),
        fov_down=math.radians(proj.get("fov_down_deg", -25.0)),
        max_range=proj.get("max_range", 80.0))
    return RunConfig(
        kinds=tuple(raw.get("kinds", weathersim.CORRUPTION_KINDS)),
        levels=tuple(raw.get("levels", weathersim.SEVERITY_LEVELS)),
        preprocessing=raw.get("preprocessing", "none"),
        checkpoint=raw.get("checkpoint"),
        protocol=raw.get("protocol", "kitti"),
        pos_radius=raw.get("pos_radius", metrics.DEFAULT_POS_RADIUS),
        top_n=raw.get("top_n", 20),
        seed=args.seed if args.seed is not None else raw.get("seed", 0),
        rings=raw.get("rings", lpr.DEFAULT_RINGS),
        sectors=raw.get("sectors", lpr.DEFAULT_SECTORS),
        max_radius=raw.get("max_radius", lpr.DEFAULT_MAX_RADIUS),
        exclude_recent=raw.get("exclude_recent", 0),
        projection=spec,
        out_dir=args.out)


def cmd_bench(args) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    config = _bench_config(raw, args)

    if "synthetic" in raw:
        syn = raw["synthetic"]
        world = bench.make_synthetic_world(
            seed=config.seed, n_places=syn.get("n_places", 50),
            revisit_fraction=syn.get("revisit_fraction", 0.8),
            points_per_scan=syn.get("points_per_scan", 900))
        database, queries = world.database, world.queries
    elif "manifest" in raw:
        manifest = bench.load_manifest(
            raw["manifest"] if os.path.isabs(raw["manifest"])
            else os.path.join(os.path.dirname(os.path.abspath(args.config)),
                              raw["manifest"]))
        db_poses = bench.read_pose_file(manifest.database_poses)
        q_poses = bench.read_pose_file(manifest.query_poses)

        def load_entries(paths, poses):
            out = []
            for path in paths:
                sid = int(os.path.splitext(os.path.basename(path))[0])
                out.append(bench.ScanEntry(sid, read_scan(path), poses[sid]))
            return out

        database = load_entries(manifest.database_scans, db_poses)
        queries = load_entries(manifest.query_scans, q_poses)
    else:
        raise ConfigError("config needs either 'synthetic' or 'manifest'")

    report = bench.run_benchmark(database, queries, config)
    print(f"alp_clean={report['alp_clean']:.4f} sr={report['sr']} "
          f"msr={report['msr']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weatherlpr",
        description="LiDAR weather-corruption benchmark and restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="corrupt clean scans with fog/snow/rain")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True, choices=weathersim.CORRUPTION_KINDS)
    p.add_argument("--level", required=True, type=int, choices=(1, 2, 3))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("project", help="project a scan to a range image (.npz)")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    _add_projection_args(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train the restoration network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--patch-h", type=int, default=32)
    p.add_argument("--patch-w", type=int, default=480)
    p.add_argument("--seed", type=int, default=0)
    _add_projection_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore corrupted scans via a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    _add_projection_args(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("index", help="build a place database from scans")
    p.add_argument("--in", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rings", type=int, default=lpr.DEFAULT_RINGS)
    p.add_argument("--sectors", type=int, default=lpr.DEFAULT_SECTORS)
    p.add_argument("--max-radius", type=float, default=lpr.DEFAULT_MAX_RADIUS)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query a place database with one scan")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--max-radius", type=float, default=lpr.DEFAULT_MAX_RADIUS)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="score a query set against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-poses", required=True)
    p.add_argument("--out")
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--pos-radius", type=float, default=metrics.DEFAULT_POS_RADIUS)
    p.add_argument("--max-radius", type=float, default=lpr.DEFAULT_MAX_RADIUS)
    p.add_argument("--exclude-recent", type=int, default=50)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run the full benchmark from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (metrics.MetricError, FloatingPointError, RuntimeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScanParseError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
