"""Benchmark orchestration: synthetic worlds, manifests, corruption runs,
optional restoration preprocessing, retrieval, and report assembly.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import lpr, metrics, weathersim
from .pointcloud import PointCloud, ProjectionSpec, back_project, project, write_scan
from .restorenet import ResLPRNet

QUERY_ID_BASE = 100000


class ConfigError(ValueError):
    """Invalid benchmark configuration or manifest."""


@dataclass(frozen=True)
class ScanEntry:
    scan_id: int
    cloud: PointCloud
    pose: tuple  # (x, y)


@dataclass(frozen=True)
class SyntheticWorld:
    database: tuple   # ScanEntry, ...
    queries: tuple    # ScanEntry, ...; revisits carry poses near database poses
    seed: int


@dataclass(frozen=True)
class Manifest:
    """Dataset roles: database scans, query scans, pose files, train pairs."""

    name: str
    database_scans: tuple     # file paths
    query_scans: tuple
    database_poses: str       # pose file: "<scan_id> <x> <y>" per line
    query_poses: str
    train_pairs: tuple = ()   # ((corrupt_path, clean_path), ...)

    def validate(self) -> None:
        if set(self.database_scans) & set(self.query_scans):
            raise ConfigError("query and database sequences must be disjoint")
        for path in (*self.database_scans, *self.query_scans,
                     self.database_poses, self.query_poses):
            if not os.path.exists(path):
                raise ConfigError(f"manifest references missing file: {path}")


def load_manifest(path) -> Manifest:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))

    def _abs(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    m = Manifest(
        name=raw.get("name", "unnamed"),
        database_scans=tuple(_abs(p) for p in raw["database"]["scans"]),
        query_scans=tuple(_abs(p) for p in raw["queries"]["scans"]),
        database_poses=_abs(raw["database"]["poses"]),
        query_poses=_abs(raw["queries"]["poses"]),
        train_pairs=tuple((_abs(a), _abs(b)) for a, b in raw.get("train_pairs", ())),
    )
    m.validate()
    return m


def read_pose_file(path) -> dict:
    poses = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                poses[int(parts[0])] = (float(parts[1]), float(parts[2]))
    return poses


def write_pose_file(entries, path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.scan_id} {e.pose[0]:.6f} {e.pose[1]:.6f}\n")


@dataclass(frozen=True)
class RunConfig:
    kinds: tuple = weathersim.CORRUPTION_KINDS
    levels: tuple = weathersim.SEVERITY_LEVELS
    preprocessing: str = "none"           # none | restorenet
    checkpoint: str | None = None
    lpr_method: str = "scan_context"
    protocol: str = "kitti"               # kitti | nclt
    pos_radius: float = metrics.DEFAULT_POS_RADIUS
    top_n: int = 20
    seed: int = 0
    rings: int = lpr.DEFAULT_RINGS
    sectors: int = lpr.DEFAULT_SECTORS
    max_radius: float = lpr.DEFAULT_MAX_RADIUS
    exclude_recent: int = 0
    projection: ProjectionSpec = field(default_factory=ProjectionSpec)
    out_dir: str | None = None
    # test hook: {kind: {level: params}} overriding the preset table
    param_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preprocessing not in ("none", "restorenet"):
            raise ConfigError(f"unknown preprocessing: {self.preprocessing}")
        if self.lpr_method != "scan_context":
            raise ConfigError(f"unknown LPR method: {self.lpr_method}")
        if self.protocol not in ("kitti", "nclt"):
            raise ConfigError(f"unknown protocol: {self.protocol}")

    def params_for(self, kind: str, level: int):
        override = self.param_overrides.get(kind, {}).get(level)
        if override is not None:
            return override
        return weathersim.severity_preset(kind, level, seed=self.seed)


# ---------------------------------------------------------------------------
# synthetic world generation


def _sample_place_scan(layout_rng, sample_rng, n_points, yaw=0.0, offset=(0.0, 0.0)):
    """Structured scene (ground, boxes, poles) sampled in the sensor frame."""
    n_boxes = int(layout_rng.integers(6, 14))
    boxes = []
    for _ in range(n_boxes):
        r = layout_rng.uniform(5.0, 45.0)
        th = layout_rng.uniform(0.0, 2 * np.pi)
        boxes.append((r * np.cos(th), r * np.sin(th),
                      layout_rng.uniform(1.0, 4.0),      # half-extent
                      layout_rng.uniform(1.0, 5.0),      # height
                      layout_rng.uniform(0.3, 0.9)))     # base intensity
    n_poles = int(layout_rng.integers(4, 9))
    poles = []
    for _ in range(n_poles):
        r = layout_rng.uniform(3.0, 40.0)
        th = layout_rng.uniform(0.0, 2 * np.pi)
        poles.append((r * np.cos(th), r * np.sin(th),
                      layout_rng.uniform(4.0, 8.0),
                      layout_rng.uniform(0.3, 0.9)))

    n_ground = n_points * 3 // 10
    n_box = n_points * 5 // 10
    n_pole = n_points - n_ground - n_box
    pts = np.empty((n_points, 4))

    rr = 50.0 * np.sqrt(sample_rng.random(n_ground))
    th = sample_rng.uniform(0, 2 * np.pi, n_ground)
    pts[:n_ground, 0] = rr * np.cos(th)
    pts[:n_ground, 1] = rr * np.sin(th)
    pts[:n_ground, 2] = -1.8 + sample_rng.normal(0, 0.03, n_ground)
    pts[:n_ground, 3] = 0.2 + 0.1 * sample_rng.random(n_ground)

    which = sample_rng.integers(0, n_boxes, n_box)
    for k in range(n_box):
        bx, by, half, height, inten = boxes[which[k]]
        pts[n_ground + k, 0] = bx + sample_rng.uniform(-half, half)
        pts[n_ground + k, 1] = by + sample_rng.uniform(-half, half)
        pts[n_ground + k, 2] = -1.8 + sample_rng.uniform(0.0, height)
        pts[n_ground + k, 3] = np.clip(inten + sample_rng.normal(0, 0.05), 0.05, 1.0)

    base = n_ground + n_box
    whichp = sample_rng.integers(0, n_poles, n_pole)
    for k in range(n_pole):
        px, py, height, inten = poles[whichp[k]]
        pts[base + k, 0] = px + sample_rng.normal(0, 0.05)
        pts[base + k, 1] = py + sample_rng.normal(0, 0.05)
        pts[base + k, 2] = -1.8 + sample_rng.uniform(0.0, height)
        pts[base + k, 3] = np.clip(inten + sample_rng.normal(0, 0.05), 0.05, 1.0)

    # sensor displacement and yaw: world stays put, the frame moves
    pts[:, 0] -= offset[0]
    pts[:, 1] -= offset[1]
    if yaw:
        c, s = np.cos(-yaw), np.sin(-yaw)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y
    return pts


def make_synthetic_world(seed: int, n_places: int, revisit_fraction: float = 1.0,
                         points_per_scan: int = 900) -> SyntheticWorld:
    """Procedural loop of structured places with revisit queries.

    Database scans sit on a loop with ~12 m spacing. A revisit query samples
    the same place layout from a jittered pose (<= 1 m offset, sector-aligned
    yaw); the remaining queries visit novel places with no positive match.
    """
    if n_places < 2:
        raise ConfigError("n_places must be >= 2")
    if not 0.0 <= revisit_fraction <= 1.0:
        raise ConfigError("revisit_fraction must be in [0, 1]")
    root = np.random.SeedSequence([int(seed), 0x57454c50])
    spacing = 12.0
    radius = n_places * spacing / (2 * np.pi)

    def place_pose(k):
        th = 2 * np.pi * k / n_places
        return (radius * np.cos(th), radius * np.sin(th))

    database = []
    for k in range(n_places):
        layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, k]))
        sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k, 0]))
        pts = _sample_place_scan(layout_rng, sample_rng, points_per_scan)
        database.append(ScanEntry(k, PointCloud(pts, frame_id=f"db{k:06d}"),
                                  place_pose(k)))

    n_queries = n_places
    n_revisit = int(round(revisit_fraction * n_queries))
    qrng = np.random.default_rng(root.spawn(1)[0])
    queries = []
    for q in range(n_queries):
        qid = QUERY_ID_BASE + q
        if q < n_revisit:
            k = q % n_places
            layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, k]))
            sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, k, 1]))
            offset = tuple(qrng.uniform(-1.0, 1.0, 2))
            yaw = (2 * np.pi / lpr.DEFAULT_SECTORS) * int(qrng.integers(0, lpr.DEFAULT_SECTORS))
            pts = _sample_place_scan(layout_rng, sample_rng, points_per_scan,
                                     yaw=yaw, offset=offset)
            px, py = place_pose(k)
            pose = (px + offset[0], py + offset[1])
        else:
            # novel place well outside the loop
            layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 3, q]))
            sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 4, q]))
            pts = _sample_place_scan(layout_rng, sample_rng, points_per_scan)
            th = 2 * np.pi * q / n_queries
            pose = ((radius + 200.0) * np.cos(th), (radius + 200.0) * np.sin(th))
        queries.append(ScanEntry(qid, PointCloud(pts, frame_id=f"q{qid}"), pose))
    return SyntheticWorld(database=tuple(database), queries=tuple(queries), seed=seed)


def write_world(world: SyntheticWorld, out_dir) -> None:
    """Emit scans in the standard binary layout plus pose files."""
    db_dir = os.path.join(out_dir, "database")
    q_dir = os.path.join(out_dir, "queries")
    os.makedirs(db_dir, exist_ok=True)
    os.makedirs(q_dir, exist_ok=True)
    for e in world.database:
        write_scan(e.cloud, os.path.join(db_dir, f"{e.scan_id:06d}.bin"))
    for e in world.queries:
        write_scan(e.cloud, os.path.join(q_dir, f"{e.scan_id:06d}.bin"))
    write_pose_file(world.database, os.path.join(out_dir, "database_poses.txt"))
    write_pose_file(world.queries, os.path.join(out_dir, "query_poses.txt"))


# ---------------------------------------------------------------------------
# pipeline stages


def build_database(entries, config: RunConfig) -> lpr.PlaceDatabase:
    db = lpr.PlaceDatabase(rings=config.rings, sectors=config.sectors)
    for e in entries:
        desc = lpr.make_descriptor(e.cloud, config.rings, config.sectors,
                                   config.max_radius)
        db.add(e.scan_id, e.pose, desc)
    return db


def restore_cloud(cloud: PointCloud, net: ResLPRNet, spec: ProjectionSpec) -> PointCloud:
    """Round a cloud through the restoration network via the range image."""
    return back_project(net.forward(project(cloud, spec)), spec)


def evaluate_queries(db: lpr.PlaceDatabase, query_entries, config: RunConfig,
                     net: ResLPRNet | None = None, corrupt_with=None):
    """Retrieval records for one query set, applying optional corruption and
    restoration per query."""
    db_poses = dict(zip(db.ids, db.poses))
    records = []
    for e in query_entries:
        cloud = e.cloud
        if corrupt_with is not None:
            kind, params = corrupt_with
            cloud, _ = weathersim.corrupt(cloud, kind, params)
        if net is not None:
            cloud = restore_cloud(cloud, net, config.projection)
        desc = lpr.make_descriptor(cloud, config.rings, config.sectors,
                                   config.max_radius)
        exclude = None
        if config.exclude_recent:
            exclude = [i for i in db.ids if abs(i - e.scan_id) <= config.exclude_recent]
        ranked = db.query(desc, top_n=config.top_n, exclude_ids=exclude)
        records.append(metrics.RetrievalRecord(
            query_id=e.scan_id, matches=tuple(ranked),
            query_pose=e.pose, db_poses=db_poses))
    return records


def _config_echo(config: RunConfig) -> dict:
    echo = asdict(config)
    # the report must not depend on where it is written
    echo.pop("out_dir", None)
    echo["projection"] = {
        "height": config.projection.height, "width": config.projection.width,
        "fov_up": config.projection.fov_up, "fov_down": config.projection.fov_down,
        "max_range": config.projection.max_range,
    }
    echo["param_overrides"] = sorted(
        f"{kind}:{level}" for kind, levels in config.param_overrides.items()
        for level in levels)
    echo["kinds"] = list(config.kinds)
    echo["levels"] = list(config.levels)
    return echo


def run_benchmark(database_entries, query_entries, config: RunConfig,
                  net: ResLPRNet | None = None) -> dict:
    """Full benchmark: clean baseline, then every (kind, level) with optional
    restoration; aggregates SR per kind and mSR when all levels are present.
    """
    if config.preprocessing == "restorenet" and net is None:
        if not config.checkpoint:
            raise ConfigError("restorenet preprocessing needs a checkpoint or net")
        from .restorenet import load_checkpoint
        net = load_checkpoint(config.checkpoint)
    use_net = net if config.preprocessing == "restorenet" else None
    method = config.preprocessing

    timings = {}
    t0 = time.perf_counter()
    db = build_database(database_entries, config)
    timings["build_database"] = time.perf_counter() - t0

    def stage(label, fn):
        t = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise RuntimeError(f"benchmark stage '{label}' failed: {exc}") from exc
        timings[label] = time.perf_counter() - t
        return out

    clean_records = stage("evaluate_clean", lambda: evaluate_queries(
        db, query_entries, config, net=use_net))
    clean_row = metrics.score_records(clean_records, "clean", 0, method,
                                      config.pos_radius)
    alp_clean = clean_row.alp(config.protocol)

    rows = [clean_row]
    per_kind_alps = {}
    for kind in config.kinds:
        alps = []
        for level in config.levels:
            params = config.params_for(kind, level)
            records = stage(f"evaluate_{kind}_{level}", lambda k=kind, p=params:
                            evaluate_queries(db, query_entries, config,
                                             net=use_net, corrupt_with=(k, p)))
            row = metrics.score_records(records, kind, level, method,
                                        config.pos_radius)
            rows.append(row)
            alps.append(row.alp(config.protocol))
        per_kind_alps[kind] = alps

    sr = {}
    for kind, alps in per_kind_alps.items():
        if len(alps) == 3:
            sr[kind] = metrics.stability_rate(alps, alp_clean)
    msr_value = None
    if sr:
        if len(sr) == 3:
            msr_value = metrics.msr(list(sr.values()))
        else:
            msr_value = float(sum(sr.values())) / len(sr)

    report = {
        "config": _config_echo(config),
        "protocol": config.protocol,
        "alp_clean": alp_clean,
        "rows": [asdict(r) for r in rows],
        "sr": sr,
        "msr": msr_value,
    }
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        metrics.write_report(report, os.path.join(config.out_dir, "report.json"))
        metrics.write_csv(rows, os.path.join(config.out_dir, "metrics.csv"))
        _write_recall_curves(clean_records, config,
                             os.path.join(config.out_dir, "recall_at_n.csv"))
        with open(os.path.join(config.out_dir, "timings.log"), "w") as fh:
            for label, secs in timings.items():
                fh.write(f"{label} {secs:.3f}s\n")
    return report


def _write_recall_curves(records, config: RunConfig, path) -> None:
    """Plot-ready Recall@N over N = 1..top_n for the clean query set."""
    with open(path, "w") as fh:
        fh.write("n,recall\n")
        for n in range(1, config.top_n + 1):
            fh.write(f"{n},{metrics.recall_at_n(records, n, config.pos_radius)}\n")


def make_restoration_pairs(entries, kind: str, levels, config: RunConfig):
    """(corrupt, clean) range-image training pairs from clean scans."""
    pairs = []
    for e in entries:
        clean_img = project(e.cloud, config.projection)
        for level in levels:
            params = config.params_for(kind, level)
            corrupted, _ = weathersim.corrupt(e.cloud, kind, params)
            pairs.append((project(corrupted, config.projection), clean_img))
    return pairs
