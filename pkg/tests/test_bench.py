import json
import math
import os

import numpy as np
import pytest

from weatherlpr import bench, lpr, metrics, weathersim
from weatherlpr.bench import (ConfigError, Manifest, RunConfig,
                              make_synthetic_world, run_benchmark)
from weatherlpr.pointcloud import ProjectionSpec


def small_projection():
    return ProjectionSpec(height=32, width=128, fov_up=math.radians(3.0),
                          fov_down=math.radians(-25.0), max_range=80.0)


def small_config(**kw):
    base = dict(kinds=("fog",), levels=(1, 2, 3), top_n=10,
                projection=small_projection(), seed=0)
    base.update(kw)
    return RunConfig(**base)


class TestSyntheticWorld:
    def test_deterministic(self):
        a = make_synthetic_world(seed=3, n_places=6)
        b = make_synthetic_world(seed=3, n_places=6)
        for ea, eb in zip(a.database + a.queries, b.database + b.queries):
            np.testing.assert_array_equal(ea.cloud.points, eb.cloud.points)
            assert ea.pose == eb.pose

    def test_seed_changes_world(self):
        a = make_synthetic_world(seed=3, n_places=6)
        b = make_synthetic_world(seed=4, n_places=6)
        assert not np.array_equal(a.database[0].cloud.points,
                                  b.database[0].cloud.points)

    def test_revisit_geometry(self):
        world = make_synthetic_world(seed=0, n_places=8, revisit_fraction=0.5)
        assert len(world.queries) == 8
        db_poses = [e.pose for e in world.database]
        for q in world.queries[:4]:  # revisits
            assert min(math.dist(q.pose, p) for p in db_poses) <= math.sqrt(2) + 1e-9
        for q in world.queries[4:]:  # novel places
            assert min(math.dist(q.pose, p) for p in db_poses) > 100.0

    def test_too_few_places_rejected(self):
        with pytest.raises(ConfigError):
            make_synthetic_world(seed=0, n_places=1)

    def test_write_world_layout(self, tmp_path):
        world = make_synthetic_world(seed=1, n_places=3, revisit_fraction=1.0)
        bench.write_world(world, tmp_path)
        assert len(list((tmp_path / "database").glob("*.bin"))) == 3
        assert len(list((tmp_path / "queries").glob("*.bin"))) == 3
        poses = bench.read_pose_file(tmp_path / "database_poses.txt")
        assert set(poses) == {0, 1, 2}
        for e in world.database:
            assert poses[e.scan_id] == pytest.approx(e.pose, abs=1e-5)


class TestManifest:
    def manifest_files(self, tmp_path):
        for name in ("a.bin", "b.bin", "q.bin"):
            (tmp_path / name).write_bytes(b"\x00" * 16)
        (tmp_path / "db_poses.txt").write_text("0 0.0 0.0\n")
        (tmp_path / "q_poses.txt").write_text("1 1.0 0.0\n")
        return tmp_path

    def test_valid_manifest(self, tmp_path):
        d = self.manifest_files(tmp_path)
        m = Manifest("t", (str(d / "a.bin"), str(d / "b.bin")),
                     (str(d / "q.bin"),), str(d / "db_poses.txt"),
                     str(d / "q_poses.txt"))
        m.validate()

    def test_overlapping_roles_rejected(self, tmp_path):
        d = self.manifest_files(tmp_path)
        m = Manifest("t", (str(d / "a.bin"),), (str(d / "a.bin"),),
                     str(d / "db_poses.txt"), str(d / "q_poses.txt"))
        with pytest.raises(ConfigError, match="disjoint"):
            m.validate()

    def test_missing_file_rejected(self, tmp_path):
        d = self.manifest_files(tmp_path)
        m = Manifest("t", (str(d / "missing.bin"),), (str(d / "q.bin"),),
                     str(d / "db_poses.txt"), str(d / "q_poses.txt"))
        with pytest.raises(ConfigError, match="missing"):
            m.validate()

    def test_load_manifest_relative_paths(self, tmp_path):
        d = self.manifest_files(tmp_path)
        (d / "m.json").write_text(json.dumps({
            "name": "t",
            "database": {"scans": ["a.bin"], "poses": "db_poses.txt"},
            "queries": {"scans": ["q.bin"], "poses": "q_poses.txt"},
        }))
        m = bench.load_manifest(d / "m.json")
        assert m.database_scans[0] == str(d / "a.bin")


class TestRunConfig:
    def test_invalid_choices_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(preprocessing="magic")
        with pytest.raises(ConfigError):
            RunConfig(protocol="oxford")
        with pytest.raises(ConfigError):
            RunConfig(lpr_method="netvlad")

    def test_param_overrides_take_precedence(self):
        zero = weathersim.FogParams(alpha=0.0, beta=0.0)
        cfg = small_config(param_overrides={"fog": {1: zero}})
        assert cfg.params_for("fog", 1) is zero
        assert cfg.params_for("fog", 2).beta == pytest.approx(0.02)


class TestBenchmark:
    def test_clean_self_retrieval_and_sr(self, tmp_path):
        world = make_synthetic_world(seed=5, n_places=10, revisit_fraction=0.8)
        cfg = small_config()
        report = run_benchmark(world.database, world.queries, cfg)
        clean = report["rows"][0]
        assert clean["kind"] == "clean" and clean["level"] == 0
        assert clean["r1"] == pytest.approx(1.0)
        assert "fog" in report["sr"]
        assert 0.0 <= report["sr"]["fog"] <= 1.5

    def test_zero_severity_sr_is_one(self):
        world = make_synthetic_world(seed=6, n_places=8, revisit_fraction=1.0)
        zero = weathersim.FogParams(alpha=0.0, beta=0.0)
        cfg = small_config(param_overrides={"fog": {1: zero, 2: zero, 3: zero}})
        report = run_benchmark(world.database, world.queries, cfg)
        assert report["sr"]["fog"] == pytest.approx(1.0)
        assert report["msr"] == pytest.approx(1.0)

    def test_corruption_degrades_monotonically_on_average(self):
        world = make_synthetic_world(seed=7, n_places=12, revisit_fraction=0.8)
        cfg = small_config()
        report = run_benchmark(world.database, world.queries, cfg)
        alps = [r["auc"] + r["f1"] + r["r1"] + r["r5"]
                for r in report["rows"][1:]]
        assert alps[-1] <= report["alp_clean"] + 1e-9

    def test_report_byte_determinism(self, tmp_path):
        world = make_synthetic_world(seed=8, n_places=8, revisit_fraction=0.8)
        for d in ("one", "two"):
            cfg = small_config(levels=(1,), out_dir=str(tmp_path / d))
            run_benchmark(world.database, world.queries, cfg)
        assert ((tmp_path / "one" / "report.json").read_bytes()
                == (tmp_path / "two" / "report.json").read_bytes())
        assert (tmp_path / "one" / "timings.log").exists()
        assert (tmp_path / "one" / "metrics.csv").exists()
        assert (tmp_path / "one" / "recall_at_n.csv").exists()

    def test_stage_failure_names_stage(self):
        world = make_synthetic_world(seed=9, n_places=4, revisit_fraction=1.0)
        bad = object()  # not a parameter set: the corruption stage blows up
        cfg = small_config(levels=(1,), param_overrides={"fog": {1: bad}})
        with pytest.raises(RuntimeError, match="evaluate_fog_1"):
            run_benchmark(world.database, world.queries, cfg)

    def test_total_dropout_still_scores(self):
        # a corruption that erases every return degrades scores, not the run
        world = make_synthetic_world(seed=9, n_places=4, revisit_fraction=1.0)
        bad = weathersim.FogParams(alpha=10.0, beta=0.0)
        cfg = small_config(param_overrides={"fog": {1: bad, 2: bad, 3: bad}})
        report = run_benchmark(world.database, world.queries, cfg)
        assert report["rows"][1]["r1"] <= report["rows"][0]["r1"]

    def test_no_revisits_makes_metrics_undefined(self):
        world = make_synthetic_world(seed=10, n_places=6, revisit_fraction=0.0)
        db = bench.build_database(world.database, small_config())
        records = bench.evaluate_queries(db, world.queries, small_config())
        with pytest.raises(metrics.MetricError):
            metrics.recall_at_n(records, 1)

    def test_restoration_pairs_shapes(self):
        world = make_synthetic_world(seed=11, n_places=3, revisit_fraction=1.0)
        cfg = small_config()
        pairs = bench.make_restoration_pairs(world.database[:2], "fog", (1, 2), cfg)
        assert len(pairs) == 4
        for corrupt, clean in pairs:
            assert corrupt.dist.shape == (32, 128)
            assert clean.dist.shape == (32, 128)
