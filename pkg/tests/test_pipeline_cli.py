from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from vp2p import gradcheck
from vp2p.cli import EXIT_FAILED_ROWS, EXIT_GRADCHECK, EXIT_INSUFFICIENT, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main
from vp2p.geometry import Pose
from vp2p.io import read_cloud_bin, read_correspondences, read_features, read_pose
from vp2p.pipeline import RunConfig, aggregate, merge_config, run_bench, trial_seed
from vp2p.synth import SceneConfig, generate_scene, make_correspondences, synthesize_features


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def load(path):
    return json.loads(path.read_text())


class TestSynth:
    def test_files_round_trip(self, tmp_path):
        assert run("synth", "--seed", 4, "--out", tmp_path) == EXIT_OK
        assert sorted(files(tmp_path)) == ["cloud.bin", "correspondences.csv", "features.bin", "pose_gt.json"]
        cfg = SceneConfig(seed=4)
        scene = generate_scene(cfg)
        corrs = make_correspondences(scene, cfg)
        feats, _, _ = synthesize_features(scene, cfg, corrs=corrs)
        assert np.array_equal(read_cloud_bin(tmp_path / "cloud.bin"), scene.cloud)
        assert read_pose(tmp_path / "pose_gt.json").to_list() == scene.pose_gt.to_list()
        c = read_correspondences(tmp_path / "correspondences.csv")
        assert np.array_equal(c.pixels, corrs.pixels) and np.array_equal(c.points, corrs.points)
        f2, f3 = read_features(tmp_path / "features.bin")
        assert np.array_equal(f2, feats.f2d) and np.array_equal(f3, feats.f3d)

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--seed", 11, "--pixel-noise", 0.5, "--outliers", 0.2, "--out", tmp_path / d) == EXIT_OK
        assert files(tmp_path / "a") == files(tmp_path / "b")

    def test_minimal_scene(self, tmp_path):
        for seed in range(5):
            code = run("synth", "--seed", seed, "--n-points", 8, "--out", tmp_path / str(seed))
            assert code in (EXIT_OK, EXIT_INSUFFICIENT)
            if code == EXIT_OK:
                assert len(read_correspondences(tmp_path / str(seed) / "correspondences.csv")) >= 6
            else:
                assert not (tmp_path / str(seed)).exists()


class TestRegister:
    def test_noiseless_from_files(self, tmp_path):
        assert run("synth", "--seed", 2, "--out", tmp_path / "scene") == EXIT_OK
        assert run("register", "--seed", 2, "--input", tmp_path / "scene", "--out", tmp_path / "res") == EXIT_OK
        res = load(tmp_path / "res" / "result.json")
        assert res["rte"] < 1e-4 and res["rre"] < 1e-4
        assert set(res) == {"pose", "rte", "rre", "inlier_count", "n_correspondences", "cost"}
        assert set(load(tmp_path / "res" / "timing.json")) >= {"ransac", "gn", "matching"}

    def test_noiseless_synthetic(self, tmp_path):
        assert run("register", "--seed", 3, "--out", tmp_path) == EXIT_OK
        res = load(tmp_path / "result.json")
        assert res["rte"] < 1e-4 and res["rre"] < 1e-4

    def test_features_only_input(self, tmp_path):
        assert run("synth", "--seed", 5, "--out", tmp_path / "scene") == EXIT_OK
        (tmp_path / "scene" / "correspondences.csv").unlink()
        assert run("register", "--input", tmp_path / "scene", "--out", tmp_path / "res") == EXIT_OK
        res = load(tmp_path / "res" / "result.json")
        # pixel locations fall back to cell centers: half-pixel quantization
        assert res["rte"] < 0.05 and res["rre"] < 0.5

    def test_identity_misregistration(self, tmp_path):
        assert run("register", "--seed", 1, "--no-misregister", "--out", tmp_path) == EXIT_OK
        est = Pose.from_list(load(tmp_path / "result.json")["pose"])
        mount = SceneConfig().mount
        assert np.allclose(est.rotation, mount.rotation, atol=1e-8) and np.allclose(est.translation, mount.translation, atol=1e-8)
        # the misregistration itself (mount^-1 * estimate) is the identity
        rel = mount.inverse().compose(est)
        assert np.allclose(rel.rotation, np.eye(3), atol=1e-8) and np.allclose(rel.translation, 0.0, atol=1e-8)

    @pytest.mark.parametrize("victim,payload", [("correspondences.csv", "u,v,x\n1,2\n"), ("pose_gt.json", "[1, 2")])
    def test_corrupt_input(self, tmp_path, victim, payload):
        assert run("synth", "--seed", 2, "--out", tmp_path / "scene") == EXIT_OK
        (tmp_path / "scene" / victim).write_text(payload)
        assert run("register", "--input", tmp_path / "scene", "--out", tmp_path / "res") == EXIT_PARSE
        assert not (tmp_path / "res").exists()

    def test_truncated_cloud(self, tmp_path):
        assert run("synth", "--seed", 2, "--out", tmp_path / "scene") == EXIT_OK
        (tmp_path / "scene" / "correspondences.csv").unlink()
        raw = (tmp_path / "scene" / "cloud.bin").read_bytes()
        (tmp_path / "scene" / "cloud.bin").write_bytes(raw[:-3])
        assert run("register", "--input", tmp_path / "scene", "--out", tmp_path / "res") == EXIT_PARSE
        assert not (tmp_path / "res").exists()

    def test_missing_input(self, tmp_path):
        tmp_path.joinpath("empty").mkdir()
        assert run("register", "--input", tmp_path / "empty", "--out", tmp_path / "res") == EXIT_PARSE

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("register", "--seed", 8, "--pixel-noise", 1.0, "--outliers", 0.3, "--out", tmp_path / d) == EXIT_OK
        assert (tmp_path / "a" / "result.json").read_bytes() == (tmp_path / "b" / "result.json").read_bytes()


class TestBench:
    def test_single_trial(self, tmp_path):
        assert run("bench", "--trials", 1, "--seed", 3, "--out", tmp_path) == EXIT_OK
        rep = load(tmp_path / "report.json")
        row = next(csv.DictReader((tmp_path / "trials.csv").open()))
        assert rep["rte_std"] == 0.0 and rep["rre_std"] == 0.0
        assert rep["rte_mean"] == float(row["rte"]) and rep["rre_mean"] == float(row["rre"])
        assert int(row["seed"]) == trial_seed(3, 0)

    def test_aggregates_recompute_from_rows(self, tmp_path):
        assert run("bench", "--trials", 6, "--pixel-noise", 0.5, "--outliers", 0.3, "--out", tmp_path) == EXIT_OK
        rep = load(tmp_path / "report.json")
        rows = list(csv.DictReader((tmp_path / "trials.csv").open()))
        rte = np.array([float(r["rte"]) for r in rows])
        rre = np.array([float(r["rre"]) for r in rows])
        assert abs(rep["rte_mean"] - rte.mean()) <= 1e-12 and abs(rep["rte_std"] - rte.std()) <= 1e-12
        assert abs(rep["rre_mean"] - rre.mean()) <= 1e-12 and abs(rep["rre_std"] - rre.std()) <= 1e-12
        assert rep["acc"] == np.mean((rte < 2.0) & (rre < 5.0))
        assert rep["errors"] == [[a, b] for a, b in zip(rte.tolist(), rre.tolist())]

    def test_jobs_do_not_change_outputs(self, tmp_path):
        assert run("bench", "--trials", 4, "--seed", 9, "--out", tmp_path / "a") == EXIT_OK
        assert run("bench", "--trials", 4, "--seed", 9, "--jobs", 2, "--out", tmp_path / "b") == EXIT_OK
        for name in ("report.json", "trials.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_failures_count_against_acc(self, tmp_path):
        assert run("bench", "--trials", 6, "--n-points", 24, "--out", tmp_path / "keep") == EXIT_FAILED_ROWS
        rows = list(csv.DictReader((tmp_path / "keep" / "trials.csv").open()))
        failed = [r for r in rows if r["status"] == "error"]
        assert 0 < len(failed) < len(rows)
        assert all(r["rte"] == "inf" and r["error"] for r in failed)
        keep = load(tmp_path / "keep" / "report.json")
        assert keep["used"] == 6 and keep["rte_mean"] is None
        assert keep["acc"] <= (len(rows) - len(failed)) / len(rows)

        assert run("bench", "--trials", 6, "--n-points", 24, "--drop-failures", "--out", tmp_path / "drop") == EXIT_FAILED_ROWS
        drop = load(tmp_path / "drop" / "report.json")
        ok = [r for r in rows if r["status"] == "ok"]
        assert drop["used"] == len(ok) and drop["failed"] == len(failed)
        assert drop["rte_mean"] == pytest.approx(np.mean([float(r["rte"]) for r in ok]), abs=1e-12)

    def test_aggregate_rules(self):
        rows = [
            dict(status="ok", rte=1.0, rre=1.0),
            dict(status="ok", rte=1.999, rre=4.999),
            dict(status="ok", rte=2.0, rre=1.0),
            dict(status="error", rte=math.inf, rre=math.inf),
        ]
        agg = aggregate(rows)
        assert agg["acc"] == 0.5 and agg["failed"] == 1 and agg["used"] == 4
        dropped = aggregate(rows, drop_failures=True)
        assert dropped["acc"] == pytest.approx(2 / 3) and dropped["rte_mean"] == pytest.approx((1 + 1.999 + 2) / 3)

    def test_run_bench_order_independent(self):
        cfg = RunConfig.from_flat({"bench.trials": 3, "scene.n_points": 2048})
        a = run_bench(cfg)
        b = run_bench(RunConfig.from_flat({"bench.trials": 3, "scene.n_points": 2048, "jobs": 3}))
        strip = lambda rows: [{k: v for k, v in r.items() if k != "timing"} for r in rows]  # noqa: E731
        assert strip(a) == strip(b)


class TestGradcheck:
    def test_all_pass(self, tmp_path, capsys):
        assert run("gradcheck", "--out", tmp_path) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert [ln.split()[0] for ln in lines] == list(gradcheck.CHECKS)
        assert all("max_rel_dev=" in ln and ln.endswith("PASS") for ln in lines)
        rep = load(tmp_path / "gradcheck.json")
        assert all(v["passed"] and v["max_rel_dev"] < v["tolerance"] for v in rep.values())

    def test_corrupted_check_named(self, tmp_path, capsys):
        assert run("gradcheck", "--corrupt", "aw_loss", "--out", tmp_path) == EXIT_GRADCHECK
        cap = capsys.readouterr()
        assert "aw_loss" in cap.err
        assert [ln for ln in cap.out.splitlines() if ln.endswith("FAIL")][0].startswith("aw_loss")

    @pytest.mark.parametrize("name", [c for c in gradcheck.CHECKS if c != "aw_loss"])
    def test_each_corruption_detected(self, name):
        (res,) = gradcheck.run_checks(0, corrupt=name, only=[name])
        assert not res.passed and res.max_rel_dev > res.tolerance


class TestConfig:
    def test_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 5, "scene.n_points": 2048, "scene.pixel_noise_sigma": 0.3}))
        assert run("register", "--config", cfg, "--seed", 6, "--out", tmp_path / "a") == EXIT_OK
        assert run("register", "--seed", 6, "--n-points", 2048, "--set", "scene.pixel_noise_sigma=0.3", "--out", tmp_path / "b") == EXIT_OK
        assert (tmp_path / "a" / "result.json").read_bytes() == (tmp_path / "b" / "result.json").read_bytes()

    def test_unknown_key(self, tmp_path):
        assert run("register", "--set", "scene.bogus=1", "--out", tmp_path) == EXIT_USAGE
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nope": 1}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "o") == EXIT_USAGE

    def test_invalid_values(self, tmp_path):
        assert run("synth", "--outliers", 1.5, "--out", tmp_path) == EXIT_USAGE
        assert run("bench", "--trials", 0, "--out", tmp_path) == EXIT_USAGE
        assert run("synth", "--set", "scene.misregister=maybe", "--out", tmp_path) == EXIT_USAGE

    def test_malformed_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert run("synth", "--config", cfg, "--out", tmp_path / "o") == EXIT_PARSE

    def test_merge_coerces_types(self):
        flat = merge_config({"scene.n_points": "100", "bench.drop_failures": "true", "match.sigma": 1})
        assert flat["scene.n_points"] == 100 and flat["bench.drop_failures"] is True and flat["match.sigma"] == 1.0
        with pytest.raises(ValueError):
            merge_config({"scene.n_points": 1.5})
