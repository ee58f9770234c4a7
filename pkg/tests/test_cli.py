import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from headfuse.cli import main
from headfuse.fusion import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == 0 else None)


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_writes_scenes_and_results(self, tmp_path, capsys):
        code, summary = run(capsys, "simulate", "--scenes", 3, "--seed", 4, "--out", tmp_path / "a")
        assert code == 0 and summary["scenes"] == 3
        results = sorted((tmp_path / "a" / "results").glob("*.json"))
        assert len(results) == 3 and len(list((tmp_path / "a" / "scenes").glob("*.yaml"))) == 3
        first = json.loads(results[0].read_text())
        assert set(first) == {"no_fusion", "late_fusion", "hetero_head"}

    def test_byte_identical_reruns(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "simulate", "--scenes", 2, "--seed", 9, "--out", tmp_path / name)[0] == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_scenario_file_round_trip(self, tmp_path, capsys):
        run(capsys, "simulate", "--scenes", 1, "--seed", 5, "--out", tmp_path / "a")
        scene = tmp_path / "a" / "scenes" / "scene_0000.yaml"
        code, _ = run(capsys, "simulate", "--scenario", scene, "--out", tmp_path / "b")
        assert code == 0
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_missing_scenario_exits_2(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--scenario", tmp_path / "nope.yaml", "--out", tmp_path / "o")[0] == 2

    def test_unknown_strategy_exits_2(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--strategies", "telepathy", "--out", tmp_path / "o")[0] == 2

    def test_homo_head_needs_checkpoint(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--strategies", "homo_head", "--out", tmp_path / "o")[0] == 2

    def test_overwrite_guard(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert run(capsys, "simulate", "--scenes", 1, "--out", out)[0] == 0
        assert run(capsys, "simulate", "--scenes", 1, "--out", out)[0] == 2
        assert run(capsys, "simulate", "--scenes", 1, "--out", out, "--overwrite")[0] == 0

    @pytest.mark.slow
    def test_fifty_scenes(self, tmp_path, capsys):
        code, summary = run(capsys, "simulate", "--scenes", 50, "--seed", 1, "--jobs", 2, "--out", tmp_path / "o")
        assert code == 0 and summary["result_files"] == 50
        assert len(list((tmp_path / "o" / "results").glob("*.json"))) == 50


class TestConfig:
    def test_file_then_flag_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("scenes: 2\nseed: 3\nstrategies: [no_fusion]\n")
        code, summary = run(capsys, "simulate", "--config", cfg, "--out", tmp_path / "a")
        assert code == 0 and summary["scenes"] == 2 and summary["strategies"] == ["no_fusion"]
        code, summary = run(capsys, "simulate", "--config", cfg, "--scenes", 1, "--out", tmp_path / "b")
        assert summary["scenes"] == 1
        # same seed from the file: the first scene matches
        a = (tmp_path / "a" / "scenes" / "scene_0000.yaml").read_text()
        assert a == (tmp_path / "b" / "scenes" / "scene_0000.yaml").read_text()

    def test_example_config(self, tmp_path, capsys):
        example = Path(__file__).parent.parent / "configs" / "example.yaml"
        code, summary = run(capsys, "eval", "--config", example, "--scenes", 1, "--jobs", 1, "--out", tmp_path)
        assert code == 0 and summary["rows"] == 3

    def test_env_seed_fallback(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("HEADFUSE_SEED", "7")
        run(capsys, "simulate", "--scenes", 1, "--strategies", "no_fusion", "--out", tmp_path / "env")
        monkeypatch.delenv("HEADFUSE_SEED")
        run(capsys, "simulate", "--scenes", 1, "--strategies", "no_fusion", "--seed", 7, "--out", tmp_path / "flag")
        run(capsys, "simulate", "--scenes", 1, "--strategies", "no_fusion", "--seed", 8, "--out", tmp_path / "other")
        assert tree(tmp_path / "env") == tree(tmp_path / "flag") != tree(tmp_path / "other")

    def test_bad_env_seed(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("HEADFUSE_SEED", "seven")
        assert run(capsys, "simulate", "--out", tmp_path / "o")[0] == 2

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("scenez: 2\n")
        assert run(capsys, "simulate", "--config", cfg, "--out", tmp_path / "o")[0] == 2

    def test_missing_config(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--config", tmp_path / "none.yaml", "--out", tmp_path / "o")[0] == 2

    def test_bad_counts(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--scenes", 0, "--out", tmp_path / "o")[0] == 2


class TestBandwidth:
    def test_preset(self, tmp_path, capsys):
        code, summary = run(capsys, "bandwidth", "--preset", "v2v4real_like", "--out", tmp_path)
        assert code == 0 and summary["ratio"] == 0.0625
        assert summary["head"] == pytest.approx(41.6, rel=0.02)
        for ext in ("csv", "json", "png"):
            assert (tmp_path / f"v2v4real_like.{ext}").stat().st_size > 0

    def test_all_presets(self, tmp_path, capsys):
        code, summary = run(capsys, "bandwidth", "--out", tmp_path)
        assert code == 0 and set(summary["presets"]) == {"v2v4real_like", "opv2v_like"}

    def test_unknown_preset(self, tmp_path, capsys):
        assert run(capsys, "bandwidth", "--preset", "kitti", "--out", tmp_path)[0] == 2


class TestEvalRunSweep:
    def test_eval_single_strategy(self, tmp_path, capsys):
        code, summary = run(capsys, "eval", "--strategies", "no_fusion", "--scenes", 2, "--out", tmp_path)
        assert code == 0 and summary["rows"] == 1
        rows = list(csv.DictReader((tmp_path / "table.csv").open()))
        assert [r["strategy"] for r in rows] == ["no_fusion"]
        assert (tmp_path / "table.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_run_episodes(self, tmp_path, capsys):
        code, summary = run(capsys, "run", "--strategies", "hetero_head", "--scenes", 2, "--codec", "zlib",
                            "--quantize", "--out", tmp_path)
        assert code == 0 and summary["episodes"] == 2
        ep = json.loads((tmp_path / "episode_0001.json").read_text())
        assert ep["strategy"] == "hetero_head"
        assert 0 < ep["frames"][0]["compressed_bytes"] < ep["frames"][0]["message_bytes"]

    def test_run_needs_one_strategy(self, tmp_path, capsys):
        assert run(capsys, "run", "--strategies", "no_fusion,hetero_head", "--out", tmp_path)[0] == 2

    def test_sweep(self, tmp_path, capsys):
        code, summary = run(capsys, "sweep", "--scenes", 3, "--out", tmp_path)
        assert code == 0 and summary["zero_fp_threshold"] <= 1.0
        rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
        fps = [int(r["fp_count"]) for r in rows]
        assert fps == sorted(fps, reverse=True)
        assert (tmp_path / "sweep.png").stat().st_size > 0


class TestTrain:
    def test_train_then_homo_head(self, tmp_path, capsys):
        code, summary = run(capsys, "train", "--epochs", 5, "--train-scenes", 1, "--out", tmp_path / "t")
        assert code == 0 and summary["final_loss"] < summary["initial_loss"]
        ckpt = tmp_path / "t" / "complementary.ckpt"
        load_checkpoint(ckpt.read_bytes())
        lines = (tmp_path / "t" / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 7
        code, summary = run(capsys, "eval", "--strategies", "homo_head", "--checkpoint", ckpt, "--homogeneous",
                            "--scenes", 1, "--out", tmp_path / "e")
        assert code == 0 and summary["table"][0]["strategy"] == "homo_head"

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert run(capsys, "eval", "--strategies", "homo_head", "--checkpoint", bad, "--out", tmp_path / "o")[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "headfuse", "bandwidth", "--preset", "opv2v_like", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ratio"] == 0.0625
