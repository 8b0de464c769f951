"""End-to-end command-line runs: artifact layout, reproducibility,
config-file precedence, and exit codes."""

import csv
import json
from pathlib import Path

import pytest

from distilldet.checkpoint import load_checkpoint
from distilldet.cli import main
from distilldet.data import read_dataset
from distilldet.train import LOG_COLUMNS


def run_cli(*argv):
    """main() with argparse SystemExit folded into the return code."""
    try:
        return main(list(argv))
    except SystemExit as e:
        return int(e.code or 0)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny dataset -> teacher -> distilled student, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    dirs = {
        "data": root / "data",
        "val": root / "val",
        "teacher": root / "teacher",
        "student": root / "student",
        "root": root,
    }
    assert run_cli(
        "gen-data", "--num-images", "24", "--image-size", "64",
        "--seed", "5", "--out", str(dirs["data"]),
    ) == 0
    assert run_cli(
        "gen-data", "--num-images", "8", "--image-size", "64",
        "--seed", "6", "--out", str(dirs["val"]),
    ) == 0
    assert run_cli(
        "train", "--data", str(dirs["data"]), "--out", str(dirs["teacher"]),
        "--preset", "wide", "--epochs", "2", "--batch-size", "8",
        "--decay-epochs", "", "--seed", "1", "--val-data", str(dirs["val"]),
    ) == 0
    assert run_cli(
        "distill", "--data", str(dirs["data"]), "--out", str(dirs["student"]),
        "--teacher", str(dirs["teacher"] / "checkpoint"),
        "--epochs", "2", "--batch-size", "8", "--decay-epochs", "",
        "--seed", "2", "--num-proposals", "16",
    ) == 0
    return dirs


class TestGenData:
    def test_layout_and_manifest(self, pipeline):
        data = pipeline["data"]
        assert (data / "annotations.json").exists()
        assert len(list(data.glob("img_*.png"))) == 24
        run = json.loads((data / "run_manifest.json").read_text())
        assert run["command"] == "gen-data"
        assert run["seed"] == 5
        assert run["config"]["num_images"] == 24
        # every artifact except the run manifest itself is checksummed
        files = {
            str(p.relative_to(data))
            for p in data.rglob("*")
            if p.is_file() and p.name != "run_manifest.json"
        }
        assert set(run["artifact_checksums"]) == files

    def test_dataset_is_loadable(self, pipeline):
        samples = read_dataset(pipeline["data"])
        assert len(samples) == 24

    def test_regeneration_is_bit_identical(self, pipeline, tmp_path):
        again = tmp_path / "again"
        assert run_cli(
            "gen-data", "--num-images", "24", "--image-size", "64",
            "--seed", "5", "--out", str(again),
        ) == 0
        src = pipeline["data"]
        a = json.loads((src / "run_manifest.json").read_text())
        b = json.loads((again / "run_manifest.json").read_text())
        assert a["artifact_checksums"] == b["artifact_checksums"]
        assert (src / "annotations.json").read_bytes() == (again / "annotations.json").read_bytes()


class TestTrain:
    def test_artifacts(self, pipeline):
        out = pipeline["teacher"]
        assert (out / "checkpoint" / "params.bin").exists()
        assert (out / "checkpoint" / "manifest.json").exists()
        with open(out / "train_log.csv") as fh:
            header = fh.readline().strip()
        assert header == ",".join(LOG_COLUMNS)
        run = json.loads((out / "run_manifest.json").read_text())
        assert run["command"] == "train"
        assert run["config"]["preset"] == "wide"
        assert run["inputs"]["data"] == str(pipeline["data"])

    def test_val_map_recorded(self, pipeline):
        _, _, meta = load_checkpoint(pipeline["teacher"] / "checkpoint")
        assert 0.0 <= meta["val_map50"] <= 1.0

    def test_rerun_is_bit_identical(self, pipeline, tmp_path):
        first = tmp_path / "r1"
        second = tmp_path / "r2"
        argv = [
            "train", "--data", str(pipeline["data"]),
            "--epochs", "1", "--batch-size", "8", "--decay-epochs", "",
            "--seed", "3",
        ]
        assert run_cli(*argv, "--out", str(first)) == 0
        assert run_cli(*argv, "--out", str(second)) == 0
        for rel in ("checkpoint/params.bin", "checkpoint/manifest.json", "train_log.csv"):
            assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
        a = json.loads((first / "run_manifest.json").read_text())
        b = json.loads((second / "run_manifest.json").read_text())
        a.pop("wall_time_s"), b.pop("wall_time_s")
        assert a == b

    def test_bad_decay_epochs_is_config_error(self, pipeline, tmp_path):
        code = run_cli(
            "train", "--data", str(pipeline["data"]), "--out", str(tmp_path / "x"),
            "--epochs", "2", "--decay-epochs", "8,11",
        )
        assert code == 2

    def test_missing_data_dir(self, tmp_path):
        code = run_cli(
            "train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x"),
        )
        assert code == 3


class TestDistill:
    def test_checkpoint_stores_adapt_params(self, pipeline):
        manifest = json.loads(
            (pipeline["student"] / "checkpoint" / "manifest.json").read_text()
        )
        names = [p["name"] for p in manifest["params"]]
        assert any(n.startswith("adapt.") for n in names)
        assert any(n.startswith("detector.") for n in names)
        run = json.loads((pipeline["student"] / "run_manifest.json").read_text())
        assert run["command"] == "distill"
        assert run["config"]["train"]["distill"]["neck_mode"] == "decoupled"

    def test_narrow_teacher_is_exit_5(self, pipeline, tmp_path):
        narrow = tmp_path / "narrow"
        assert run_cli(
            "train", "--data", str(pipeline["val"]), "--out", str(narrow),
            "--epochs", "1", "--batch-size", "8", "--decay-epochs", "",
        ) == 0
        code = run_cli(
            "distill", "--data", str(pipeline["val"]), "--out", str(tmp_path / "x"),
            "--teacher", str(narrow / "checkpoint"), "--preset", "wide",
            "--epochs", "1", "--decay-epochs", "",
        )
        assert code == 5

    def test_missing_teacher_is_exit_3(self, pipeline, tmp_path):
        code = run_cli(
            "distill", "--data", str(pipeline["data"]), "--out", str(tmp_path / "x"),
            "--teacher", str(tmp_path / "nowhere"),
            "--epochs", "1", "--decay-epochs", "",
        )
        assert code == 3


class TestEval:
    def test_report_files(self, pipeline, tmp_path):
        out = tmp_path / "eval"
        assert run_cli(
            "eval", "--checkpoint", str(pipeline["teacher"] / "checkpoint"),
            "--data", str(pipeline["val"]), "--out", str(out),
        ) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"num_images", "map50", "map_coco", "per_threshold"}
        assert summary["num_images"] == 8
        with open(out / "map.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {"class", "iou_threshold", "ap"} == set(rows[0])

    def test_missing_checkpoint(self, pipeline, tmp_path):
        code = run_cli(
            "eval", "--checkpoint", str(tmp_path / "nope"),
            "--data", str(pipeline["val"]), "--out", str(tmp_path / "x"),
        )
        assert code == 3


class TestAnalyze:
    def test_errors_report(self, pipeline, tmp_path):
        out = tmp_path / "err"
        assert run_cli(
            "analyze", "errors",
            "--checkpoint", str(pipeline["teacher"] / "checkpoint"),
            "--data", str(pipeline["val"]), "--out", str(out),
        ) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["totals"]) == {"Cor", "Loc", "Sim", "Oth", "BG", "FN"}
        assert (out / "errors.csv").exists()

    def test_grad_norms_report(self, pipeline, tmp_path):
        out = tmp_path / "gn"
        assert run_cli(
            "analyze", "grad-norms",
            "--checkpoint", str(pipeline["teacher"] / "checkpoint"),
            "--data", str(pipeline["val"]), "--out", str(out),
            "--num-images", "3",
        ) == 0
        with open(out / "grad_norms.csv") as fh:
            rows = list(csv.reader(fh))
        assert [r[0] for r in rows[1:]] == ["obj", "bg"]

    def test_distance_report_uses_stored_adapt(self, pipeline, tmp_path):
        out = tmp_path / "dist"
        assert run_cli(
            "analyze", "distance",
            "--checkpoint", str(pipeline["student"] / "checkpoint"),
            "--teacher", str(pipeline["teacher"] / "checkpoint"),
            "--data", str(pipeline["val"]), "--out", str(out),
            "--num-images", "4",
        ) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["adapted"] is True
        assert summary["num_images"] == 4
        with open(out / "channel_distance.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["channel", "d_obj", "d_bg"]
        assert len(rows) > 1

    def test_sweep_report(self, pipeline, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli(
            "analyze", "sweep",
            "--data", str(pipeline["val"]), "--val-data", str(pipeline["val"]),
            "--teacher", str(pipeline["teacher"] / "checkpoint"),
            "--out", str(out), "--parameter", "gamma", "--values", "4.0",
            "--seeds", "0", "--epochs", "1", "--batch-size", "8",
            "--decay-epochs", "", "--num-proposals", "16",
        ) == 0
        with open(out / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["seed"] for r in rows] == ["0", "mean"]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["parameter"] == "gamma"


class TestConfigFile:
    def test_flags_beat_config_beats_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"image-size": 256, "seed": 9}))
        out = tmp_path / "data"
        assert run_cli(
            "gen-data", "--num-images", "4", "--config", str(cfg),
            "--image-size", "96", "--out", str(out),
        ) == 0
        run = json.loads((out / "run_manifest.json").read_text())
        assert run["config"]["image_size"] == 96  # flag wins
        assert run["config"]["seed"] == 9  # config beats default

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"no-such-flag": 1}))
        code = run_cli(
            "gen-data", "--num-images", "4", "--config", str(cfg),
            "--out", str(tmp_path / "x"),
        )
        assert code == 2

    def test_missing_config_file(self, tmp_path):
        code = run_cli(
            "gen-data", "--num-images", "4",
            "--config", str(tmp_path / "absent.json"),
            "--out", str(tmp_path / "x"),
        )
        assert code == 3

    def test_non_object_config_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        code = run_cli(
            "gen-data", "--num-images", "4", "--config", str(cfg),
            "--out", str(tmp_path / "x"),
        )
        assert code == 2

    def test_malformed_json_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        code = run_cli(
            "gen-data", "--num-images", "4", "--config", str(cfg),
            "--out", str(tmp_path / "x"),
        )
        assert code == 2


class TestParser:
    def test_unknown_flag_is_exit_2(self):
        assert run_cli("train", "--bogus") == 2

    def test_no_command_is_exit_2(self):
        assert run_cli() == 2

    def test_version_prints(self, capsys):
        code = run_cli("--version")
        assert code == 0
        assert capsys.readouterr().out.strip()
