import csv
import json
from pathlib import Path

import pytest

from rangecast.cli import build_parser, main

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
SMALL = ["--height", "16", "--width", "32", "--r-max", "50"]


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    assert main(["synth", *SMALL, "--scans", "14", "--out", str(out)]) == 0
    return out


def test_synth_writes_scans_poses_and_manifest(seq):
    assert len(list((seq / "velodyne").glob("*.bin"))) == 14
    assert len((seq / "poses.txt").read_text().splitlines()) == 14
    manifest = json.loads((seq / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 0
    assert manifest["outputs"] == sorted(manifest["outputs"])
    assert "timestamp" not in manifest


def test_evaluate_baseline_summary(seq, tmp_path):
    rc = main(["evaluate", *SMALL, "--baseline", "identity", "--data", str(seq),
               "--poses", str(seq / "poses.txt"), "--out", str(tmp_path)])
    assert rc == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["step"] for r in rows] == ["1", "2", "3", "4", "5", "all"]
    assert all(int(r["count"]) == 5 for r in rows[:5])
    means = [float(r["mean"]) for r in rows[:5]]
    assert means == sorted(means)
    for name in ("per_sample.csv", "boxplot.csv", "timing.json", "manifest.json"):
        assert (tmp_path / name).is_file()


def test_train_twice_is_identical(seq, tmp_path):
    args = ["train", "--config", str(DESK_CFG), *SMALL, "--channels", "4,8", "--height-factors", "2,2",
            "--width-factors", "2,2", "--temporal-reductions", "1,1", "--epochs", "2", "--accumulation", "2",
            "--data", str(seq)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "last.pcfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cfg = json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]
    assert cfg["train"]["epochs"] == 2          # flag beats file
    assert cfg["train"]["lr"] == 1e-3           # file value
    assert cfg["architecture"]["channels"] == [4, 8]

    rc = main(["predict", "--checkpoint", str(tmp_path / "a" / "last.pcfm"), "--data", str(seq),
               "--out", str(tmp_path / "p")])
    assert rc == 0
    assert len(list((tmp_path / "p" / "predictions").glob("*.bin"))) == 5 * 5


def test_selftest_exit_code():
    assert main(["selftest"]) == 0


def test_usage_errors_exit_2(capsys):
    assert main(["nonsense"]) == 2
    assert main(["train", "--no-such-flag"]) == 2


@pytest.mark.parametrize("extra, field", [
    (["--lr", "-1"], "lr"),
    (["--height", "abc"], "height"),
    (["--channels", "8,16", "--height-factors", "2"], "architecture"),
])
def test_validation_errors_exit_1_and_name_the_field(seq, tmp_path, capsys, extra, field):
    rc = main(["train", "--data", str(seq), *SMALL, "--out", str(tmp_path), *extra])
    assert rc == 1
    assert field in capsys.readouterr().err


def test_missing_paths_and_pose_requirement(seq, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert "data" in capsys.readouterr().err
    assert main(["baseline", "--baseline", "constvel", "--data", str(seq), "--out", str(tmp_path)]) == 1
    assert "poses" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[train]\nlearning_rate = 1\n")
    assert main(["selftest", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_environment_roots(seq, tmp_path, monkeypatch):
    monkeypatch.setenv("RANGECAST_DATA_ROOT", str(seq.parent))
    monkeypatch.setenv("RANGECAST_OUTPUT_ROOT", str(tmp_path))
    assert main(["stats", *SMALL, "--data", seq.name, "--out", "st"]) == 0
    stats = json.loads((tmp_path / "st" / "stats.json").read_text())
    assert stats["scans"] == 14 and stats["samples"] == 5


def test_help_shows_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices["train"]
    text = sub.format_help()
    assert "(default: 0.001" in text and "(default: 16;" in text
