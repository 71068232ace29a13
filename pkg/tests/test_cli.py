import subprocess
import sys

import pytest
import yaml

from lifelong_pose.cli import main
from lifelong_pose.config import tiny


@pytest.fixture()
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    tiny().save(path)
    return path


def test_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "probes passed" in out


def test_usage_errors_exit_2():
    for argv in (["run", "--bogus"], ["frobnicate"], []):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"train": {"typo": 1}}))
    assert main(["run", "--config", str(tmp_path / "bad.yaml")]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["report", "--state", str(tmp_path)]) == 1


def test_run_twice_gives_identical_reports(tiny_yaml, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(tiny_yaml), "--out", str(out_a)]) == 0
    assert main(["run", "--config", str(tiny_yaml), "--out", str(out_b)]) == 0
    (run_a,), (run_b,) = list(out_a.glob("run-*")), list(out_b.glob("run-*"))
    assert (run_a / "reports.jsonl").read_text() == (run_b / "reports.jsonl").read_text()
    assert main(["run", "--config", str(tiny_yaml), "--out", str(out_a)]) == 1
    assert main(["run", "--config", str(tiny_yaml), "--out", str(out_a), "--force"]) == 0
    capsys.readouterr()
    assert main(["report", "--state", str(run_a), "--format", "records"]) == 0
    assert capsys.readouterr().out == (run_a / "reports.jsonl").read_text()


def test_file_based_workflow(tiny_yaml, tmp_path, capsys):
    data = tmp_path / "data"
    cfg = ["--config", str(tiny_yaml)]
    assert main(["synth", *cfg, "--out", str(data)]) == 0
    assert main(["pretrain", *cfg, "--source", str(data / "source.train.2d.pose"), "--out", str(tmp_path / "p0")]) == 0
    assert main(["adapt", *cfg, "--state", str(tmp_path / "p0"), "--target", str(data / "tg1.train.2d.pose"),
                 "--out", str(tmp_path / "p1")]) == 0
    assert main(["eval", "--state", str(tmp_path / "p1"), "--domains", str(data / "tg1.eval.2d.pose"),
                 "--format", "records", "--out", str(tmp_path / "e.jsonl")]) == 0
    assert '"domain": "tg1"' in (tmp_path / "e.jsonl").read_text()
    assert main(["diffuse-train", *cfg, "--data", str(data / "tg1.train.2d.pose"), "--out", str(tmp_path / "s")]) == 0
    assert main(["diffuse-sample", *cfg, "--sampler", str(tmp_path / "s"), "--n", "4", "--steps", "5",
                 "--out", str(tmp_path / "x.2d.pose")]) == 0
    assert (tmp_path / "x.2d.pose").exists()


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "lifelong_pose.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "diffuse-sample" in r.stdout
