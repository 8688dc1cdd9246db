"""Tests for Decoy CLI commands."""

import json

import pytest
from typer.testing import CliRunner

from decoy.cli import app

runner = CliRunner()

TINY_YAML = """\
name: cli
seed: 5
data:
  n_per_class: 15
network:
  layers: [16, 16, 4]
  vm_layers: [-1]
train:
  epochs: 15
search:
  k: 5
  step_budget: 20000
obfuscation:
  verify: false
attack:
  budget: 2
  targeted_budget: 1
rotation:
  instances: 2
"""

RUN_YAML = """\
name: cli-run
seed: 5
data:
  n_per_class: 15
network:
  layers: [16, 16, 4]
  vm_layers: []
train:
  epochs: 15
search:
  levels: [model]
  k: 5
obfuscation:
  verify: false
attack:
  budget: 2
  targeted: false
adaptive:
  enabled: false
trials:
  trials: 1
  random_trials: 1
  random_flips: 2
  overhead_trials: 1
  overhead_probs: [0.5]
"""


def invoke(workdir, *args):
    return runner.invoke(app, ["--config", str(workdir / "tiny.yaml"), "--out", str(workdir), *args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A directory holding a model, image and both vulnerability lists."""
    path = tmp_path_factory.mktemp("cli")
    (path / "tiny.yaml").write_text(TINY_YAML)
    steps = [
        ["data", "gen"],
        ["data", "train"],
        ["image", "build", "--model", str(path / "model.bann")],
        ["search", "model", "--image", str(path / "image.barm")],
        ["search", "code", "--image", str(path / "image.barm")],
    ]
    for step in steps:
        result = invoke(path, *step)
        assert result.exit_code == 0, result.output
    return path


class TestVersion:
    def test_version(self):
        result = runner.invoke(app, ["version"])
        assert result.exit_code == 0
        assert "Decoy" in result.output

    def test_info(self):
        result = runner.invoke(app, ["info"])
        assert result.exit_code == 0
        assert "Available Commands" in result.output


class TestData:
    def test_gen_previews_without_writing(self, tmp_path):
        result = runner.invoke(app, ["--out", str(tmp_path), "--seed", "3", "data", "gen"])
        assert result.exit_code == 0, result.output
        assert "seed 3" in result.output
        assert not list(tmp_path.iterdir())

    def test_missing_config(self, tmp_path):
        result = runner.invoke(app, ["--config", str(tmp_path / "missing.yaml"), "data", "gen"])
        assert result.exit_code == 2
        assert "Config error" in result.output


class TestImage:
    def test_built(self, workdir):
        assert (workdir / "model.bann").exists()
        assert (workdir / "image.barm").exists()

    def test_inspect(self, workdir):
        result = invoke(workdir, "image", "inspect", str(workdir / "image.barm"), "--disasm")
        assert result.exit_code == 0
        assert "WEIGHTS" in result.output
        assert "HALT" in result.output


class TestSearch:
    def test_lists_written(self, workdir):
        model = (workdir / "vulns-model.jsonl").read_text().splitlines()
        assert json.loads(model[0])["level"] == "model"
        assert len(model) == 6
        code = (workdir / "vulns-code.jsonl").read_text().splitlines()
        assert json.loads(code[0])["level"] == "code"

    def test_missing_image(self, workdir):
        result = invoke(workdir, "search", "model", "--image", str(workdir / "nope.barm"))
        assert result.exit_code == 1


class TestObfuscateAndAttack:
    def test_apply_then_replay(self, workdir):
        result = invoke(
            workdir,
            "obfuscate",
            "apply",
            "--image",
            str(workdir / "image.barm"),
            "--vulns",
            str(workdir / "vulns-model.jsonl"),
            "--vulns",
            str(workdir / "vulns-code.jsonl"),
        )
        assert result.exit_code == 0, result.output
        assert (workdir / "image.obf.barm").exists()

        result = invoke(workdir, "obfuscate", "inspect", str(workdir / "pattern.jsonl"))
        assert result.exit_code == 0
        assert "nops" in result.output

        result = invoke(workdir, "attack", "untargeted", "--image", str(workdir / "image.barm"))
        assert result.exit_code == 0, result.output
        record = str(workdir / "attack-untargeted.jsonl")

        obf = str(workdir / "image.obf.barm")
        result = invoke(workdir, "attack", "replay", "--image", obf, "--record", record)
        assert result.exit_code == 0, result.output
        assert "Replayed" in result.output

    def test_targeted_same_classes(self, workdir):
        result = invoke(
            workdir, "attack", "targeted", "--image", str(workdir / "image.barm"), "-s", "1", "-t", "1"
        )
        assert result.exit_code == 1

    def test_adaptive_bad_level(self, workdir):
        image = str(workdir / "image.barm")
        args = ["attack", "adaptive", "--image", image, "--record", image, "--level", "cache"]
        result = invoke(workdir, *args)
        assert result.exit_code == 1
        assert "Unknown level" in result.output


class TestHarness:
    def test_rotate(self, workdir):
        result = invoke(
            workdir,
            "harness",
            "rotate",
            "--image",
            str(workdir / "image.barm"),
            "--vulns",
            str(workdir / "vulns-model.jsonl"),
            "--interval",
            "100",
            "--requests",
            "200",
        )
        assert result.exit_code == 0, result.output
        assert "2 regenerations" in result.output

    def test_run_and_report(self, tmp_path):
        config = tmp_path / "run.yaml"
        config.write_text(RUN_YAML)
        result = runner.invoke(app, ["--config", str(config), "--out", str(tmp_path), "harness", "run"])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "report.jsonl").exists()
        assert (tmp_path / "artifacts" / "image.barm").exists()

        report = str(tmp_path / "report.jsonl")
        result = runner.invoke(app, ["harness", "report", report, "--csv", str(tmp_path / "again.csv")])
        assert result.exit_code == 0
        assert (tmp_path / "again.csv").read_text() == (tmp_path / "report.csv").read_text()

    def test_report_not_a_report(self, tmp_path):
        path = tmp_path / "bogus.jsonl"
        path.write_text('{"type": "row"}\n')
        result = runner.invoke(app, ["harness", "report", str(path)])
        assert result.exit_code == 1
