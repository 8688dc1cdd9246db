"""Tests for the line-oriented JSON files."""

import json

import pytest

from decoy.attack import targeted_bfa
from decoy.errors import FormatError
from decoy.formats import load_pattern, load_record, load_vulns, save_pattern, save_record, save_vulns
from decoy.obfuscate import generate_pattern


class TestVulnFiles:
    def test_model_list(self, model_vulns, tmp_path):
        path = tmp_path / "vulns-model.jsonl"
        save_vulns(model_vulns, path)
        loaded = load_vulns(path)
        assert loaded.entries == model_vulns.entries
        assert loaded.level == model_vulns.level

    def test_code_list_keeps_trials(self, code_vulns, tmp_path):
        path = tmp_path / "vulns-code.jsonl"
        save_vulns(code_vulns, path)
        loaded = load_vulns(path)
        assert loaded.trials == code_vulns.trials
        assert loaded.stats() == code_vulns.stats()

    def test_header_first(self, model_vulns, tmp_path):
        path = tmp_path / "vulns.jsonl"
        save_vulns(model_vulns, path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["format"] == "decoy-vulns"
        assert header["version"] == 1


class TestPatternFiles:
    def test_round_trip(self, image, model_vulns, tmp_path):
        pattern = generate_pattern(image, model_vulns, prob=0.5, seed=2)
        path = tmp_path / "pattern.jsonl"
        save_pattern(pattern, path)
        assert load_pattern(path) == pattern

    def test_unknown_record(self, tmp_path):
        path = tmp_path / "pattern.jsonl"
        header = {
            "format": "decoy-pattern",
            "version": 1,
            "prob": 0.3,
            "seed": 0,
            "retries": 0,
            "attempt_seed": 0,
            "image_digest": "",
        }
        path.write_text(json.dumps(header) + "\n" + json.dumps({"kind": "shuffle"}) + "\n")
        with pytest.raises(FormatError):
            load_pattern(path)


class TestRecordFiles:
    def test_round_trip(self, image, dataset, tmp_path):
        rec = targeted_bfa(image, dataset, 0, 2, budget=1, seed=4)
        path = tmp_path / "attack.jsonl"
        save_record(rec, path)
        loaded = load_record(path)
        assert loaded.flips == rec.flips
        assert loaded.targeted == (0, 2)
        assert loaded.achieved == rec.achieved
        assert loaded.image_digest == image.digest()

    def test_wrong_kind(self, model_vulns, tmp_path):
        path = tmp_path / "vulns.jsonl"
        save_vulns(model_vulns, path)
        with pytest.raises(FormatError):
            load_record(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "attack.jsonl"
        path.write_text(json.dumps({"format": "decoy-attack", "version": 9}) + "\n")
        with pytest.raises(FormatError):
            load_record(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "attack.jsonl"
        path.write_text("")
        with pytest.raises(FormatError):
            load_record(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "attack.jsonl"
        path.write_text('{"format": "decoy-attack", "version": 1}\nflip 0x10:3\n')
        with pytest.raises(FormatError):
            load_record(path)
