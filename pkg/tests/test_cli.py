import json
import shutil
from pathlib import Path

import pytest

from tapellm.cli import main
from tapellm.model import load_spec
from tapellm.tokeniser import load_vocab

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(autouse=True)
def _reports_to_tmp(tmp_path, monkeypatch):
    monkeypatch.setenv("TAPELLM_OUT_DIR", str(tmp_path))


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestRun:
    def test_expectation_met(self, capsys):
        code, out, _ = run_cli(capsys, "run", SCENARIOS / "strawberry-A.json")
        assert code == 0 and out == "3\n"

    def test_expectation_missed_writes_report(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("TAPELLM_OUT_DIR", str(tmp_path))
        code, out, err = run_cli(capsys, "run", SCENARIOS / "strawberry-A-no-counting.json")
        assert code == 1 and out == "2\n"
        report = tmp_path / "strawberry-A-no-counting.report.json"
        assert str(report) in err
        assert json.loads(report.read_text())["attributed_phase"] == "Tokenisation"

    def test_trace_has_one_line_per_step(self, capsys, tmp_path):
        trace = tmp_path / "out.jsonl"
        code, _, _ = run_cli(capsys, "run", SCENARIOS / "random-greedy.json", "--trace", trace)
        lines = trace.read_text().splitlines()
        assert code == 0 and lines
        assert [json.loads(line)["step"] for line in lines] == list(range(len(lines)))

    def test_flag_overrides_file(self, capsys):
        code, out, _ = run_cli(capsys, "run", SCENARIOS / "strawberry-B-no-counting.json", "--with-counting")
        assert code == 0 and out == "3\n"

    def test_byte_identical_artifacts(self, capsys, tmp_path):
        outs = []
        for k in range(2):
            t, r = tmp_path / f"t{k}.jsonl", tmp_path / f"r{k}.json"
            code, out, _ = run_cli(capsys, "run", SCENARIOS / "random-sample.json", "--trace", t, "--report", r)
            outs.append((out, t.read_bytes(), r.read_bytes()))
        assert outs[0] == outs[1]

    def test_beam_scenario(self, capsys):
        code, out, _ = run_cli(capsys, "run", SCENARIOS / "random-beam.json")
        assert code == 0 and out.strip()

    def test_bad_file(self, capsys, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"name": "x", "prompt": "a", "decode": "nucleus"}')
        code, _, err = run_cli(capsys, "run", p)
        assert code == 2 and "decode" in err

    def test_relative_spec_file(self, capsys, tmp_path):
        assert run_cli(capsys, "gen-spec", "-o", tmp_path / "s.json", "--vocab-size", "8")[0] == 0
        (tmp_path / "sc.json").write_text(json.dumps({
            "name": "f", "prompt_ids": [0, 3], "vocab": {"synthetic": 8}, "model": {"file": "s.json"},
            "budgets": {"max_tokens": 2}}))
        code, out, _ = run_cli(capsys, "run", tmp_path / "sc.json")
        assert code == 0


class TestDemos:
    def test_strawberry_a_counting(self, capsys):
        code, out, _ = run_cli(capsys, "demo-strawberry", "--regime", "A", "--with-counting")
        assert "answer: 3" in out and "report: none" in out

    def test_strawberry_b_counting(self, capsys):
        assert "answer: 3" in run_cli(capsys, "demo-strawberry", "--regime", "B", "--with-counting")[1]

    def test_strawberry_a_without(self, capsys):
        out = run_cli(capsys, "demo-strawberry", "--regime", "A")[1]
        assert "Tokenisation" in out and "boundary_exposure[Strawberry] = 0.0" in out

    def test_embedding_with_stack(self, capsys):
        out = run_cli(capsys, "demo-embedding", "--depth", "2", "--with-stack")[1]
        assert "needs-verb" in out and "'cat'" in out and "fled" in out

    def test_embedding_depth_zero(self, capsys):
        for extra in ([], ["--with-stack"]):
            out = run_cli(capsys, "demo-embedding", "--depth", "0", *extra)[1]
            assert "complete" in out and "none" in out

    def test_baseline_suite_below_one(self, capsys):
        out = run_cli(capsys, "demo-embedding", "--depth", "3", "--window", "4", "--suite", "--max-depth", "3",
                      "--per-depth", "12")[1]
        depth3 = [line for line in out.splitlines() if line.strip().startswith("depth  3")][0]
        assert float(depth3.split()[-1]) < 1.0

    def test_suite_parallel_matches_serial(self, capsys):
        args = ("demo-embedding", "--suite", "--with-stack", "--max-depth", "4", "--per-depth", "8")
        assert run_cli(capsys, *args)[1] == run_cli(capsys, *args, "--jobs", "2")[1]


class TestGenerators:
    def test_gen_spec_deterministic(self, capsys, tmp_path):
        for name in ("a", "b"):
            run_cli(capsys, "gen-spec", "-o", tmp_path / f"{name}.json", "--seed", "3", "--heads", "2")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        load_spec(tmp_path / "a.json")

    def test_gen_spec_rejects_bad_dims(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "gen-spec", "-o", tmp_path / "x.json", "--heads", "3", "--d-model", "8")
        assert code == 2 and "heads" in err

    def test_gen_vocab(self, capsys, tmp_path):
        run_cli(capsys, "gen-vocab", "-o", tmp_path / "v.json", "--regime", "A")
        vocab, rules = load_vocab(tmp_path / "v.json")
        assert b"Strawberry" in vocab.ids


def test_diagnose_saved_trace(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    run_cli(capsys, "run", SCENARIOS / "strawberry-B-no-counting.json", "--trace", trace)
    code, out, _ = run_cli(capsys, "diagnose", trace, "--scenario", SCENARIOS / "strawberry-B-no-counting.json",
                           "--report", tmp_path / "r.json")
    assert code == 0 and "legality violations: 0" in out and "Tokenisation" in out
