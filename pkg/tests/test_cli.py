from __future__ import annotations

import json
import socket
import subprocess
import sys

import pytest

from tagforge.cli import dispatch
from tagforge.planted import (make_interactions, make_world, save_world)
from tagforge.corpus import write_corpus, write_interactions


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    world = make_world(branching=(3, 3), n_items=150, seed=5)
    data = root / "data"
    data.mkdir()
    write_corpus(world.corpus, data / "corpus.jsonl")
    write_interactions(make_interactions(world, n_users=40, seed=6),
                       data / "interactions.jsonl")
    save_world(world, data / "world.json")
    config = {
        "run_dir": str(root / "run"),
        "backend": "mock",
        "seed": 5,
        "corpus_path": str(data / "corpus.jsonl"),
        "interactions_path": str(data / "interactions.jsonl"),
        "mock_world_path": str(data / "world.json"),
        "build": {"d_max": 2, "tau_split": 20},
        "beam_width": 20,
        "eval_mode": "sampled",
        "n_negatives": 30,
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    return root, config_path, world


def run(config_path, *argv):
    return dispatch([*argv, "--config", str(config_path)])


def test_full_pipeline_exit_codes_and_artifacts(workspace):
    root, config_path, _ = workspace
    for command in ("ingest", "build-vocab", "assign", "encode", "fit",
                    "recommend", "evaluate", "critique-eval",
                    "baseline-freeform", "report"):
        assert run(config_path, command) == 0, command
    run_dir = root / "run"
    for name in ("corpus.jsonl", "splits.jsonl", "vocab.json",
                 "vocab_items.jsonl", "refinement_logs.jsonl",
                 "build_report.json", "assignments.jsonl", "semids.jsonl",
                 "token_map.json", "fixed_slots.csv", "model.bin",
                 "ledger.jsonl", "config.json", "manifest.json"):
        assert (run_dir / name).exists(), name
    for name in ("ingest.json", "vocab_stats.json", "eval_sampled.json",
                 "critique_eval.json", "freeform.json", "summary.json",
                 "coverage_deltas.csv", "recommendations.jsonl"):
        assert (run_dir / "reports" / name).exists(), name


def test_critique_report_contains_both_arms(workspace):
    root, _, _ = workspace
    payload = json.loads((root / "run/reports/critique_eval.json").read_text())
    assert payload["simulator"] == "oracle"
    assert set(payload["vanilla"]["ndcg"]) == set(payload["constrained"]["ndcg"])
    for k, vanilla in payload["vanilla"]["ndcg"].items():
        assert payload["constrained"]["ndcg"][k] >= vanilla


def test_stages_are_idempotent(workspace, capsys):
    root, config_path, _ = workspace
    ledger_before = (root / "run/ledger.jsonl").read_text()
    assert run(config_path, "build-vocab") == 0
    assert run(config_path, "assign") == 0
    out = capsys.readouterr().out
    assert out.count("up to date, skipping") == 2
    assert (root / "run/ledger.jsonl").read_text() == ledger_before


def test_model_file_has_version_header(workspace):
    root, _, _ = workspace
    payload = json.loads((root / "run/model.bin").read_text())
    assert payload["format_version"] == 1


def test_build_report_n_semid_notation(workspace):
    root, _, _ = workspace
    payload = json.loads((root / "run/build_report.json").read_text())
    assert payload["n_semid"] == "2+1"


def test_semids_jsonl_schema(workspace):
    root, _, _ = workspace
    lines = (root / "run/semids.jsonl").read_text().strip().splitlines()
    row = json.loads(lines[0])
    assert set(row) == {"item_id", "tokens", "path_names"}
    assert all(isinstance(t, int) for t in row["tokens"])


def test_budget_interrupt_then_resume(tmp_path):
    world = make_world(branching=(3, 3), n_items=150, seed=7)
    data = tmp_path / "data"
    data.mkdir()
    write_corpus(world.corpus, data / "corpus.jsonl")
    save_world(world, data / "world.json")
    config = {
        "run_dir": str(tmp_path / "run"),
        "backend": "mock",
        "seed": 7,
        "corpus_path": str(data / "corpus.jsonl"),
        "mock_world_path": str(data / "world.json"),
        "build": {"d_max": 2, "tau_split": 20},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))

    code = dispatch(["build-vocab", "--config", str(config_path),
                     "--budget-max-calls", "170"])
    assert code == 3
    assert (tmp_path / "run/vocab.checkpoint.json").exists()
    assert not (tmp_path / "run/vocab.json").exists()

    assert dispatch(["resume", "--config", str(config_path)]) == 0
    report = json.loads((tmp_path / "run/build_report.json").read_text())
    refined = report["nodes_refined"]
    assert len(refined) == len(set(refined)) == 4  # root + 3 level-1 nodes
    vocab = json.loads((tmp_path / "run/vocab.json").read_text())
    depths = [n["depth"] for n in vocab["nodes"].values()]
    assert max(depths) == 2


def test_lock_file_blocks_second_writer(workspace, capsys):
    root, config_path, _ = workspace
    lock = root / "run" / ".lock"
    lock.write_text("12345")
    try:
        code = run(config_path, "report")
        captured = capsys.readouterr()
        assert code == 4
        assert captured.err.startswith("ERR:locked:")
    finally:
        lock.unlink()


def test_unknown_config_key_rejected(tmp_path, capsys):
    config_path = tmp_path / "bad.json"
    config_path.write_text(json.dumps({"run_dir": str(tmp_path / "r"),
                                       "no_such_option": 1}))
    code = dispatch(["report", "--config", str(config_path)])
    captured = capsys.readouterr()
    assert code == 2
    assert captured.err.startswith("ERR:config:")


def test_missing_stage_reports_machine_error(tmp_path, capsys):
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps({"run_dir": str(tmp_path / "run"),
                                       "backend": "mock",
                                       "mock_world_path": "nowhere.json"}))
    code = dispatch(["encode", "--config", str(config_path)])
    captured = capsys.readouterr()
    assert code == 1
    assert captured.err.startswith("ERR:stage:")


def test_non_gateway_commands_never_touch_network(workspace, monkeypatch):
    root, config_path, _ = workspace

    def refuse(*args, **kwargs):
        raise AssertionError("network connection attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    for command in ("encode", "fit", "evaluate", "report"):
        assert run(config_path, command) == 0


def test_console_entrypoint_help():
    out = subprocess.run([sys.executable, "-m", "tagforge", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "build-vocab" in out.stdout
