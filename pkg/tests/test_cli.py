from __future__ import annotations

import json
from pathlib import Path

import pytest

from trajcompact.cli import main, run_experiment, threshold_grid, validate_config
from trajcompact.workloads import WorkloadParams, WorkloadScript, generate_workload

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, **over):
    cfg = {
        "name": "t",
        "workload": {"generator": {"queries": 10, "turns": 12, "compaction_latency_s": 3.0}},
        "modes": ["sync", "slipstream"],
        "thresholds": [1500],
        "threshold_grid": True,
        "seed": 3,
        "trace_dir": "traces",
    }
    cfg.update(over)
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(cfg))
    return p


def test_threshold_grid():
    assert threshold_grid(6000) == [4000, 6000, 8000]


def test_grid_cardinality(tmp_path):
    assert run_experiment(write_config(tmp_path)) == 0
    files = sorted((tmp_path / "traces").glob("*.jsonl"))
    assert len(files) == 60
    assert files[0].name == "slipstream__T1000__q000.jsonl"


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        assert run_experiment(write_config(d)) == 0
    fa = {p.name: p.read_bytes() for p in (a / "traces").glob("*.jsonl")}
    fb = {p.name: p.read_bytes() for p in (b / "traces").glob("*.jsonl")}
    assert fa == fb


def test_parallel_matches_sequential(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert run_experiment(write_config(a)) == 0
    assert run_experiment(write_config(b), parallel=True) == 0
    for p in (a / "traces").glob("*.jsonl"):
        assert p.read_bytes() == (b / "traces" / p.name).read_bytes()


def test_validate_diagnostics(tmp_path):
    diags = validate_config({"workload": "missing.json", "accept_threshold": 11, "modes": ["eager"], "thresholds": [0]}, tmp_path)
    text = "\n".join(diags)
    assert "accept_threshold" in text and "missing.json" in text and "eager" in text and "threshold" in text
    assert validate_config(tmp_path / "nope.json") == [f"config: file not found: {tmp_path / 'nope.json'}"]
    assert any("unknown field" in d for d in validate_config({"workload": {"generator": {}}, "colour": 1}))
    assert any("model" in d for d in validate_config({"workload": {"generator": {}}, "backend": "http://x"}))


def test_reference_config_is_valid():
    assert validate_config(CONFIGS / "reference.json") == []


def test_config_error_exit_code(tmp_path, capsys):
    assert run_experiment(write_config(tmp_path, accept_threshold=11)) == 2
    assert "accept_threshold" in capsys.readouterr().err


def test_cli_validate_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path, modes=["slipstream"], threshold_grid=False)
    assert main(["validate", str(cfg)]) == 0
    assert main(["run", "--config", str(cfg), "--trace-out", str(tmp_path / "out")]) == 0
    out = tmp_path / "report.json"
    assert main(["report", "--traces", str(tmp_path / "out" / "*.jsonl"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["groups"][0]["mode"] == "slipstream" and rep["groups"][0]["queries"] == 10
    capsys.readouterr()
    assert main(["report", "--traces", str(tmp_path / "none*.jsonl")]) == 1


def test_cli_single_run_from_script(tmp_path):
    wl = tmp_path / "w.json"
    generate_workload(WorkloadParams(queries=2, turns=10), seed=1).dump(wl)
    faults = tmp_path / "f.json"
    faults.write_text(json.dumps([{"mode": "omission", "target": "Progress: ", "query": "q000", "compaction": 0}]))
    args = ["run", "--mode", "async-nojudge", "--threshold", "1200", "--backend", f"script:{wl}",
            "--inject-faults", str(faults), "--trace-out", str(tmp_path / "t")]  # fmt: skip
    assert main(args) == 0
    files = sorted((tmp_path / "t").glob("*.jsonl"))
    assert [f.name for f in files] == ["async_nojudge__T1200__q000.jsonl", "async_nojudge__T1200__q001.jsonl"]
    events = [json.loads(l) for l in files[0].read_text().splitlines() if '"compaction"' in l and '"type": "compaction"' in l]
    assert events[0]["corruptions"] == ["omission"] and events[0]["outcome"] == "adopted"


def test_bare_script_is_a_one_query_workload(tmp_path):
    script = {"agent_step": [{"content": "go", "tool_call": "finish(x)"}], "judge": [{"content": "{}"}]}
    ws = WorkloadScript.from_dict(script)
    assert [q.name for q in ws.queries] == ["q0"] and ws.problems() == []


def test_make_workload_is_seeded(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["make-workload", "--out", str(a), "--seed", "4"]) == 0
    assert main(["make-workload", "--out", str(b), "--seed", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert WorkloadScript.load(a).problems() == []


@pytest.mark.parametrize("rate,expected", [(0.0, 0), (0.06, 6), (0.3, 30)])
def test_generator_corrupts_exact_count(rate, expected):
    ws = generate_workload(WorkloadParams(queries=100, turns=4, corruption_rate=rate), seed=0)
    assert len(ws.faults) == expected
    assert sum(q.expected["corrupted"] for q in ws.queries) == expected
