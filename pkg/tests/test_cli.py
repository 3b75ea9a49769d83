import json
import subprocess
import sys

import pytest

from sopbench.cli import main
from sopbench.config import ConfigError, RunConfig, flatten

from conftest import FIXTURES


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture
def synthetic(tmp_path, capsys):
    path = tmp_path / "syn.jsonl"
    code, _, _ = run(capsys, "gen-synthetic", "-n", 20, "--seed", 4, "--output", path)
    assert code == 0
    return path


def test_gen_and_evaluate_oracle(tmp_path, capsys, synthetic):
    out = tmp_path / "report.json"
    code, stdout, _ = run(capsys, "evaluate", "--input", synthetic, "--policy", "oracle", "--output", out)
    assert code == 0
    assert summary(stdout)["overall"] == 100.0
    assert json.loads(out.read_text())["overall"] == 100.0


def test_annotate_amazon(tmp_path, capsys):
    out = tmp_path / "ann.jsonl"
    code, stdout, _ = run(capsys, "annotate", "--input", FIXTURES / "amazon_episode.jsonl", "--output", out)
    assert code == 0 and summary(stdout)["episodes"] == 1
    rec = json.loads(out.read_text())
    assert [e["description"] for e in rec["sop"]] == [
        "search on the website", "view and click page content", "type 'best rated headphones'",
        "view and click page content", "task complete",
    ]
    assert rec["steps"][2]["action"] == {"type": "TYPE", "text": "best rated headphones"}


def test_build_prompts_mix(tmp_path, capsys):
    out = tmp_path / "p.jsonl"
    code, stdout, _ = run(capsys, "build-prompts", "--input", FIXTURES / "amazon_episode.jsonl",
                          "--variant", "sop", "--mix", "--output", out)
    assert code == 0
    assert summary(stdout)["samples"] == 10
    assert len(out.read_text().splitlines()) == 10


def test_stdout_streaming_moves_summary_to_stderr(capsys):
    code, stdout, stderr = run(capsys, "annotate", "--input", FIXTURES / "amazon_episode.jsonl")
    assert code == 0
    assert json.loads(stdout)["episode_id"] == "amazon-headphones"
    assert summary(stderr)["command"] == "annotate"


def test_commands_are_idempotent(tmp_path, capsys, synthetic):
    for cmd in (["annotate"], ["build-prompts", "--variant", "plan_state"], ["evaluate", "--policy", "random"],
                ["replay", "--policy", "rule_sop", "--mode", "free_running"]):
        outputs = []
        for k in range(2):
            path = tmp_path / f"out{k}"
            code, _, _ = run(capsys, *cmd, "--input", synthetic, "--output", path, "--seed", 3)
            assert code == 0, cmd
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1], cmd


def test_gen_synthetic_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "gen-synthetic", "--template", "amazon", "-n", 7, "--seed", 2, "--output", a)
    run(capsys, "gen-synthetic", "--template", "amazon", "-n", 7, "--seed", 2, "--output", b)
    assert a.read_bytes() == b.read_bytes()


def test_ingest_manifest_and_lenient(tmp_path, capsys, synthetic):
    lines = synthetic.read_text().splitlines()
    lines.insert(3, "{broken")
    raw = tmp_path / "raw.jsonl"
    raw.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "ingest", "--input", raw, "--output", tmp_path / "x")
    assert code == 3 and summary(err)["error"] == "data"
    manifest = tmp_path / "manifest.json"
    code, stdout, _ = run(capsys, "ingest", "--input", raw, "--output", tmp_path / "x", "--lenient",
                          "--manifest", manifest)
    assert code == 0
    assert summary(stdout)["rejected"] == 1
    assert json.loads(manifest.read_text())["total"]["episodes"] == 20


def test_split(tmp_path, capsys, synthetic):
    prefix = tmp_path / "part"
    code, stdout, _ = run(capsys, "split", "--input", synthetic, "--output", prefix, "--fractions", "0.5,0.25,0.25")
    assert code == 0 and summary(stdout)["sizes"] == {"train": 10, "val": 5, "test": 5}
    ids = [json.loads(l)["episode_id"] for n in ("train", "val", "test")
           for l in (tmp_path / f"part.{n}.jsonl").read_text().splitlines()]
    assert sorted(ids) == sorted(json.loads(l)["episode_id"] for l in synthetic.read_text().splitlines())


def test_report_reads_evaluator_output(tmp_path, capsys):
    doc = {"model": "made-up", "overall": 42.0, "subsets": {"general": 7.0}}
    path = tmp_path / "r.json"
    path.write_text(json.dumps(doc))
    code, stdout, _ = run(capsys, "report", path, "--output", tmp_path / "t.txt")
    assert code == 0
    table = (tmp_path / "t.txt").read_text()
    assert "made-up" in table and "42.00" in table and "7.00" in table


def test_report_rejects_non_reports(tmp_path, capsys):
    path = tmp_path / "r.json"
    path.write_text("{}")
    assert run(capsys, "report", path)[0] == 3
    assert run(capsys, "report")[0] == 2


# --- configuration ---------------------------------------------------------


def test_missing_input_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--input", tmp_path / "nope.jsonl")
    assert code == 2 and summary(err)["error"] == "config"


def test_unknown_config_key(tmp_path, capsys, synthetic):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"grounding": {"expand_fraction": 0.2, "sparkle": 1}}))
    assert run(capsys, "evaluate", "--config", cfg, "--input", synthetic)[0] == 2


def test_bad_value_type(tmp_path, capsys, synthetic):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"jobs": "many"}))
    assert run(capsys, "evaluate", "--config", cfg, "--input", synthetic)[0] == 2


def test_env_config_and_flags_win(tmp_path, capsys, synthetic, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"paths.input": str(synthetic), "policy": "random", "seed": 1}))
    monkeypatch.setenv("SOPBENCH_CONFIG", str(cfg))
    code, stdout, _ = run(capsys, "evaluate", "--output", tmp_path / "a.json")
    assert code == 0 and summary(stdout)["policy"] == "random"
    code, stdout, _ = run(capsys, "evaluate", "--policy", "oracle", "--output", tmp_path / "b.json")
    assert summary(stdout)["policy"] == "oracle" and summary(stdout)["overall"] == 100.0


def test_remote_without_endpoint(capsys, synthetic):
    assert run(capsys, "evaluate", "--input", synthetic, "--policy", "remote")[0] == 2


def test_unreachable_endpoint_exit_code(tmp_path, capsys, synthetic):
    code, stdout, _ = run(capsys, "evaluate", "--input", synthetic, "--policy", "remote",
                          "--endpoint", "http://127.0.0.1:9/", "--output", tmp_path / "r.json")
    assert code == 4
    assert summary(stdout)["unevaluated_episodes"] == 20


def test_run_config_flatten_and_defaults():
    assert flatten({"a": {"b": {"c": 1}}, "d": 2}) == {"a.b.c": 1, "d": 2}
    cfg = RunConfig.load(None, {"jobs": 2})
    assert cfg["jobs"] == 2 and cfg["grounding.expand_fraction"] == 0.10
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"paths.rules": "no-such-rules"})
    with pytest.raises(ConfigError):
        RunConfig.load(None, {"split.fractions": [0.5, 0.5]})


def test_serve_stub_subprocess(tmp_path, capsys, synthetic):
    golden = tmp_path / "golden.jsonl"
    assert run(capsys, "build-prompts", "--input", synthetic, "--output", golden)[0] == 0
    proc = subprocess.Popen([sys.executable, "-m", "sopbench.cli", "serve-stub", "--golden", str(golden),
                             "--port", "0"], stdout=subprocess.PIPE, text=True)
    try:
        url = json.loads(proc.stdout.readline())["url"]
        code, stdout, _ = run(capsys, "evaluate", "--input", synthetic, "--policy", "remote", "--endpoint", url,
                              "--output", tmp_path / "r.json", "--jobs", 4)
        assert code == 0 and summary(stdout)["overall"] == 100.0
    finally:
        proc.terminate()
        proc.wait(timeout=10)
