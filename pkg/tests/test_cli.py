import io
import json
import shutil
from pathlib import Path

import pytest

from skillevo.bundle import write_bundle
from skillevo.cli import main
from skillevo.scenarios import build_desk_corpus, dump_replay_dir


def run(argv, stdin=""):
    out = io.StringIO()
    code = main(argv, stdout=out, stdin=io.StringIO(stdin))
    return code, out.getvalue()


@pytest.fixture
def replay_dir(tmp_path):
    return dump_replay_dir(tmp_path / "replay")


@pytest.fixture
def evolved(tmp_path, replay_dir):
    out = tmp_path / "run"
    code, text = run(["evolve", str(replay_dir / "task"), "--scripted", str(replay_dir), "--out", str(out)])
    assert code == 0, text
    return out


def test_usage_errors():
    assert run([])[0] == 1
    assert run(["evolve"])[0] == 1
    assert run(["frobnicate"])[0] == 1
    assert run(["--help"])[0] == 0


def test_evolve_writes_sealed_and_unsealed_traces(evolved):
    assert (evolved / "skill" / "SKILL.md").is_file()
    assert "status: done_perfect" in (evolved / "evolution_summary.md").read_text()
    public = (evolved / "trace.jsonl").read_text()
    private = (evolved / ".sealed" / "trace.jsonl").read_text()
    assert '"3/4"' not in public and '"<sealed>"' in public
    assert '"score":"3/4"' in private
    assert (evolved / ".sealed").stat().st_mode & 0o077 == 0


def test_evolve_needs_a_policy_source(replay_dir):
    assert run(["evolve", str(replay_dir / "task")])[0] == 1


def test_evolve_bad_config(tmp_path, replay_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"beta": 2}')
    assert run(["evolve", str(replay_dir / "task"), "--scripted", str(replay_dir), "--config", str(cfg)])[0] == 1


def test_evolve_task_failure_exit(tmp_path, replay_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"K": 1}')
    code, _ = run(["evolve", str(replay_dir / "task"), "--scripted", str(replay_dir), "--config", str(cfg),
                   "--out", str(tmp_path / "o")])
    assert code == 2


def test_replay_matches_and_diverges(tmp_path, replay_dir, evolved):
    code, text = run(["replay", str(evolved / "trace.jsonl"), "--scripted", str(replay_dir)])
    assert code == 0 and "matches" in text
    assert run(["replay", str(evolved / ".sealed" / "trace.jsonl"), "--scripted", str(replay_dir)])[0] == 0
    tampered = tmp_path / "t.jsonl"
    tampered.write_text((evolved / "trace.jsonl").read_text().replace('"bit":"1"', '"bit":"0"', 1))
    code, _ = run(["replay", str(tampered), "--scripted", str(replay_dir), "--diff-out", str(tmp_path / "d")])
    assert code == 2 and (tmp_path / "d").is_file()


def test_stats(evolved):
    code, text = run(["stats", str(evolved / "*.jsonl"), "--format", "jsonl"])
    row = json.loads(text)
    assert code == 0 and (row["verification_cycles"], row["oracle_rounds"], row["converged"]) == (6, 3, True)


def test_report_trace_sealed_unless_confirmed(evolved):
    code, text = run(["report", str(evolved / "trace.jsonl"), "--format", "csv"])
    assert code == 0 and "3/4" not in text
    code, text = run(["report", str(evolved / "trace.jsonl"), "--unseal"], stdin="no\n")
    assert code == 1 and "3/4" not in text
    code, text = run(["report", str(evolved / "trace.jsonl"), "--unseal", "--format", "jsonl"], stdin="unseal\n")
    assert code == 0 and '"score":"3/4"' in text


def test_validate_skill(tmp_path, evolved):
    assert run(["validate-skill", str(evolved / "skill")]) == (0, "ok\n")
    bad = tmp_path / "bad"
    shutil.copytree(evolved / "skill", bad)
    doc = bad / "SKILL.md"
    doc.write_text(doc.read_text() + "\nSee /app/environment/doc/notes.md\n")
    code, text = run(["validate-skill", str(bad)])
    assert code == 2 and text.startswith("SELF_CONTAINED\t")
    assert run(["validate-skill", str(tmp_path / "nothing")])[0] == 1


@pytest.fixture
def desk_dirs(tmp_path):
    _, bundles = build_desk_corpus(tmp_path / "corpus")
    skills = tmp_path / "skills"
    for task_id, bundle in bundles.items():
        write_bundle(bundle, skills / task_id)
    return tmp_path / "corpus", skills


def test_bench_and_report(tmp_path, desk_dirs):
    corpus, skills = desk_dirs
    records = tmp_path / "records.jsonl"
    code, text = run(["bench", str(corpus), "--skills", str(skills), "--records", str(records)])
    assert code == 0 and "mean: 1.0000" in text
    code, text = run(["bench", str(corpus), "--runs", "2"])
    assert code == 2 and "mean: 0.3333" in text
    code, text = run(["report", str(records), "--format", "csv"])
    assert code == 0 and text.count("\n") == 7
    assert run(["bench", str(corpus), "--target", "nope"])[0] == 1


def test_transfer(tmp_path, desk_dirs):
    corpus, skills = desk_dirs
    code, text = run(["transfer", str(skills), "--targets", "runner", "--corpus", str(corpus),
                      "--source", "solver"])
    assert code == 0 and "delta 2/3" in text
    code, text = run(["transfer", str(skills), "--targets", "ignore-skills", "--corpus", str(corpus)])
    assert code == 2 and "delta 0" in text


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "skillevo", "validate-skill", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
