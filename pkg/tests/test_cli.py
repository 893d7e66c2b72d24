from __future__ import annotations

import io
import json
import sys

import pytest

from streamorch.cli import build_parser, main


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def fields(text, key):
    return [line.split("\t")[1:] for line in text.splitlines() if line.split("\t")[0] == key]


class TestRun:
    def test_summary(self, scenarios_dir):
        code, out, _ = call("run", str(scenarios_dir / "job_match.scenario"))
        assert code == 0
        assert fields(out, "final_status") == [["COMPLETED"]]
        assert fields(out, "output") == [['{"job_id":2,"score":0.6,"title":"Structural Welder"}']]
        assert len(fields(out, "node")) == 2
        assert fields(out, "cost") == [["est=3", "actual=3"]]

    def test_outputs_written(self, scenarios_dir, tmp_path):
        trace, report, fig = tmp_path / "t.trace", tmp_path / "r.json", tmp_path / "t.png"
        code, _, _ = call("run", str(scenarios_dir / "timeout_retry.scenario"), "--trace-out", str(trace),
                          "--report-out", str(report), "--timeline-out", str(fig))
        assert code == 0
        assert trace.read_text().startswith('{"header":')
        assert json.loads(report.read_text())["final_status"] == "COMPLETED"
        assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_violation_lines(self, scenarios_dir):
        _, out, _ = call("run", str(scenarios_dir / "timeout_retry.scenario"))
        kinds = [v[0] for v in fields(out, "violation")]
        assert "TIMEOUT" in kinds

    @pytest.mark.parametrize("name,code", [("infeasible", 3), ("budget_abort", 4), ("quality_abort", 5)])
    def test_abort_codes(self, scenarios_dir, name, code):
        assert call("run", str(scenarios_dir / f"{name}.scenario"))[0] == code

    def test_max_replans_flag(self, scenarios_dir):
        assert call("run", str(scenarios_dir / "quality_replan.scenario"), "--max-replans", "0")[0] == 5

    def test_seed_flag_changes_header(self, scenarios_dir, tmp_path):
        trace = tmp_path / "t.trace"
        call("run", str(scenarios_dir / "echo.scenario"), "--seed", "99", "--trace-out", str(trace))
        assert json.loads(trace.read_text().splitlines()[0])["header"]["seed"] == 99

    def test_validation_error(self, scenarios_dir, tmp_path):
        raw = json.loads((scenarios_dir / "echo.scenario").read_text())
        raw["session"]["agents"].append("Ghost")
        bad = tmp_path / "bad.scenario"
        bad.write_text(json.dumps(raw))
        code, out, err = call("run", str(bad))
        assert code == 2
        assert "Ghost" in err and out == ""

    def test_missing_file(self, tmp_path):
        assert call("run", str(tmp_path / "nope.scenario"))[0] == 2


class TestReplay:
    def test_match_and_diverge(self, scenarios_dir, tmp_path):
        trace = tmp_path / "t.trace"
        call("run", str(scenarios_dir / "job_match.scenario"), "--trace-out", str(trace))
        assert call("replay", str(trace))[:2] == (0, "MATCH\n")
        trace.write_text(trace.read_text().replace("Structural Welder", "Structural Welded", 1))
        code, out, _ = call("replay", str(trace))
        assert code == 1
        assert out.startswith("DIVERGE at record ")
        assert fields(out, "expected") and fields(out, "actual")

    def test_wall_trace_rejected(self, scenarios_dir, tmp_path):
        trace = tmp_path / "t.trace"
        call("run", str(scenarios_dir / "echo.scenario"), "--clock", "wall", "--trace-out", str(trace))
        code, _, err = call("replay", str(trace))
        assert code == 2 and "sim" in err

    def test_truncated(self, scenarios_dir, tmp_path):
        trace = tmp_path / "t.trace"
        call("run", str(scenarios_dir / "echo.scenario"), "--trace-out", str(trace))
        trace.write_text("\n".join(trace.read_text().splitlines()[:-2]))
        code, _, err = call("replay", str(trace))
        assert code == 2 and "record" in err


def test_repl_reads_stdin(scenarios_dir, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO("find welding jobs\n:quit\n"))
    code, out, _ = call("repl", str(scenarios_dir / "job_match.scenario"))
    assert code == 0
    assert '[user/input] data user: "welding"' in out
    assert "RUN_COMPLETED coordinator COMPLETED" in out
    assert out.rstrip().endswith("SESSION_COMPLETED user")


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
