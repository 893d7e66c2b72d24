"""Command-line entry point: ``run``, ``replay`` and ``repl``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import EXIT_VALIDATION, ReplDriver, UnsupportedModeError, Verdict, replay, run_scenario
from .scenario import ScenarioError, load_scenario
from .trace import TraceParseError, dumps_line

__all__ = ["build_parser", "main"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamorch", description="Run, replay and explore orchestration scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace-out", type=Path, default=None, help="write the trace here")
    run.add_argument("--report-out", type=Path, default=None, help="write the execution report (JSON) here")
    run.add_argument("--timeline-out", type=Path, default=None, help="render a node timeline figure here")
    run.add_argument("--max-replans", type=int, default=None, help="override constraints.max_replans")
    run.add_argument("--clock", choices=("sim", "wall"), default=None, help="clock mode (default: scenario)")

    rep = sub.add_parser("replay", help="re-execute a trace and compare")
    rep.add_argument("trace", type=Path)

    repl = sub.add_parser("repl", help="interactive session; type :quit to leave")
    repl.add_argument("scenario", type=Path)
    repl.add_argument("--seed", type=int, default=None)
    repl.add_argument("--line-granularity", action="store_true", help="one message per line instead of per word")
    return parser


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _print_summary(result, out) -> None:
    report = result.report
    m = result.metrics
    if report is None:
        print("final_status\tNONE", file=out)
    else:
        print(f"final_status\t{report.final_status.value}", file=out)
        print(f"plan_method\t{report.plan_method}", file=out)
        print(f"replans\t{report.replans}", file=out)
        print(f"violations\t{len(report.violations)}", file=out)
        for v in report.violations:
            print(f"violation\t{v['kind']}\t{v['node_id']}#{v['attempt']}\tts={v['ts']}", file=out)
        for st in report.nodes:
            print(f"node\t{st.node_id}#{st.attempt}\t{st.agent}\t{st.status.value}\t"
                  f"{st.started_ts}\t{st.finished_ts}\t{_fmt(st.actual_cost)}", file=out)
        for key in ("cost", "latency", "quality"):
            est = report.est_total.get(key) if report.est_total else None
            print(f"{key}\test={_fmt(est)}\tactual={_fmt(report.totals[key])}", file=out)
        print(f"output\t{dumps_line(report.output)}", file=out)
    print(f"messages_appended\t{m['messages_appended']}", file=out)
    for agent, ms in m["busy_ms"].items():
        print(f"busy_ms\t{agent}\t{ms}", file=out)


def _cmd_run(args, out, err) -> int:
    scenario = load_scenario(args.scenario)
    result = run_scenario(scenario, seed=args.seed, max_replans=args.max_replans, clock=args.clock)
    if args.trace_out is not None:
        args.trace_out.write_text(result.trace_text, encoding="utf-8")
    if args.report_out is not None and result.report is not None:
        args.report_out.write_text(result.report.to_json() + "\n", encoding="utf-8")
    if args.timeline_out is not None and result.report is not None:
        from .figures import render_timeline

        render_timeline(result.report, args.timeline_out)
    _print_summary(result, out)
    return result.exit_code


def _cmd_replay(args, out, err) -> int:
    verdict = replay(args.trace)
    print(str(verdict), file=out)
    if verdict.verdict is Verdict.DIVERGE and verdict.expected is not None:
        print(f"expected\t{verdict.expected}", file=out)
        print(f"actual\t{verdict.actual}", file=out)
    return 0 if verdict.verdict is Verdict.MATCH else 1


def _cmd_repl(args, out, err) -> int:
    driver = ReplDriver(args.scenario, seed=args.seed, line_granularity=args.line_granularity, out=out)
    interactive = sys.stdin.isatty()
    while True:
        if interactive:
            print("> ", end="", file=out, flush=True)
        line = sys.stdin.readline()
        if not line:
            driver.submit(ReplDriver.QUIT)
            break
        if not driver.submit(line.rstrip("\n")):
            break
    return 0


def main(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "replay": _cmd_replay, "repl": _cmd_repl}
    try:
        return handlers[args.command](args, out, err)
    except ScenarioError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_VALIDATION
    except (TraceParseError, UnsupportedModeError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
