"""Wiring a scenario into a live session: system agents, runs, replay, REPL.

Three system agents drive every session. The user agent writes the request
onto ``user/input``; the planner (inclusion ``user``) plans it and publishes
the DAG; the coordinator (inclusion ``plan``) executes it. Everything else
is a stub agent declared by the scenario.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, TextIO, Union

from .agents import AgentInstance, AgentRuntime
from .coordinator import CoordinatorAgent, ExecutionReport, FinalStatus
from .data_planner import plan_retrieval
from .planner import Constraints, Infeasible, plan, publish_infeasible, publish_plan, replan
from .registry import AgentRecord
from .scenario import Scenario, ScenarioError, load_scenario, scenario_from_dict
from .sim import Scheduler, SimClock, WallClock
from .streams import Message, MessageKind, SessionConfig, SessionHub, SessionStatus, StreamLog
from .stubs import make_stub
from .trace import TRACE_FORMAT, TRACE_VERSION, TraceParseError, Tracer, dumps_line, parse_trace

__all__ = [
    "EXIT_CODES",
    "PlannerAgent",
    "ReplDriver",
    "RunResult",
    "UnsupportedModeError",
    "UserAgent",
    "Verdict",
    "build_session",
    "replay",
    "run_scenario",
]

EXIT_CODES = {
    FinalStatus.COMPLETED: 0,
    FinalStatus.ABORTED_INFEASIBLE: 3,
    FinalStatus.ABORTED_BUDGET: 4,
    FinalStatus.ABORTED_REPLAN_LIMIT: 5,
}
EXIT_VALIDATION = 2
EXIT_NO_RUN = 1


class UnsupportedModeError(ValueError):
    pass


class UserAgent(AgentInstance):
    """Writes requests onto the user stream; never triggered by others."""

    def __init__(self, runtime: AgentRuntime, *, name: str = "user", line_granularity: bool = False) -> None:
        record = AgentRecord(name, description="user", inclusion_rule="NOT TRUE", output_tags={"user"})
        super().__init__(record, runtime)
        self.line_granularity = line_granularity
        self.stream: Optional[StreamLog] = None

    def open(self) -> StreamLog:
        self.runtime.ensure_joined(self.name)
        if self.stream is None:
            name = self.session.unique_name(f"{self.name}/input")
            self.stream = self.session.create_stream(name, {"user"}, self.name)
        return self.stream

    def send_record(self, record: Any) -> None:
        self.open().append(MessageKind.DATA, {"request"}, record, self.name)

    def send_line(self, line: str) -> None:
        stream = self.open()
        if self.line_granularity:
            if line.strip():
                stream.append(MessageKind.DATA, {"line"}, line.strip(), self.name)
        else:
            for word in line.split():
                stream.append(MessageKind.DATA, {"word"}, word, self.name)
        stream.append(MessageKind.DATA, {"eol"}, "", self.name)

    def quit(self) -> None:
        self.open().close()
        if self.name in self.session.participants:
            self.runtime.leave_session(self)


class PlannerAgent(AgentInstance):
    """Plans each request arriving on a ``user`` stream and publishes the DAG."""

    def __init__(self, runtime: AgentRuntime, scenario: Scenario, *, name: str = "planner", constraints: Optional[Constraints] = None) -> None:
        record = AgentRecord(name, description="task planner", inclusion_rule="user", output_tags={"plan"})
        super().__init__(record, runtime)
        self.scenario = scenario
        self.constraints = constraints or scenario.constraints
        self.contexts: dict[str, tuple] = {}
        self.feedback: list[dict] = []
        self._words: dict[str, list] = {}

    def handle(self, stream: StreamLog, msg: Message) -> None:
        tags = msg.tags
        base = self.scenario.session_input if isinstance(self.scenario.session_input, dict) else {}
        if "word" in tags:
            self._words.setdefault(stream.id, []).append(msg.payload)
        elif "eol" in tags:
            line = " ".join(self._words.pop(stream.id, []))
            if line:
                self.plan_request({**base, "text": line})
        elif "line" in tags:
            self.plan_request({**base, "text": msg.payload})
        else:
            self.plan_request(msg.payload)

    def plan_request(self, session_input: Any) -> StreamLog:
        sc = self.scenario
        try:
            if sc.request is not None:
                dplan = plan_retrieval(sc.request, sc.data, self.constraints, sc.agents)
                dag, task = dplan.dag, dplan.task
                self.runtime.tracer.decision(
                    {"action": "data_plan", "cover": list(dplan.cover), "cover_cost": dplan.cover_cost}
                )
            else:
                task = sc.task
                dag = plan(task, sc.agents, self.constraints)
        except Infeasible as exc:
            stream = publish_infeasible(exc, self.session, self.name)
            self.contexts[stream.name] = (sc.task, self.constraints, session_input)
            return stream
        stream = publish_plan(dag, self.session, self.name)
        self.contexts[stream.name] = (task, self.constraints, session_input)
        return stream

    def context_for(self, stream_name: str) -> tuple:
        return self.contexts[stream_name]

    def replan_for(self, run, failed_node: str, completed: dict):
        new = replan(run.dag, failed_node, run.task, self.scenario.agents, run.constraints, run.exclusions, completed)
        stream = publish_plan(new, self.session, self.name, extra_tags={"replan"})
        self.contexts[stream.name] = (run.task, run.constraints, run.session_input)
        return new

    def record_feedback(self, report: ExecutionReport) -> None:
        # Feedback is recorded only; planning does not adapt to it.
        entry = {
            "action": "feedback",
            "run": report.run_id,
            "final_status": report.final_status.value,
            "replans": report.replans,
            "totals": report.totals,
        }
        self.feedback.append(entry)
        self.runtime.tracer.decision(entry)


@dataclass
class Live:
    scenario: Scenario
    seed: int
    clock_mode: str
    session: Any
    scheduler: Scheduler
    runtime: AgentRuntime
    tracer: Tracer
    user: UserAgent
    planner: PlannerAgent
    coordinator: CoordinatorAgent
    config: dict

    def drain(self) -> None:
        self.scheduler.run()

    def header(self) -> dict:
        return {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "clock": self.clock_mode,
            "seed": self.seed,
            "config": self.config,
            "scenario": self.scenario.embedded(),
        }


def build_session(
    scenario: Scenario,
    *,
    seed: Optional[int] = None,
    max_replans: Optional[int] = None,
    clock: Optional[str] = None,
    repl: bool = False,
    line_granularity: bool = False,
) -> Live:
    seed = scenario.seed if seed is None else seed
    mode = clock or scenario.clock
    if mode not in ("sim", "wall"):
        raise ScenarioError(f"clock must be 'sim' or 'wall', got {mode!r}", "clock")
    constraints = scenario.constraints
    if max_replans is not None:
        d = constraints.to_dict()
        d["max_replans"] = max_replans
        constraints = Constraints.from_dict(d)
    config = {"seed": seed, "clock": mode, "max_replans": constraints.max_replans, "repl": repl,
              "line_granularity": line_granularity}

    clk = SimClock() if mode == "sim" else WallClock()
    scheduler = Scheduler(clk)
    tracer = Tracer(clk)
    hub = SessionHub()
    session = hub.create_session(
        SessionConfig(scenario.session_id, list(scenario.session_agents), repl=repl,
                      input=scenario.session_input, budget=constraints),
        clk,
    )
    tracer.attach(session)
    runtime = AgentRuntime(session, scheduler, seed=seed, tables=scenario.tables, tracer=tracer)
    user = runtime.add(UserAgent(runtime, line_granularity=line_granularity))
    planner = runtime.add(PlannerAgent(runtime, scenario, constraints=constraints))
    coordinator = runtime.add(
        CoordinatorAgent(runtime, scenario.agents, planner=planner, constraints=constraints)
    )
    for rec in scenario.agents:
        kind, params = scenario.agent_specs[rec.name]
        runtime.spawn(rec, make_stub(kind, params))
    for name in scenario.session_agents:
        runtime.attach(runtime.agents[name])
    # The planner and coordinator must observe the session even when the
    # scenario does not list them.
    runtime.ensure_joined(planner.name)
    runtime.ensure_joined(coordinator.name)
    return Live(scenario, seed, mode, session, scheduler, runtime, tracer, user, planner, coordinator, config)


@dataclass
class RunResult:
    report: Optional[ExecutionReport]
    live: Live
    trace_text: str
    metrics: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.report is None:
            return EXIT_NO_RUN
        return EXIT_CODES[self.report.final_status]

    @property
    def final_output(self) -> Any:
        return None if self.report is None else self.report.output


def _metrics(live: Live, report: Optional[ExecutionReport]) -> dict:
    busy = {name: ms for name, ms in live.runtime.busy_time().items() if live.runtime.agents[name].runs}
    out = {"messages_appended": live.runtime.appended, "busy_ms": busy}
    if report is not None:
        out["estimate"] = report.est_total
        out["actual"] = report.totals
    return out


def run_scenario(
    scenario: Union[Scenario, str, Path],
    *,
    seed: Optional[int] = None,
    max_replans: Optional[int] = None,
    clock: Optional[str] = None,
) -> RunResult:
    """Run one request end to end and return the report plus the trace text."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    live = build_session(scenario, seed=seed, max_replans=max_replans, clock=clock)
    live.user.send_record(scenario.session_input if scenario.session_input is not None else {})
    live.user.stream.close()
    live.drain()
    runs = live.coordinator.runs
    report = runs[-1].report if runs else None
    ok = report is not None and report.final_status is FinalStatus.COMPLETED
    live.session.finish(SessionStatus.COMPLETED if ok else SessionStatus.ABORTED)
    live.drain()
    return RunResult(report, live, live.tracer.render(live.header()), _metrics(live, report))


class Verdict(str, enum.Enum):
    MATCH = "MATCH"
    DIVERGE = "DIVERGE"


@dataclass
class ReplayResult:
    verdict: Verdict
    index: Optional[int] = None
    expected: Optional[str] = None
    actual: Optional[str] = None

    def __str__(self) -> str:
        if self.verdict is Verdict.MATCH:
            return "MATCH"
        return f"DIVERGE at record {self.index}"


def replay(trace: Union[str, Path]) -> ReplayResult:
    """Re-run the scenario embedded in a trace and compare record by record."""
    text = Path(trace).read_text(encoding="utf-8")
    parsed = parse_trace(text)
    header = parsed.header
    if header.get("clock") != "sim":
        raise UnsupportedModeError(f"trace was recorded with the {header.get('clock')!r} clock; replay needs 'sim'")
    cfg = header.get("config", {})
    scenario = scenario_from_dict(header["scenario"], source=str(trace))
    result = run_scenario(scenario, seed=header["seed"], max_replans=cfg.get("max_replans"), clock="sim")
    fresh = result.live.tracer.lines()
    for i, (old, new) in enumerate(zip(parsed.lines, fresh)):
        if old != new:
            return ReplayResult(Verdict.DIVERGE, i, old, new)
    if len(parsed.lines) != len(fresh):
        i = min(len(parsed.lines), len(fresh))
        return ReplayResult(Verdict.DIVERGE, i)
    return ReplayResult(Verdict.MATCH)


def _label(stream: StreamLog, msg: Message) -> str:
    payload = msg.payload
    if msg.kind is MessageKind.EVENT:
        extra = payload.get("stream") or payload.get("final_status") or ""
        body = f"{payload.get('event_name')} {payload.get('agent_id')} {extra}".rstrip()
    else:
        body = dumps_line(payload)
    return f"[{stream.name}] {msg.kind.value.lower()} {msg.producer}: {body}"


class ReplDriver:
    """Interactive session: one call to :meth:`submit` per typed line."""

    QUIT = ":quit"

    def __init__(self, scenario: Union[Scenario, str, Path], *, seed: Optional[int] = None,
                 line_granularity: bool = False, out: Optional[TextIO] = None) -> None:
        if not isinstance(scenario, Scenario):
            scenario = load_scenario(scenario)
        self.live = build_session(scenario, seed=seed, repl=True, line_granularity=line_granularity)
        self.out = out if out is not None else io.StringIO()
        self._pending: list[str] = []
        self.live.session.add_listener(lambda s, m: self._pending.append(_label(s, m)))
        self.live.user.open()
        self._flush()
        self.closed = False

    def _flush(self) -> None:
        for line in self._pending:
            print(line, file=self.out)
        self._pending.clear()

    def submit(self, line: str) -> bool:
        """Feed one line; returns False once the session has ended."""
        if self.closed:
            return False
        if line.strip() == self.QUIT:
            self.live.user.quit()
            self.live.drain()
            self.live.session.finish(SessionStatus.COMPLETED)
            self.closed = True
            self._flush()
            return False
        self.live.user.send_line(line)
        self.live.drain()
        self._flush()
        return True

    def run(self, lines, prompt: Callable[[], None] = lambda: None) -> None:
        for line in lines:
            if not self.submit(line.rstrip("\n")):
                return
            prompt()
        self.submit(self.QUIT)
