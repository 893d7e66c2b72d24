"""Plan execution: instruction messages out, results in, constraints enforced.

The coordinator turns a PlanDag into INSTRUCTION messages on its own output
stream and learns about completions only by reading the reply streams the
workers open. Timeouts are scheduled on the simulated clock; a timed-out run
is cancelled and its late output discarded. Failed or low-quality nodes are
retried on the next-best alternate agent when one fits the constraints,
otherwise the planner is asked to replan, up to ``max_replans`` times.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

from .agents import AgentInstance, AgentRuntime
from .planner import (
    EPS,
    Constraints,
    Infeasible,
    PlanDag,
    TaskSpec,
    node_estimate,
    node_timeout,
    publish_plan,
    replan,
    resolve_params,
    validate_dag,
)
from .registry import AgentRecord, AgentRegistry
from .sim import LATE
from .streams import Event, Message, MessageKind, StreamLog

log = logging.getLogger(__name__)

__all__ = [
    "Action",
    "CoordinatorAgent",
    "Decision",
    "ExecutionReport",
    "ExecutionRun",
    "FinalStatus",
    "IllegalTransition",
    "Intervention",
    "NodeState",
    "NodeStatus",
    "ViolationKind",
    "intervene",
    "on_node_result",
    "quality_floor",
]


class NodeStatus(str, enum.Enum):
    PENDING = "PENDING"
    READY = "READY"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    TIMED_OUT = "TIMED_OUT"
    LOW_QUALITY = "LOW_QUALITY"
    FAILED = "FAILED"
    SKIPPED = "SKIPPED"
    CANCELLED = "CANCELLED"


_ALLOWED = {
    NodeStatus.PENDING: {NodeStatus.READY, NodeStatus.SKIPPED, NodeStatus.CANCELLED},
    NodeStatus.READY: {NodeStatus.RUNNING, NodeStatus.SKIPPED, NodeStatus.CANCELLED},
    NodeStatus.RUNNING: {NodeStatus.COMPLETED, NodeStatus.TIMED_OUT, NodeStatus.LOW_QUALITY, NodeStatus.FAILED},
}
_DONE = {NodeStatus.COMPLETED, NodeStatus.SKIPPED}


class ViolationKind(str, enum.Enum):
    TIMEOUT = "TIMEOUT"
    QUALITY = "QUALITY"
    BUDGET = "BUDGET"


class FinalStatus(str, enum.Enum):
    COMPLETED = "COMPLETED"
    ABORTED_INFEASIBLE = "ABORTED_INFEASIBLE"
    ABORTED_BUDGET = "ABORTED_BUDGET"
    ABORTED_REPLAN_LIMIT = "ABORTED_REPLAN_LIMIT"


class Decision(str, enum.Enum):
    ACCEPT = "ACCEPT"
    INTERVENE = "INTERVENE"


class Action(str, enum.Enum):
    RETRY_ALTERNATE = "RETRY_ALTERNATE"
    REPLAN = "REPLAN"
    ABORT = "ABORT"


class IllegalTransition(RuntimeError):
    pass


@dataclass
class NodeState:
    node_id: str
    agent: str
    attempt: int = 1
    status: NodeStatus = NodeStatus.PENDING
    started_ts: Optional[int] = None
    finished_ts: Optional[int] = None
    timeout: Optional[int] = None
    actual_cost: float = 0.0
    observed_quality: Optional[float] = None
    output: Optional[str] = None  # id of the message carrying the output
    instruction: Optional[str] = None

    def to(self, status: NodeStatus) -> None:
        if status not in _ALLOWED.get(self.status, ()):
            raise IllegalTransition(f"{self.node_id}#{self.attempt}: {self.status.value} -> {status.value}")
        self.status = status

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "agent": self.agent,
            "attempt": self.attempt,
            "status": self.status.value,
            "started_ts": self.started_ts,
            "finished_ts": self.finished_ts,
            "timeout": self.timeout,
            "actual_cost": self.actual_cost,
            "observed_quality": self.observed_quality,
            "output": self.output,
        }


@dataclass
class Intervention:
    action: Action
    agent: Optional[str] = None
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        return {"action": self.action.value, "agent": self.agent, "reason": self.reason}


@dataclass
class ExecutionReport:
    nodes: list
    violations: list
    replans: int
    totals: dict
    final_status: FinalStatus
    run_id: str = ""
    plan_method: Optional[str] = None
    est_total: Optional[dict] = None
    output: Any = None
    infeasible: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "final_status": self.final_status.value,
            "replans": self.replans,
            "totals": self.totals,
            "est_total": self.est_total,
            "plan_method": self.plan_method,
            "violations": self.violations,
            "nodes": [n.to_dict() for n in self.nodes],
            "output": self.output,
            "infeasible": self.infeasible,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def quality_floor(constraints: Constraints, n_nodes: int) -> float:
    """Per-node floor so that n accepted nodes jointly meet min_quality."""
    return constraints.min_quality ** (1.0 / max(1, n_nodes))


def on_node_result(quality: Optional[float], constraints: Constraints, n_nodes: int) -> Decision:
    q = 1.0 if quality is None else quality
    return Decision.ACCEPT if q >= quality_floor(constraints, n_nodes) - EPS else Decision.INTERVENE


def intervene(
    node_id: str,
    kind: ViolationKind,
    dag: PlanDag,
    task: TaskSpec,
    registry: AgentRegistry,
    constraints: Constraints,
    *,
    tried: set,
    replans: int,
) -> Intervention:
    """Retry on the best untried alternate, else replan, else abort."""
    kind = ViolationKind(kind)
    if kind is ViolationKind.BUDGET:
        raise ValueError("budget violations abort; they are not intervened on")
    node = dag.node(node_id)
    step = task.step(node.step_id)
    options = []
    for rec in registry.candidates(step.capability):
        if rec.name in tried:
            continue
        trial = dag.with_node(_reassign(node, step, rec, constraints))
        est = trial.est_total
        if constraints.admits(est):
            options.append(((est.cost, est.latency, -est.quality, tuple(trial.agents())), rec.name))
    if options:
        return Intervention(Action.RETRY_ALTERNATE, agent=min(options)[1])
    if replans < constraints.max_replans:
        return Intervention(Action.REPLAN)
    return Intervention(Action.ABORT, reason="replan_limit")


def _reassign(node, step, rec: AgentRecord, constraints: Constraints):
    est = node_estimate(step, rec)
    return replace(
        node,
        agent=rec.name,
        timeout=node_timeout(rec, constraints),
        est_cost=est.cost,
        est_latency=est.latency,
        est_quality=est.quality,
        skip=False,
        cached_output=None,
    )


class ExecutionRun:
    def __init__(
        self,
        coordinator: CoordinatorAgent,
        dag: PlanDag,
        task: TaskSpec,
        constraints: Constraints,
        session_input: Any = None,
        run_id: str = "run1",
    ) -> None:
        self.coord = coordinator
        self.runtime: AgentRuntime = coordinator.runtime
        self.dag = dag
        self.task = task
        self.constraints = constraints
        self.session_input = session_input
        self.run_id = run_id
        self.states: dict[str, NodeState] = {}
        self.history: list[NodeState] = []
        self.outputs: dict[str, Any] = {}
        self.exclusions: set[str] = set()
        self.used: dict[str, set] = {}
        self.replans = 0
        self.violations: list[dict] = []
        self.cost = 0.0
        self.abort_status: Optional[FinalStatus] = None
        self.superseded: set[int] = set()
        self._timeouts: dict[int, Any] = {}
        self._pending_output: dict[int, tuple] = {}
        self._errors: dict[int, Any] = {}
        self._planned_cost: dict[int, float] = {}
        self.stream: Optional[StreamLog] = None
        self.started_ts = 0
        self.done = False
        self.report: Optional[ExecutionReport] = None
        self.on_done: Optional[Callable[[ExecutionReport], None]] = None

    # -- helpers ------------------------------------------------------------

    @property
    def session(self):
        return self.runtime.session

    def now(self) -> int:
        return self.runtime.scheduler.now()

    def _new_state(self, node, attempt: int) -> NodeState:
        st = NodeState(node.node_id, node.agent, attempt)
        self.states[node.node_id] = st
        self.history.append(st)
        return st

    def _running(self) -> list[NodeState]:
        return [s for s in self.history if s.status is NodeStatus.RUNNING]

    def _decision(self, body: dict) -> None:
        self.runtime.tracer.decision({"run": self.run_id, "ts": self.now(), **body})

    def _violate(self, st: NodeState, kind: ViolationKind, **extra) -> None:
        v = {"node_id": st.node_id, "attempt": st.attempt, "agent": st.agent, "kind": kind.value, "ts": self.now(), **extra}
        self.violations.append(v)
        self.runtime.tracer.violation({"run": self.run_id, **v})

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        validate_dag(self.dag)
        self.started_ts = self.now()
        name = self.session.unique_name(f"{self.coord.name}/{self.run_id}")
        self.stream = self.session.create_stream(name, {"instruction"}, self.coord.name)
        for node in self.dag.nodes:
            st = self._new_state(node, 1)
            if node.skip:
                st.to(NodeStatus.SKIPPED)
                self.outputs[node.node_id] = node.cached_output
        self._advance()

    def finish_infeasible(self, info: dict) -> None:
        self.started_ts = self.now()
        self.abort_status = FinalStatus.ABORTED_INFEASIBLE
        self._finish(FinalStatus.ABORTED_INFEASIBLE, infeasible=info)

    def _advance(self) -> None:
        if self.done:
            return
        if self.abort_status is not None:
            if not self._running():
                self._finish(self.abort_status)
            return
        order = validate_dag(self.dag)
        for nid in order:
            st = self.states[nid]
            if st.status is NodeStatus.PENDING and all(
                self.states[p].status in _DONE and p in self.outputs for p in self.dag.predecessors(nid)
            ):
                st.to(NodeStatus.READY)
                self._issue(st)
        if all(self.states[n.node_id].status in _DONE for n in self.dag.nodes) and not self._running():
            self._finish(FinalStatus.COMPLETED)

    def _issue(self, st: NodeState) -> None:
        node = self.dag.node(st.node_id)
        self.runtime.ensure_joined(node.agent)
        reply = self.session.unique_name(f"{node.agent}/{node.node_id}/out", self.coord.reserved)
        self.coord.expect_reply(reply, self, st)
        params = resolve_params(node.params, self.outputs, self.session_input)
        seq = self.stream.append(
            MessageKind.INSTRUCTION,
            {"instruction"},
            {
                "run": self.run_id,
                "node_id": node.node_id,
                "attempt": st.attempt,
                "agent": node.agent,
                "params": params,
                "reply_to": reply,
            },
            self.coord.name,
        )
        st.instruction = self.stream.messages[seq].id
        self._planned_cost[id(st)] = node.est_cost
        st.to(NodeStatus.RUNNING)
        st.started_ts = self.now()
        st.timeout = node.timeout
        self._timeouts[id(st)] = self.runtime.scheduler.call_later(
            node.timeout, lambda: self._on_timeout(st), priority=LATE
        )

    # -- results ------------------------------------------------------------

    def on_reply(self, st: NodeState, msg: Message) -> None:
        if msg.kind is MessageKind.DATA:
            if "error" in msg.tags:
                self._errors[id(st)] = msg.payload
            else:
                self._pending_output[id(st)] = (msg.payload, msg.id)
        elif msg.kind is MessageKind.EVENT and msg.payload.get("event_name") == Event.NODE_DONE:
            self._on_done(st, msg.payload)

    def _charge(self, st: NodeState, declared: Optional[float]) -> None:
        # Undeclared cost falls back to the plan's estimate for this attempt,
        # which includes any asset access cost on top of the agent's price.
        st.actual_cost = float(self._planned_cost.pop(id(st)) if declared is None else declared)
        self._planned_cost.pop(id(st), None)
        self.cost += st.actual_cost

    def _on_done(self, st: NodeState, info: dict) -> None:
        if st.status is not NodeStatus.RUNNING:
            return
        handle = self._timeouts.pop(id(st), None)
        if handle is not None:
            handle.cancel()
        st.finished_ts = self.now()
        self._charge(st, info.get("declared_cost"))
        superseded = id(st) in self.superseded
        kind = None
        if info.get("status") == "error":
            st.to(NodeStatus.FAILED)
            st.observed_quality = 0.0
            kind = ViolationKind.QUALITY
            self._violate(st, kind, detail="error", error=info.get("error"))
        else:
            q = info.get("quality")
            st.observed_quality = 1.0 if q is None else q
            decision = on_node_result(q, self.constraints, len(self.dag.nodes))
            self._decision(
                {
                    "node_id": st.node_id,
                    "attempt": st.attempt,
                    "agent": st.agent,
                    "decision": decision.value,
                    "quality": st.observed_quality,
                    "floor": quality_floor(self.constraints, len(self.dag.nodes)),
                }
            )
            payload, ref = self._pending_output.pop(id(st), (None, None))
            st.output = ref
            if decision is Decision.ACCEPT:
                st.to(NodeStatus.COMPLETED)
                if not superseded:
                    self.outputs[st.node_id] = payload
            else:
                st.to(NodeStatus.LOW_QUALITY)
                kind = ViolationKind.QUALITY
                self._violate(st, kind, quality=st.observed_quality)
        self._after_result(st, kind, superseded)

    def _on_timeout(self, st: NodeState) -> None:
        if st.status is not NodeStatus.RUNNING:
            return
        self._timeouts.pop(id(st), None)
        st.to(NodeStatus.TIMED_OUT)
        st.finished_ts = self.now()
        self._charge(st, None)
        self._violate(st, ViolationKind.TIMEOUT, timeout=st.timeout)
        self.coord.drop_reply(st)
        self.runtime.cancel(st.agent, st.instruction)
        self._after_result(st, ViolationKind.TIMEOUT, id(st) in self.superseded)

    def _after_result(self, st: NodeState, kind: Optional[ViolationKind], superseded: bool) -> None:
        if self.abort_status is None and self.cost > self.constraints.max_cost + EPS:
            self._violate(st, ViolationKind.BUDGET, cost=self.cost, max_cost=self.constraints.max_cost)
            self._abort(FinalStatus.ABORTED_BUDGET)
        elif kind is not None and not superseded and self.abort_status is None:
            self._intervene(st, kind)
        self._advance()

    # -- interventions ------------------------------------------------------

    def _intervene(self, st: NodeState, kind: ViolationKind) -> None:
        node = self.dag.node(st.node_id)
        self.exclusions.add(st.agent)
        used = self.used.setdefault(node.step_id, set())
        used.add(st.agent)
        action = intervene(
            st.node_id,
            kind,
            self.dag,
            self.task,
            self.coord.registry,
            self.constraints,
            tried=self.exclusions | used,
            replans=self.replans,
        )
        self._decision({"node_id": st.node_id, "attempt": st.attempt, "kind": kind.value, **action.to_dict()})
        if action.action is Action.RETRY_ALTERNATE:
            step = self.task.step(node.step_id)
            rec = self.coord.registry.get(action.agent)
            self.dag = self.dag.with_node(_reassign(node, step, rec, self.constraints))
            self._new_state(self.dag.node(st.node_id), st.attempt + 1)
        elif action.action is Action.REPLAN:
            self.replans += 1
            completed = {
                nid: (s.agent, self.outputs[nid])
                for nid, s in self.states.items()
                if s.status in _DONE and nid in self.outputs
            }
            try:
                new = self.coord.replan(self, st.node_id, completed)
            except Infeasible as exc:
                self._decision({"node_id": st.node_id, "replan": "infeasible", **exc.to_dict()})
                self._abort(FinalStatus.ABORTED_INFEASIBLE)
                return
            self._reconcile(new)
        else:
            self._abort(FinalStatus.ABORTED_REPLAN_LIMIT)

    def _reconcile(self, new: PlanDag) -> None:
        for node in new.nodes:
            cur = self.states.get(node.node_id)
            if cur is None:
                self._new_state(node, 1)
                continue
            if node.skip and cur.status in _DONE:
                if cur.status is NodeStatus.COMPLETED:
                    rec = self._new_state(node, cur.attempt + 1)
                    rec.to(NodeStatus.SKIPPED)
                    rec.observed_quality = cur.observed_quality
                    rec.output = cur.output
                    self.outputs[node.node_id] = node.cached_output
            elif cur.status in (NodeStatus.PENDING, NodeStatus.READY):
                cur.agent = node.agent
            elif cur.status is NodeStatus.RUNNING:
                if cur.agent != node.agent:
                    self.superseded.add(id(cur))
                    self._new_state(node, cur.attempt + 1)
            else:
                self.outputs.pop(node.node_id, None)
                self._new_state(node, cur.attempt + 1)
        self.dag = new

    def _abort(self, status: FinalStatus) -> None:
        self.abort_status = status
        for st in self.states.values():
            if st.status in (NodeStatus.PENDING, NodeStatus.READY):
                st.to(NodeStatus.CANCELLED)

    # -- reporting ----------------------------------------------------------

    def _finish(self, status: FinalStatus, infeasible: Optional[dict] = None) -> None:
        self.done = True
        cost = sum(s.actual_cost for s in self.history if s.status is not NodeStatus.SKIPPED)
        quality = 1.0
        for node in self.dag.nodes if self.dag is not None else ():
            st = self.states.get(node.node_id)
            if st is not None and st.status in _DONE and st.observed_quality is not None:
                quality *= st.observed_quality
        output = None
        if status is FinalStatus.COMPLETED:
            sinks = self.dag.sinks()
            output = self.outputs[sinks[0]] if len(sinks) == 1 else {s: self.outputs[s] for s in sinks}
        self.report = ExecutionReport(
            nodes=list(self.history),
            violations=list(self.violations),
            replans=self.replans,
            totals={"cost": cost, "latency": self.now() - self.started_ts, "quality": quality},
            final_status=status,
            run_id=self.run_id,
            plan_method=self.dag.method if self.dag is not None else None,
            est_total=self.dag.est_total.to_dict() if self.dag is not None else None,
            output=output,
            infeasible=infeasible,
        )
        self.runtime.tracer.report(self.report.to_dict())
        self.session.announce(
            Event.RUN_COMPLETED, self.coord.name, run=self.run_id, final_status=status.value
        )
        if self.stream is not None:
            self.stream.close()
        self.coord.run_finished(self)
        if self.on_done is not None:
            self.on_done(self.report)


class CoordinatorAgent(AgentInstance):
    """System agent that executes plans published on ``plan``-tagged streams."""

    def __init__(
        self,
        runtime: AgentRuntime,
        registry: AgentRegistry,
        *,
        name: str = "coordinator",
        planner=None,
        constraints: Optional[Constraints] = None,
    ) -> None:
        record = AgentRecord(
            name,
            description="executes plan DAGs",
            inclusion_rule="plan",
            exclusion_rule="replan",
            output_tags={"instruction"},
        )
        super().__init__(record, runtime)
        self.registry = registry
        self.planner = planner
        self.constraints = constraints or Constraints()
        self.runs: list[ExecutionRun] = []
        self.reserved: set[str] = set()
        self._expected: dict[str, tuple] = {}
        self._reply_cursors: dict[str, tuple] = {}

    # plan intake

    def handle(self, stream: StreamLog, msg: Message) -> None:
        payload = msg.payload
        task, constraints, session_input = None, self.constraints, None
        if self.planner is not None:
            task, constraints, session_input = self.planner.context_for(stream.name)
        run = ExecutionRun(self, None, task, constraints, session_input, f"run{len(self.runs) + 1}")
        self.runs.append(run)
        if "infeasible" in payload:
            run.finish_infeasible(payload["infeasible"])
            return
        run.dag = PlanDag.from_dict(payload)
        run.start()

    def start(self, dag: PlanDag, task: TaskSpec, constraints: Constraints, session_input: Any = None) -> ExecutionRun:
        if self.name not in self.runtime.agents:
            self.runtime.add(self)
        self.runtime.ensure_joined(self.name)
        run = ExecutionRun(self, dag, task, constraints, session_input, f"run{len(self.runs) + 1}")
        self.runs.append(run)
        run.start()
        return run

    def execute(self, dag: PlanDag, task: TaskSpec, constraints: Constraints, session_input: Any = None) -> ExecutionReport:
        """Run ``dag`` to completion on the runtime's scheduler and report."""
        run = self.start(dag, task, constraints, session_input)
        self.runtime.scheduler.run(until=lambda: run.done)
        return run.report

    def replan(self, run: ExecutionRun, failed_node: str, completed: dict) -> PlanDag:
        if self.planner is not None:
            return self.planner.replan_for(run, failed_node, completed)
        new = replan(run.dag, failed_node, run.task, self.registry, run.constraints, run.exclusions, completed)
        publish_plan(new, self.session, producer=self.name, extra_tags={"replan"})
        return new

    def run_finished(self, run: ExecutionRun) -> None:
        if self.planner is not None and hasattr(self.planner, "record_feedback"):
            self.planner.record_feedback(run.report)

    # reply tracking

    def expect_reply(self, name: str, run: ExecutionRun, st: NodeState) -> None:
        self.reserved.add(name)
        self._expected[name] = (run, st)
        if name in self.session.streams:
            self._open_reply(self.session.streams[name])

    def drop_reply(self, st: NodeState) -> None:
        for name, (run, s) in list(self._expected.items()):
            if s is st:
                del self._expected[name]
                self._reply_cursors.pop(name, None)

    def _open_reply(self, stream: StreamLog) -> None:
        if stream.name in self._reply_cursors:
            return
        run, st = self._expected[stream.name]
        self._reply_cursors[stream.name] = (stream.open_cursor(0, owner=self.name), run, st)
        self.runtime.watch(stream, self)

    def on_session_event(self, msg: Message) -> None:
        super().on_session_event(msg)
        if msg.payload.get("event_name") == Event.STREAM_OPENED and msg.payload.get("stream") in self._expected:
            self._open_reply(self.session.streams[msg.payload["stream"]])

    def _poll_extra(self) -> bool:
        progressed = False
        for name in list(self._reply_cursors):
            entry = self._reply_cursors.get(name)
            if entry is None:
                continue
            cursor, run, st = entry
            for m in cursor.drain():
                progressed = True
                run.on_reply(st, m)
            if cursor.stream.closed and cursor.position == len(cursor.stream):
                self._reply_cursors.pop(name, None)
                self._expected.pop(name, None)
        return progressed
