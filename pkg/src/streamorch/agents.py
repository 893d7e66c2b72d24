"""Agent runtime: session membership, trigger rules, and worker-pool dispatch.

Agents never block. An append to a watched stream schedules a poll of the
watching agent at the current simulated instant; the poll drains the agent's
cursors and hands triggered messages to its workers. A processor run is
computed when a worker picks the message up and its outputs are appended
``latency`` ms later on the scheduler's clock.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .registry import AgentRecord
from .sim import Handle, Scheduler
from .streams import Event, Message, MessageKind, Poll, Session, StreamLog
from .tags import match_tags

log = logging.getLogger(__name__)

__all__ = [
    "AgentInstance",
    "AgentRuntime",
    "OutputEntry",
    "ProcessorContext",
    "ProcessorError",
    "ProcessorOutput",
    "WorkerState",
    "check_input",
    "run_processor",
    "should_trigger",
]


class ProcessorError(Exception):
    pass


class WorkerState(str, enum.Enum):
    IDLE = "IDLE"
    BUSY = "BUSY"


@dataclass
class OutputEntry:
    payload: Any
    target: str = "out"
    kind: MessageKind = MessageKind.DATA
    tags: frozenset = frozenset()


@dataclass
class ProcessorOutput:
    entries: list = field(default_factory=list)
    quality: Optional[float] = None
    declared_cost: Optional[float] = None
    # Overrides the agent's latency estimate for this run.
    latency: Optional[int] = None

    def __post_init__(self) -> None:
        if self.quality is not None and not 0.0 <= self.quality <= 1.0:
            raise ProcessorError(f"processor quality {self.quality!r} outside [0, 1]")
        if self.declared_cost is not None and self.declared_cost < 0:
            raise ProcessorError(f"declared cost {self.declared_cost!r} is negative")

    @classmethod
    def single(cls, payload: Any, **kw) -> ProcessorOutput:
        return cls([OutputEntry(payload)], **kw)

    @property
    def primary(self) -> Any:
        for e in reversed(self.entries):
            if e.target == "out" and e.kind is MessageKind.DATA:
                return e.payload
        return None


@dataclass
class ProcessorContext:
    agent: str
    seed: int
    now: int
    tables: dict = field(default_factory=dict)
    node_id: Optional[str] = None
    message_id: Optional[str] = None


Processor = Callable[[Any, ProcessorContext], ProcessorOutput]

_PRIMITIVE_SIGS = {
    "text": (str,),
    "int": (int,),
    "number": (int, float),
    "record": (dict,),
    "list": (list,),
}


def check_input(input_sig, payload: Any) -> None:
    """Check a payload against an input signature.

    Primitive names (``text``, ``int``, ``number``, ``record``, ``list``)
    constrain the payload type; ``any`` accepts everything. For a record
    payload every other name must be one of its keys.
    """
    for name in input_sig:
        if name == "any":
            continue
        types = _PRIMITIVE_SIGS.get(name)
        if types is not None:
            if isinstance(payload, bool) or not isinstance(payload, types):
                if not (isinstance(payload, dict) and name in payload):
                    raise ProcessorError(f"expected {name} input, got {type(payload).__name__}")
        elif not (isinstance(payload, dict) and name in payload):
            raise ProcessorError(f"input is missing {name!r}")


def run_processor(record: AgentRecord, processor: Processor, payload: Any, ctx: ProcessorContext) -> ProcessorOutput:
    check_input(record.input_sig, payload)
    out = processor(payload, ctx)
    if not isinstance(out, ProcessorOutput):
        out = ProcessorOutput.single(out)
    return out


def should_trigger(record: AgentRecord, stream_tags, message_tags) -> bool:
    tags = frozenset(stream_tags) | frozenset(message_tags)
    return match_tags(record.inclusion_rule, tags) and not match_tags(record.exclusion_rule, tags)


@dataclass
class _Run:
    worker: _Worker
    message: Message
    stream: StreamLog
    started: int
    latency: int
    output: Optional[ProcessorOutput] = None
    error: Optional[str] = None
    handle: Optional[Handle] = None


@dataclass
class _Worker:
    index: int
    state: WorkerState = WorkerState.IDLE
    run: Optional[_Run] = None


class AgentInstance:
    """A joined agent: its cursors, its worker pool and its FIFO backlog."""

    def __init__(self, record: AgentRecord, runtime: AgentRuntime, processor: Optional[Processor] = None) -> None:
        self.record = record
        self.runtime = runtime
        self.processor = processor
        self.workers = [_Worker(i) for i in range(record.worker_count)]
        self.queue: deque = deque()
        self.subscriptions: dict[str, Any] = {}
        self.session_cursor = None
        self.attached = False
        self._poll_scheduled = False
        self.trigger_evals: Counter = Counter()
        self.in_flight = 0
        self.max_in_flight = 0
        self.busy_ms = 0
        self.runs = 0

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"

    @property
    def name(self) -> str:
        return self.record.name

    @property
    def session(self) -> Session:
        return self.runtime.session

    @property
    def scheduler(self) -> Scheduler:
        return self.runtime.scheduler

    # -- observation --------------------------------------------------------

    def wake(self) -> None:
        if not self._poll_scheduled:
            self._poll_scheduled = True
            self.scheduler.call_soon(self.poll)

    def poll(self) -> None:
        self._poll_scheduled = False
        progressed = True
        while progressed:
            progressed = False
            if self.session_cursor is not None:
                for msg in self.session_cursor.drain():
                    progressed = True
                    self.on_session_event(msg)
            for cursor in list(self.subscriptions.values()):
                for msg in cursor.drain():
                    progressed = True
                    self.on_message(cursor.stream, msg)
            if self._poll_extra():
                progressed = True

    def _poll_extra(self) -> bool:
        return False

    def on_session_event(self, msg: Message) -> None:
        if msg.payload.get("event_name") != Event.STREAM_OPENED:
            return
        stream = self.session.stream_by_id(msg.payload["stream_id"])
        self.trigger_evals[("stream", stream.id)] += 1
        if should_trigger(self.record, stream.tags, frozenset()) and stream.producer != self.name:
            self.subscribe(stream)

    def subscribe(self, stream: StreamLog) -> None:
        if stream.id in self.subscriptions:
            return
        self.subscriptions[stream.id] = stream.open_cursor(0, owner=self.name)
        self.runtime.watch(stream, self)

    def on_message(self, stream: StreamLog, msg: Message) -> None:
        self.trigger_evals[("msg", msg.id)] += 1
        if not should_trigger(self.record, stream.tags, msg.tags):
            return
        if msg.kind is MessageKind.EVENT:
            return
        if msg.kind is MessageKind.INSTRUCTION and msg.payload.get("agent") != self.name:
            return
        self.handle(stream, msg)

    def handle(self, stream: StreamLog, msg: Message) -> None:
        self.dispatch(msg, stream)

    # -- dispatch -----------------------------------------------------------

    def dispatch(self, msg: Message, stream: StreamLog) -> None:
        if msg.id in self.runtime.cancelled:
            self.runtime.cancelled.discard(msg.id)
            return
        worker = next((w for w in self.workers if w.state is WorkerState.IDLE), None)
        if worker is None:
            self.queue.append((msg, stream))
        else:
            self._start(worker, msg, stream)

    def _context(self, msg: Message) -> ProcessorContext:
        node_id = msg.payload.get("node_id") if msg.kind is MessageKind.INSTRUCTION else None
        return ProcessorContext(
            agent=self.name,
            seed=self.runtime.seed,
            now=self.scheduler.now(),
            tables=self.runtime.tables,
            node_id=node_id,
            message_id=msg.id,
        )

    def _start(self, worker: _Worker, msg: Message, stream: StreamLog) -> None:
        payload = msg.payload["params"] if msg.kind is MessageKind.INSTRUCTION else msg.payload
        default_latency = getattr(self.processor, "latency", None)
        if default_latency is None:
            default_latency = self.record.latency_est
        run = _Run(worker, msg, stream, self.scheduler.now(), default_latency)
        try:
            if self.processor is None:
                raise ProcessorError(f"agent {self.name!r} has no processor")
            run.output = run_processor(self.record, self.processor, payload, self._context(msg))
            if run.output.latency is not None:
                run.latency = int(run.output.latency)
        except Exception as exc:  # processor failures become {error} messages
            log.debug("processor %s failed: %s", self.name, exc)
            run.error = f"{type(exc).__name__}: {exc}"
        worker.state = WorkerState.BUSY
        worker.run = run
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        run.handle = self.scheduler.call_later(run.latency, lambda: self._complete(run))

    def _free(self, run: _Run) -> None:
        run.worker.state = WorkerState.IDLE
        run.worker.run = None
        self.in_flight -= 1
        self.busy_ms += self.scheduler.now() - run.started
        self.runs += 1
        if self.queue:
            msg, stream = self.queue.popleft()
            self._start(run.worker, msg, stream)

    def _output_stream(self, run: _Run, target: str) -> StreamLog:
        msg = run.message
        if msg.kind is MessageKind.INSTRUCTION:
            base = msg.payload.get("reply_to") or f"{self.name}/{msg.payload.get('node_id')}/out"
        else:
            base = f"{self.name}/{run.stream.name}/out"
        name = base if target == "out" else base[: -len("out")] + target
        session = self.session
        if name in session.streams and not session.streams[name].closed:
            return session.streams[name]
        return session.create_stream(session.unique_name(name), self.record.output_tags, self.name)

    def _complete(self, run: _Run) -> None:
        msg = run.message
        touched: dict[str, StreamLog] = {}
        if run.error is None:
            for entry in run.output.entries:
                stream = touched.get(entry.target) or self._output_stream(run, entry.target)
                touched[entry.target] = stream
                stream.append(entry.kind, entry.tags, entry.payload, self.name)
        else:
            stream = self._output_stream(run, "out")
            touched["out"] = stream
            stream.append(
                MessageKind.DATA,
                {"error"},
                {"error": run.error, "agent": self.name, "input": msg.id},
                self.name,
            )
        if msg.kind is MessageKind.INSTRUCTION:
            out = touched.get("out") or self._output_stream(run, "out")
            touched["out"] = out
            out.append(
                MessageKind.EVENT,
                {"done"},
                {
                    "event_name": Event.NODE_DONE,
                    "agent_id": self.name,
                    "node_id": msg.payload.get("node_id"),
                    "attempt": msg.payload.get("attempt"),
                    "instruction": msg.id,
                    "status": "ok" if run.error is None else "error",
                    "error": run.error,
                    "quality": None if run.output is None else run.output.quality,
                    "declared_cost": None if run.output is None else run.output.declared_cost,
                },
                self.name,
            )
            for stream in touched.values():
                stream.close()
        self._free(run)

    def cancel(self, msg_id: str) -> bool:
        """Drop a queued or in-flight run for ``msg_id``. Returns True if found."""
        for item in list(self.queue):
            if item[0].id == msg_id:
                self.queue.remove(item)
                return True
        for worker in self.workers:
            run = worker.run
            if run is not None and run.message.id == msg_id:
                run.handle.cancel()
                self.runtime.tracer.decision(
                    {
                        "action": "discard",
                        "agent": self.name,
                        "instruction": msg_id,
                        "tags": ["stale"],
                        "payload": None if run.output is None else run.output.primary,
                        "error": run.error,
                    }
                )
                self._free(run)
                return True
        return False


class _NullTracer:
    def decision(self, body: dict) -> None:
        pass

    def violation(self, body: dict) -> None:
        pass

    def report(self, body: dict) -> None:
        pass


class AgentRuntime:
    """Hosts the agent instances of one session on one scheduler."""

    def __init__(self, session: Session, scheduler: Scheduler, *, seed: int = 0, tables: Optional[dict] = None, tracer=None) -> None:
        if session.clock is not scheduler.clock:
            raise ValueError("session and scheduler must share one clock")
        self.session = session
        self.scheduler = scheduler
        self.seed = seed
        self.tables = tables if tables is not None else {}
        self.tracer = tracer if tracer is not None else _NullTracer()
        self.agents: dict[str, AgentInstance] = {}
        self.cancelled: set[str] = set()
        self._watchers: dict[str, list[AgentInstance]] = {}
        self.appended = 0
        session.add_listener(self._on_append)

    def _on_append(self, stream: StreamLog, msg: Message) -> None:
        self.appended += 1
        for agent in self._watchers.get(stream.id, ()):
            agent.wake()

    def watch(self, stream: StreamLog, agent: AgentInstance) -> None:
        watchers = self._watchers.setdefault(stream.id, [])
        if agent not in watchers:
            watchers.append(agent)
        agent.wake()

    def add(self, agent: AgentInstance) -> AgentInstance:
        if agent.name in self.agents:
            raise ValueError(f"agent {agent.name!r} already spawned")
        self.agents[agent.name] = agent
        return agent

    def spawn(self, record: AgentRecord, processor: Optional[Processor] = None) -> AgentInstance:
        return self.add(AgentInstance(record, self, processor))

    def attach(self, agent: AgentInstance) -> None:
        """Start observing the session for an agent that is already a participant."""
        if agent.attached:
            return
        agent.attached = True
        agent.session_cursor = self.session.session_stream.open_cursor(0, owner=agent.name)
        self.watch(self.session.session_stream, agent)

    def join_session(self, agent: AgentInstance) -> None:
        self.session.join(agent.name)
        self.attach(agent)

    def ensure_joined(self, name: str) -> AgentInstance:
        agent = self.agents[name]
        if name not in self.session.participants:
            self.join_session(agent)
        else:
            self.attach(agent)
        return agent

    def leave_session(self, agent: AgentInstance) -> None:
        self.session.leave(agent.name)
        agent.attached = False
        agent.session_cursor = None
        for watchers in self._watchers.values():
            if agent in watchers:
                watchers.remove(agent)

    def cancel(self, agent_name: str, msg_id: str) -> None:
        agent = self.agents.get(agent_name)
        if agent is None or not agent.cancel(msg_id):
            self.cancelled.add(msg_id)

    def busy_time(self) -> dict[str, int]:
        return {name: a.busy_ms for name, a in sorted(self.agents.items())}
