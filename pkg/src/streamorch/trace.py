"""Line-delimited trace records and the checks run over them.

A trace file is a header line, one line per record, and a trailer line
carrying the record count (so a file cut at a line boundary is still
detected as truncated). Every line is JSON with sorted keys and compact
separators, which keeps traces byte-stable across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .streams import SYSTEM, Event, Message, MessageKind, Session, StreamLog

__all__ = [
    "AnnouncementError",
    "RECORD_KINDS",
    "TRACE_FORMAT",
    "TraceParseError",
    "Tracer",
    "check_announcements",
    "dumps_line",
    "parse_trace",
]

TRACE_FORMAT = "streamorch-trace"
TRACE_VERSION = 1
RECORD_KINDS = ("MESSAGE", "EVENT", "DECISION", "VIOLATION", "REPORT")


class TraceParseError(ValueError):
    def __init__(self, message: str, record: Optional[int] = None) -> None:
        self.record = record
        super().__init__(message if record is None else f"record {record}: {message}")


class AnnouncementError(AssertionError):
    pass


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class Tracer:
    """Collects trace records from a session and from the coordinator."""

    def __init__(self, clock) -> None:
        self.clock = clock
        self.records: list[dict] = []
        self._names: dict[str, str] = {}

    def attach(self, session: Session) -> None:
        # Session creation announces before anyone can listen; back-fill it.
        for msg in session.all_messages():
            self._on_message(session.stream_by_id(msg.stream_id), msg)
        session.add_listener(self._on_message)

    def _add(self, kind: str, ts: int, body: Any) -> None:
        self.records.append({"n": len(self.records), "ts": ts, "kind": kind, "body": body})

    def _on_message(self, stream: StreamLog, msg: Message) -> None:
        body = msg.to_dict()
        body["stream"] = stream.name
        self._add("EVENT" if msg.kind is MessageKind.EVENT else "MESSAGE", msg.ts, body)

    def decision(self, body: dict) -> None:
        self._add("DECISION", self.clock.now(), body)

    def violation(self, body: dict) -> None:
        self._add("VIOLATION", self.clock.now(), body)

    def report(self, body: dict) -> None:
        self._add("REPORT", self.clock.now(), body)

    def lines(self) -> list[str]:
        return [dumps_line(r) for r in self.records]

    def render(self, header: dict) -> str:
        out = [dumps_line({"header": header})]
        out.extend(self.lines())
        out.append(dumps_line({"trailer": {"records": len(self.records)}}))
        return "\n".join(out) + "\n"


@dataclass
class ParsedTrace:
    header: dict
    lines: list  # raw record lines, byte-exact
    records: list


def parse_trace(text: str) -> ParsedTrace:
    raw = text.split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    if not raw:
        raise TraceParseError("empty trace")
    try:
        head = json.loads(raw[0])
        header = head["header"]
    except (ValueError, KeyError, TypeError):
        raise TraceParseError("first line is not a trace header") from None
    if header.get("format") != TRACE_FORMAT:
        raise TraceParseError(f"unknown trace format {header.get('format')!r}")
    lines, records = [], []
    trailer = None
    for i, line in enumerate(raw[1:]):
        if trailer is not None:
            raise TraceParseError("content after trailer", i)
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise TraceParseError(f"malformed JSON ({exc.msg})", i) from None
        if isinstance(obj, dict) and "trailer" in obj:
            trailer = obj["trailer"]
            continue
        if not isinstance(obj, dict) or obj.get("kind") not in RECORD_KINDS or obj.get("n") != i:
            raise TraceParseError("not a trace record", i)
        lines.append(line)
        records.append(obj)
    if trailer is None:
        raise TraceParseError("trace is truncated (no trailer)", len(records))
    if trailer.get("records") != len(records):
        raise TraceParseError(f"trailer counts {trailer.get('records')} records, found {len(records)}", len(records))
    return ParsedTrace(header, lines, records)


def check_announcements(records: Iterable[dict]) -> list[str]:
    """Problems with session-stream announcements in a trace (empty when clean).

    Checks: SESSION_CREATED comes first; each agent joins before it produces
    anything and leaves after its last message; the streams opened are
    exactly the streams that carry messages or were closed, and every opened
    stream was closed exactly once.
    """
    records = [r for r in records if r["kind"] in ("MESSAGE", "EVENT")]
    problems: list[str] = []
    if not records:
        return ["trace has no messages"]
    first = records[0]["body"]
    if not isinstance(first["payload"], dict) or first["payload"].get("event_name") != Event.SESSION_CREATED:
        problems.append("first message is not SESSION_CREATED")
    joined: dict[str, bool] = {}
    last_msg: dict[str, int] = {}
    left_at: dict[str, int] = {}
    opened: dict[str, int] = {}
    closed: dict[str, int] = {}
    used: set[str] = set()
    session_stream = first["stream"]
    for i, rec in enumerate(records):
        body = rec["body"]
        producer = body["producer"]
        payload = body["payload"]
        ev = payload.get("event_name") if body["kind"] == "EVENT" and isinstance(payload, dict) else None
        if body["stream"] != session_stream:
            used.add(body["stream"])
        if ev == Event.JOIN:
            joined[payload["agent_id"]] = True
            continue
        if ev == Event.LEAVE:
            joined[payload["agent_id"]] = False
            left_at[payload["agent_id"]] = i
            continue
        if ev == Event.STREAM_OPENED:
            opened[payload["stream"]] = opened.get(payload["stream"], 0) + 1
        elif ev == Event.STREAM_CLOSED:
            closed[payload["stream"]] = closed.get(payload["stream"], 0) + 1
        if producer == SYSTEM:
            continue
        if not joined.get(producer):
            problems.append(f"record {rec['n']}: {producer} produced a message while not joined")
        last_msg[producer] = i
    for agent, i in last_msg.items():
        if agent in left_at and left_at[agent] < i:
            problems.append(f"{agent} produced a message after leaving")
    for name in sorted(set(opened) | set(closed) | used):
        if opened.get(name, 0) != 1:
            problems.append(f"stream {name!r} opened {opened.get(name, 0)} times")
        if closed.get(name, 0) != 1:
            problems.append(f"stream {name!r} closed {closed.get(name, 0)} times")
    return problems
