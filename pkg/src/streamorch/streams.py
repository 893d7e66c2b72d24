"""Append-only tagged message streams, cursors, and sessions.

Every session owns a broadcast *session stream*. Joins, leaves and the
opening and closing of every other stream are announced there as EVENT
messages, so any participant can discover work by reading it.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .sim import SimClock
from .tags import normalize_tags

__all__ = [
    "ClosedStreamError",
    "Cursor",
    "CursorRangeError",
    "DuplicateSessionError",
    "Event",
    "InactiveSessionError",
    "Message",
    "MessageKind",
    "NameCollisionError",
    "Poll",
    "Session",
    "SessionConfig",
    "SessionHub",
    "SessionStatus",
    "StreamError",
    "StreamLog",
]

SYSTEM = "system"
SESSION_STREAM = "session"


class StreamError(Exception):
    pass


class DuplicateSessionError(StreamError):
    pass


class NameCollisionError(StreamError):
    pass


class InactiveSessionError(StreamError):
    pass


class ClosedStreamError(StreamError):
    pass


class CursorRangeError(StreamError, IndexError):
    pass


class AlreadyJoinedError(StreamError):
    pass


class NotJoinedError(StreamError):
    pass


class MessageKind(str, enum.Enum):
    DATA = "DATA"
    INSTRUCTION = "INSTRUCTION"
    EVENT = "EVENT"


class SessionStatus(str, enum.Enum):
    ACTIVE = "ACTIVE"
    COMPLETED = "COMPLETED"
    ABORTED = "ABORTED"


class Event:
    SESSION_CREATED = "SESSION_CREATED"
    SESSION_COMPLETED = "SESSION_COMPLETED"
    SESSION_ABORTED = "SESSION_ABORTED"
    JOIN = "JOIN"
    LEAVE = "LEAVE"
    STREAM_OPENED = "STREAM_OPENED"
    STREAM_CLOSED = "STREAM_CLOSED"
    RUN_COMPLETED = "RUN_COMPLETED"
    NODE_DONE = "NODE_DONE"


class Poll(enum.Enum):
    PENDING = "PENDING"
    END = "END"


PENDING = Poll.PENDING
END = Poll.END


def _freeze_payload(payload: Any) -> Any:
    if isinstance(payload, bool) or not isinstance(payload, (int, float, str, dict, list)):
        raise TypeError(
            f"payload must be an integer, text or structured record, got {type(payload).__name__}"
        )
    # Round-trip through JSON: rejects non-serialisable values and detaches
    # the stored copy from the caller's object.
    return json.loads(json.dumps(payload))


@dataclass(frozen=True)
class Message:
    id: str
    stream_id: str
    seq: int
    kind: MessageKind
    tags: frozenset
    payload: Any
    producer: str
    ts: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "stream_id": self.stream_id,
            "seq": self.seq,
            "kind": self.kind.value,
            "tags": sorted(self.tags),
            "payload": self.payload,
            "producer": self.producer,
            "ts": self.ts,
        }


class StreamLog:
    """A totally ordered, append-only message sequence inside one session."""

    def __init__(self, session: Session, id: str, name: str, tags: frozenset, producer: str) -> None:
        self.session = session
        self.id = id
        self.name = name
        self.tags = tags
        self.producer = producer
        self.messages: list[Message] = []
        self.closed = False

    def __len__(self) -> int:
        return len(self.messages)

    def __repr__(self) -> str:
        return f"StreamLog({self.id!r}, name={self.name!r}, len={len(self.messages)}, closed={self.closed})"

    def append(self, kind: MessageKind, tags: Iterable[str], payload: Any, producer: str) -> int:
        kind = MessageKind(kind)
        msg_tags = normalize_tags(tags) | self.tags
        payload = _freeze_payload(payload)
        session = self.session
        with session.lock:
            if self.closed:
                raise ClosedStreamError(f"stream {self.name!r} is closed")
            seq = len(self.messages)
            msg = Message(
                id=f"{session.id}:{self.id}:{seq}",
                stream_id=self.id,
                seq=seq,
                kind=kind,
                tags=msg_tags,
                payload=payload,
                producer=producer,
                ts=session.clock.now(),
            )
            self.messages.append(msg)
            session._notify(self, msg)
        return seq

    def close(self) -> None:
        """Mark end-of-stream. Closing an already closed stream does nothing."""
        session = self.session
        with session.lock:
            if self.closed:
                return
            self.closed = True
            if self is not session.session_stream:
                session._announce(
                    Event.STREAM_CLOSED, self.producer, stream=self.name, stream_id=self.id
                )
            session._cond.notify_all()

    def open_cursor(self, start: int = 0, owner: str = SYSTEM) -> Cursor:
        with self.session.lock:
            if not 0 <= start <= len(self.messages):
                raise CursorRangeError(
                    f"cursor position {start} outside [0, {len(self.messages)}] for {self.name!r}"
                )
        return Cursor(self, start, owner)

    def wait(self, position: int, timeout: Optional[float] = None) -> bool:
        """Block until a message exists at ``position`` or the stream closes.

        Returns False on timeout. Only useful with real threads; the
        scheduler-driven runtime never blocks and relies on wakeups instead.
        """
        cond = self.session._cond
        with cond:
            return cond.wait_for(lambda: position < len(self.messages) or self.closed, timeout)


@dataclass
class Cursor:
    stream: StreamLog
    position: int
    owner: str

    @property
    def stream_id(self) -> str:
        return self.stream.id

    def next(self):
        """Return the next Message, or ``Poll.PENDING`` / ``Poll.END`` at the tail."""
        stream = self.stream
        with stream.session.lock:
            if self.position < len(stream.messages):
                msg = stream.messages[self.position]
                self.position += 1
                return msg
            return END if stream.closed else PENDING

    def drain(self) -> list[Message]:
        out = []
        while True:
            item = self.next()
            if isinstance(item, Poll):
                return out
            out.append(item)


@dataclass
class SessionConfig:
    id: str
    agents: list = field(default_factory=list)
    owner: str = "user"
    repl: bool = False
    input: Any = None
    budget: Any = None


class Session:
    def __init__(self, config: SessionConfig, clock=None) -> None:
        self.id = config.id
        self.config = config
        self.clock = clock if clock is not None else SimClock()
        self.budget = config.budget
        self.status = SessionStatus.ACTIVE
        self.lock = threading.RLock()
        self._cond = threading.Condition(self.lock)
        self._listeners: list[Callable[[StreamLog, Message], None]] = []
        self._stream_counter = 0
        self.streams: dict[str, StreamLog] = {}
        self.participants: list[str] = []
        self.session_stream = self._new_stream(SESSION_STREAM, frozenset({"session"}), SYSTEM)

    def __repr__(self) -> str:
        return f"Session({self.id!r}, status={self.status.value}, streams={len(self.streams)})"

    def _new_stream(self, name: str, tags: frozenset, producer: str) -> StreamLog:
        sid = f"st{self._stream_counter}"
        self._stream_counter += 1
        return StreamLog(self, sid, name, tags, producer)

    def add_listener(self, fn: Callable[[StreamLog, Message], None]) -> None:
        """Register ``fn(stream, message)``; called under the session lock on every append."""
        self._listeners.append(fn)

    def _notify(self, stream: StreamLog, msg: Message) -> None:
        for fn in list(self._listeners):
            fn(stream, msg)
        self._cond.notify_all()

    def _announce(self, event_name: str, agent_id: str, producer: Optional[str] = None, **extra) -> int:
        payload = {"event_name": event_name, "agent_id": agent_id, **extra}
        return self.session_stream.append(
            MessageKind.EVENT, {event_name.lower()}, payload, producer or agent_id
        )

    def _require_active(self) -> None:
        if self.status is not SessionStatus.ACTIVE:
            raise InactiveSessionError(f"session {self.id!r} is {self.status.value}")

    @property
    def active(self) -> bool:
        return self.status is SessionStatus.ACTIVE

    def stream(self, name: str) -> StreamLog:
        if name == SESSION_STREAM:
            return self.session_stream
        return self.streams[name]

    def stream_by_id(self, stream_id: str) -> StreamLog:
        if stream_id == self.session_stream.id:
            return self.session_stream
        for s in self.streams.values():
            if s.id == stream_id:
                return s
        raise KeyError(stream_id)

    def create_stream(self, name: str, tags: Iterable[str], producer: str) -> StreamLog:
        tags = normalize_tags(tags)
        with self.lock:
            self._require_active()
            if name in self.streams or name == SESSION_STREAM:
                raise NameCollisionError(f"stream name {name!r} already used in session {self.id!r}")
            stream = self._new_stream(name, tags, producer)
            self.streams[name] = stream
            self._announce(
                Event.STREAM_OPENED, producer, stream=name, stream_id=stream.id, tags=sorted(tags)
            )
        return stream

    def unique_name(self, base: str, reserved: Iterable[str] = ()) -> str:
        taken = set(self.streams) | set(reserved)
        if base not in taken:
            return base
        k = 2
        while f"{base}~{k}" in taken:
            k += 1
        return f"{base}~{k}"

    def join(self, agent_id: str) -> None:
        with self.lock:
            self._require_active()
            if agent_id in self.participants:
                raise AlreadyJoinedError(f"agent {agent_id!r} already joined session {self.id!r}")
            self.participants.append(agent_id)
            self._announce(Event.JOIN, agent_id)

    def leave(self, agent_id: str) -> None:
        with self.lock:
            if agent_id not in self.participants:
                raise NotJoinedError(f"agent {agent_id!r} is not in session {self.id!r}")
            self.participants.remove(agent_id)
            self._announce(Event.LEAVE, agent_id)

    def announce(self, event_name: str, agent_id: str, **extra) -> int:
        with self.lock:
            self._require_active()
            return self._announce(event_name, agent_id, **extra)

    def finish(self, status: SessionStatus = SessionStatus.COMPLETED) -> None:
        """Close open streams, announce departures, and end the session."""
        status = SessionStatus(status)
        if status is SessionStatus.ACTIVE:
            raise ValueError("finish() needs a terminal status")
        with self.lock:
            if not self.active:
                return
            for stream in list(self.streams.values()):
                stream.close()
            for agent_id in list(self.participants):
                self.leave(agent_id)
            name = Event.SESSION_COMPLETED if status is SessionStatus.COMPLETED else Event.SESSION_ABORTED
            self._announce(name, self.config.owner, producer=SYSTEM)
            self.status = status
            self.session_stream.close()

    def all_messages(self) -> list[Message]:
        """Every message in the session, ordered by (ts, stream creation, seq)."""
        streams = [self.session_stream, *self.streams.values()]
        msgs = [m for s in streams for m in s.messages]
        order = {s.id: i for i, s in enumerate(streams)}
        return sorted(msgs, key=lambda m: (m.ts, order[m.stream_id], m.seq))


class SessionHub:
    """Creates sessions and enforces session-id uniqueness."""

    def __init__(self) -> None:
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create_session(self, config: SessionConfig, clock=None) -> Session:
        with self._lock:
            if config.id in self.sessions:
                raise DuplicateSessionError(f"session id {config.id!r} already exists")
            session = Session(config, clock)
            self.sessions[config.id] = session
        session._announce(Event.SESSION_CREATED, config.owner, producer=SYSTEM)
        for agent_id in config.agents:
            session.join(agent_id)
        return session

