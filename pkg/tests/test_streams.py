from __future__ import annotations

import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import randomized_stream_schedule
from streamorch.sim import SimClock
from streamorch.streams import (
    END,
    PENDING,
    ClosedStreamError,
    CursorRangeError,
    DuplicateSessionError,
    Event,
    InactiveSessionError,
    MessageKind,
    NameCollisionError,
    SessionConfig,
    SessionHub,
    SessionStatus,
)


def new_session(agents=(), sid="s1"):
    return SessionHub().create_session(SessionConfig(sid, agents=list(agents), repl=True), SimClock())


def events(session):
    return [m.payload["event_name"] for m in session.session_stream.messages]


class TestSession:
    def test_empty_session_has_created_only(self):
        s = new_session()
        assert events(s) == [Event.SESSION_CREATED]
        assert s.session_stream.messages[0].kind is MessageKind.EVENT

    def test_joins_in_config_order(self):
        s = new_session(["user", "planner", "coordinator"])
        msgs = s.session_stream.messages
        assert events(s) == [Event.SESSION_CREATED, Event.JOIN, Event.JOIN, Event.JOIN]
        assert [m.payload["agent_id"] for m in msgs[1:]] == ["user", "planner", "coordinator"]

    def test_duplicate_id_rejected(self):
        hub = SessionHub()
        hub.create_session(SessionConfig("s1"))
        with pytest.raises(DuplicateSessionError):
            hub.create_session(SessionConfig("s1"))

    def test_finish_closes_streams_and_leaves(self):
        s = new_session(["a"])
        s.create_stream("x", {"data"}, "a")
        s.finish()
        assert s.status is SessionStatus.COMPLETED
        assert events(s)[-3:] == [Event.STREAM_CLOSED, Event.LEAVE, Event.SESSION_COMPLETED]
        assert s.session_stream.closed


class TestCreateStream:
    def test_announces_opened(self):
        s = new_session()
        s.create_stream("plan_out", {"plan"}, "planner")
        last = s.session_stream.messages[-1].payload
        assert last["event_name"] == Event.STREAM_OPENED
        assert last["stream"] == "plan_out"
        assert last["tags"] == ["plan"]

    def test_name_collision(self):
        s = new_session()
        s.create_stream("x", set(), "p")
        with pytest.raises(NameCollisionError):
            s.create_stream("x", set(), "p")

    def test_inactive_session(self):
        s = new_session()
        s.finish(SessionStatus.ABORTED)
        with pytest.raises(InactiveSessionError):
            s.create_stream("x", set(), "p")


class TestAppend:
    def test_seqs(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        assert [x.append(MessageKind.DATA, set(), i, "p") for i in range(5)] == [0, 1, 2, 3, 4]

    def test_tags_union_with_stream(self):
        s = new_session()
        x = s.create_stream("x", {"plan"}, "p")
        x.append(MessageKind.DATA, {"draft"}, "v", "p")
        assert x.messages[0].tags == frozenset({"plan", "draft"})

    def test_ts_from_clock(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        s.clock.advance_to(42)
        x.append(MessageKind.DATA, set(), 1, "p")
        assert x.messages[0].ts == 42

    def test_closed_rejects(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        x.close()
        with pytest.raises(ClosedStreamError):
            x.append(MessageKind.DATA, set(), 1, "p")

    def test_payload_detached(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        rec = {"a": [1]}
        x.append(MessageKind.DATA, set(), rec, "p")
        rec["a"].append(2)
        assert x.messages[0].payload == {"a": [1]}

    @pytest.mark.parametrize("bad", [None, True, object()])
    def test_payload_types(self, bad):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        with pytest.raises(TypeError):
            x.append(MessageKind.DATA, set(), bad, "p")

    def test_threads_4x25(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        got = {p: [] for p in range(4)}
        barrier = threading.Barrier(4)

        def work(p):
            barrier.wait()
            for k in range(25):
                got[p].append(x.append(MessageKind.DATA, set(), {"p": p, "k": k}, f"p{p}"))

        threads = [threading.Thread(target=work, args=(p,)) for p in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(q for seqs in got.values() for q in seqs) == list(range(100))
        for seqs in got.values():
            assert seqs == sorted(seqs)
        for m in x.messages:
            assert got[m.payload["p"]][m.payload["k"]] == m.seq


class TestClose:
    def test_double_close_single_event(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        x.close()
        x.close()
        assert events(s).count(Event.STREAM_CLOSED) == 1

    def test_empty_closed_cursor_end(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        x.close()
        assert x.open_cursor(0).next() is END


class TestCursor:
    def fill(self, n):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        for i in range(n):
            x.append(MessageKind.DATA, set(), i, "p")
        return x

    def test_advance(self):
        c = self.fill(3).open_cursor(0)
        assert [c.next().seq for _ in range(3)] == [0, 1, 2]
        assert c.next() is PENDING

    def test_open_mid(self):
        assert self.fill(10).open_cursor(5).next().seq == 5

    def test_tail_is_valid(self):
        assert self.fill(3).open_cursor(3).next() is PENDING

    def test_out_of_range(self):
        with pytest.raises(CursorRangeError):
            self.fill(3).open_cursor(4)

    def test_end_after_close(self):
        x = self.fill(2)
        c = x.open_cursor(2)
        x.close()
        assert c.next() is END

    def test_threaded_drain(self):
        s = new_session()
        x = s.create_stream("x", set(), "p")
        seen = []

        def consume():
            c = x.open_cursor(0)
            while True:
                item = c.next()
                if item is END:
                    return
                if item is PENDING:
                    x.wait(c.position, timeout=1.0)
                    continue
                seen.append(item.seq)

        t = threading.Thread(target=consume)
        t.start()
        for i in range(100):
            x.append(MessageKind.DATA, set(), i, "p")
        x.close()
        t.join(5)
        assert seen == list(range(100))


@pytest.mark.parametrize("seed", range(20))
def test_randomized_schedules_agree(seed):
    stream, returned, observed = randomized_stream_schedule(seed)
    expected = [(m.seq, m.payload["p"], m.payload["k"]) for m in stream.messages]
    assert [e[0] for e in expected] == list(range(100))
    for seqs in returned.values():
        assert seqs == sorted(seqs)
    for obs in observed.values():
        assert obs == expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["open", "close", "join", "leave"]), max_size=30))
def test_broadcast_completeness(ops):
    s = new_session()
    opened, closed, joined, left = [], [], [], []
    members: list = []
    for i, op in enumerate(ops):
        if op == "open":
            s.create_stream(f"x{i}", set(), "p")
            opened.append(f"x{i}")
        elif op == "close" and len(closed) < len(opened):
            name = opened[len(closed)]
            s.stream(name).close()
            s.stream(name).close()
            closed.append(name)
        elif op == "join":
            s.join(f"a{i}")
            members.append(f"a{i}")
            joined.append(f"a{i}")
        elif op == "leave" and members:
            who = members.pop(0)
            s.leave(who)
            left.append(who)
    by_kind: dict = {}
    for m in s.session_stream.messages:
        p = m.payload
        by_kind.setdefault(p["event_name"], []).append(p.get("stream", p["agent_id"]))
    assert by_kind.get(Event.STREAM_OPENED, []) == opened
    assert by_kind.get(Event.STREAM_CLOSED, []) == closed
    assert by_kind.get(Event.JOIN, []) == joined
    assert by_kind.get(Event.LEAVE, []) == left
