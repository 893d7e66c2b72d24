"""Shared builders for tests: a bare runtime with stub agents and a coordinator."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Callable, Optional

from streamorch.agents import AgentRuntime, ProcessorOutput
from streamorch.coordinator import CoordinatorAgent
from streamorch.registry import AgentRecord, AgentRegistry
from streamorch.sim import Scheduler, SimClock
from streamorch.streams import Session, SessionConfig, SessionHub

ACCEPTANCE_LINES: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@dataclass
class Rig:
    session: Session
    scheduler: Scheduler
    runtime: AgentRuntime
    registry: AgentRegistry
    coordinator: CoordinatorAgent

    def run(self) -> None:
        self.scheduler.run()


def fixed(payload: Any = "ok", *, quality: Optional[float] = None, latency: Optional[int] = None,
          cost: Optional[float] = None) -> Callable:
    """A processor returning ``payload`` (or ``payload(input)`` when callable)."""

    def proc(inp, ctx):
        value = payload(inp) if callable(payload) else payload
        return ProcessorOutput.single(value, quality=quality, latency=latency, declared_cost=cost)

    return proc


def make_rig(agents: list, *, tables: Optional[dict] = None, seed: int = 0,
             rng: Optional[random.Random] = None, session_id: str = "t") -> Rig:
    """``agents`` is a list of (AgentRecord, processor) pairs."""
    clock = SimClock()
    scheduler = Scheduler(clock, rng=rng)
    session = SessionHub().create_session(SessionConfig(session_id, repl=True), clock)
    runtime = AgentRuntime(session, scheduler, seed=seed, tables=tables or {})
    registry = AgentRegistry()
    for rec, proc in agents:
        registry.register_agent(rec)
        runtime.spawn(rec, proc)
    coordinator = CoordinatorAgent(runtime, registry)
    runtime.add(coordinator)
    return Rig(session, scheduler, runtime, registry, coordinator)


def agent(name: str, capability: str, *, cost: float = 1.0, latency: int = 10, quality: float = 0.9,
          workers: int = 1, **kw) -> AgentRecord:
    return AgentRecord(name, capabilities={capability}, cost_per_call=cost, latency_est=latency,
                       quality_est=quality, worker_count=workers, **kw)


def randomized_stream_schedule(seed: int, producers: int = 4, per_producer: int = 25, consumers: int = 3):
    """Interleave producers and cursor consumers on a seeded scheduler.

    Producers append at random times; consumers poll at random times and
    keep reading until END. Returns (stream, returned seqs per producer,
    observed seqs per consumer).
    """
    from streamorch.streams import END, PENDING, MessageKind

    rng = random.Random(seed)
    clock = SimClock()
    sched = Scheduler(clock, rng=random.Random(seed + 1))
    session = SessionHub().create_session(SessionConfig(f"s{seed}", repl=True), clock)
    stream = session.create_stream("shared", {"data"}, "p0")
    returned = {p: [] for p in range(producers)}
    observed = {c: [] for c in range(consumers)}
    remaining = [producers * per_producer]

    for p in range(producers):
        for k in range(per_producer):
            def produce(p=p, k=k):
                returned[p].append(stream.append(MessageKind.DATA, set(), {"p": p, "k": k}, f"p{p}"))
                remaining[0] -= 1
                if remaining[0] == 0:
                    stream.close()
            sched.call_at(rng.randint(0, 50), produce)

    def consumer(c: int):
        cursor = stream.open_cursor(0, owner=f"c{c}")

        def consume():
            for _ in range(rng.randint(1, 5)):
                item = cursor.next()
                if item is END:
                    return
                if item is PENDING:
                    break
                observed[c].append((item.seq, item.payload["p"], item.payload["k"]))
            sched.call_later(rng.randint(0, 3), consume)

        return consume

    for c in range(consumers):
        sched.call_at(rng.randint(0, 50), consumer(c))
    sched.run()
    return stream, returned, observed


def random_planner_instance(rng: random.Random, max_steps: int = 5, max_cands: int = 4):
    """A random TaskSpec, registry and constraints for optimality checks."""
    from streamorch.planner import Constraints, Step, TaskSpec

    n = rng.randint(1, max_steps)
    steps = [Step(f"s{i}", f"cap{i}") for i in range(n)]
    deps = {(f"s{i}", f"s{j}") for j in range(n) for i in range(j) if rng.random() < 0.4}
    registry = AgentRegistry()
    for i in range(n):
        for j in range(rng.randint(1, max_cands)):
            registry.register_agent(AgentRecord(
                f"a{i}_{j}", capabilities={f"cap{i}"},
                cost_per_call=rng.randint(0, 10), latency_est=rng.randint(1, 30),
                quality_est=round(rng.uniform(0.5, 1.0), 2),
            ))
    inf = float("inf")
    constraints = Constraints(
        max_cost=rng.choice([inf, rng.randint(3, 10 * n)]),
        max_latency=rng.choice([inf, rng.randint(10, 30 * n)]),
        min_quality=rng.choice([0.0, round(rng.uniform(0.2, 0.9), 2)]),
    )
    return TaskSpec(steps, deps), registry, constraints


def brute_force_plan(task, registry, constraints, excluded=frozenset()):
    """Exhaustive oracle: (best cost or None, number of feasible assignments).

    Latency is the longest source-to-sink path, found by enumerating every
    path explicitly rather than by dynamic programming.
    """
    import itertools

    ids = [s.step_id for s in task.steps]
    edges = task.edges()
    succ = {i: [b for a, b in edges if a == i] for i in ids}
    sources = [i for i in ids if not any(b == i for _, b in edges)]

    def paths(node):
        if not succ[node]:
            return [[node]]
        return [[node] + rest for nxt in succ[node] for rest in paths(nxt)]

    all_paths = [p for s in sources for p in paths(s)]
    cands = [[r for r in registry if s.capability in r.capabilities and r.available and r.name not in excluded]
             for s in task.steps]
    if any(not cs for cs in cands):
        return None, 0
    best = None
    feasible = 0
    for combo in itertools.product(*cands):
        by_id = dict(zip(ids, combo))
        cost = sum(r.cost_per_call for r in combo)
        quality = 1.0
        for r in combo:
            quality *= r.quality_est
        latency = max(sum(by_id[x].latency_est for x in p) for p in all_paths)
        ok = (cost <= constraints.max_cost + 1e-9 and latency <= constraints.max_latency
              and quality >= constraints.min_quality - 1e-9)
        if ok:
            feasible += 1
            best = cost if best is None else min(best, cost)
    return best, feasible


def data_rig(tables: dict, *, seed: int = 0) -> Rig:
    """A rig whose agents are the built-in data-op stubs."""
    from streamorch.data_planner import default_data_agents, default_data_processors

    procs = default_data_processors()
    return make_rig([(rec, procs[rec.name]) for rec in default_data_agents()], tables=tables, seed=seed)
