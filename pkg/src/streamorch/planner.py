"""Task planning: map task steps onto registered agents under constraints.

A plan assigns one agent to every step. Plan cost is the sum of node costs,
latency is the critical path through the step graph, quality is the product
of node qualities. Among feasible assignments the planner returns the one
with minimum cost, breaking ties by lower latency, then higher quality,
then the lexicographically smallest agent-name vector.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

from .registry import AgentRecord, AgentRegistry
from .streams import MessageKind, Session, StreamLog

__all__ = [
    "Constraints",
    "DagCycleError",
    "EXHAUSTIVE_LIMIT",
    "Estimate",
    "Infeasible",
    "PlanDag",
    "PlanNode",
    "Step",
    "TaskSpec",
    "TaskSpecError",
    "binding_refs",
    "estimate",
    "node_estimate",
    "node_timeout",
    "plan",
    "publish_infeasible",
    "publish_plan",
    "replan",
    "resolve_params",
    "validate_dag",
]

EXHAUSTIVE_LIMIT = 100_000
EPS = 1e-9


class TaskSpecError(ValueError):
    pass


class DagCycleError(ValueError):
    def __init__(self, cycle: Sequence[str]) -> None:
        self.cycle = list(cycle)
        super().__init__(f"cycle detected: {' -> '.join(self.cycle)}")


class Infeasible(Exception):
    """No plan exists. ``reason`` is one of no_agent, constraints, field, join_key."""

    def __init__(self, reason: str, detail: Optional[str] = None, heuristic: bool = False) -> None:
        self.reason = reason
        self.detail = detail
        self.heuristic = heuristic
        msg = f"INFEASIBLE({reason}" + (f", {detail})" if detail else ")")
        super().__init__(msg)

    def to_dict(self) -> dict:
        return {"reason": self.reason, "detail": self.detail, "heuristic": self.heuristic}


class Estimate(NamedTuple):
    cost: float
    latency: int
    quality: float

    def to_dict(self) -> dict:
        return {"cost": self.cost, "latency": self.latency, "quality": self.quality}


def _num_or_none(x: float) -> Optional[float]:
    return None if math.isinf(x) else x


@dataclass(frozen=True)
class Constraints:
    max_cost: float = math.inf
    max_latency: float = math.inf
    min_quality: float = 0.0
    node_timeout_default: float = math.inf
    max_replans: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_quality <= 1.0:
            raise ValueError(f"min_quality must lie in [0, 1], got {self.min_quality!r}")
        if self.max_cost < 0 or self.max_latency < 0 or self.node_timeout_default < 0:
            raise ValueError("cost, latency and timeout bounds must be non-negative")
        if self.max_replans < 0:
            raise ValueError("max_replans must be non-negative")

    def admits(self, est: Estimate) -> bool:
        return (
            est.cost <= self.max_cost + EPS
            and est.latency <= self.max_latency
            and est.quality >= self.min_quality - EPS
        )

    def to_dict(self) -> dict:
        return {
            "max_cost": _num_or_none(self.max_cost),
            "max_latency": _num_or_none(self.max_latency),
            "min_quality": self.min_quality,
            "node_timeout_default": _num_or_none(self.node_timeout_default),
            "max_replans": self.max_replans,
        }

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> Constraints:
        d = dict(d or {})
        unknown = set(d) - {"max_cost", "max_latency", "min_quality", "node_timeout_default", "max_replans"}
        if unknown:
            raise ValueError(f"unknown constraint keys {sorted(unknown)}")

        def bound(key):
            v = d.get(key)
            return math.inf if v is None else v

        return cls(
            max_cost=bound("max_cost"),
            max_latency=bound("max_latency"),
            min_quality=d.get("min_quality", 0.0),
            node_timeout_default=bound("node_timeout_default"),
            max_replans=d.get("max_replans", 3),
        )


# -- parameter bindings -----------------------------------------------------
#
# A parameter value is a literal unless it is (or contains) a single-key
# mapping {"$from": step_id} (that step's output) or {"$input": path} (a key
# of the session input; "" means the whole input).


def _is_ref(value: Any, key: str) -> bool:
    return isinstance(value, dict) and len(value) == 1 and key in value


def binding_refs(params: Any) -> set[str]:
    if _is_ref(params, "$from"):
        return {params["$from"]}
    if isinstance(params, dict):
        return set().union(*(binding_refs(v) for v in params.values())) if params else set()
    if isinstance(params, list):
        return set().union(*(binding_refs(v) for v in params)) if params else set()
    return set()


def resolve_params(params: Any, outputs: Mapping[str, Any], session_input: Any = None) -> Any:
    if _is_ref(params, "$from"):
        return outputs[params["$from"]]
    if _is_ref(params, "$input"):
        path = params["$input"]
        value = session_input
        if path:
            for part in str(path).split("."):
                value = value.get(part) if isinstance(value, dict) else None
        return value
    if isinstance(params, dict):
        return {k: resolve_params(v, outputs, session_input) for k, v in params.items()}
    if isinstance(params, list):
        return [resolve_params(v, outputs, session_input) for v in params]
    return params


@dataclass(frozen=True)
class Step:
    step_id: str
    capability: str
    params: dict = field(default_factory=dict)
    # Data-plan steps carry their operation, asset and the asset's overheads.
    op: Optional[str] = None
    asset: Optional[str] = None
    extra_cost: float = 0.0
    extra_latency: int = 0
    extra_quality: float = 1.0

    def to_dict(self) -> dict:
        d = {"step_id": self.step_id, "capability": self.capability, "params": self.params}
        if self.op is not None:
            d.update(op=self.op, asset=self.asset, extra_cost=self.extra_cost,
                     extra_latency=self.extra_latency, extra_quality=self.extra_quality)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> Step:
        try:
            return cls(
                step_id=str(d["step_id"]),
                capability=str(d["capability"]),
                params=dict(d.get("params", {})),
                op=d.get("op"),
                asset=d.get("asset"),
                extra_cost=d.get("extra_cost", 0.0),
                extra_latency=d.get("extra_latency", 0),
                extra_quality=d.get("extra_quality", 1.0),
            )
        except KeyError as exc:
            raise TaskSpecError(f"step is missing {exc}") from None


@dataclass
class TaskSpec:
    steps: list
    deps: set = field(default_factory=set)

    def __post_init__(self) -> None:
        self.steps = [s if isinstance(s, Step) else Step.from_dict(s) for s in self.steps]
        self.deps = {tuple(e) for e in self.deps}

    def step(self, step_id: str) -> Step:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)

    def edges(self) -> set:
        out = set(self.deps)
        for s in self.steps:
            for ref in binding_refs(s.params):
                out.add((ref, s.step_id))
        return out

    def validate(self) -> list[str]:
        """Check references and acyclicity; return the steps in topological order."""
        if not self.steps:
            raise TaskSpecError("task has no steps")
        ids = [s.step_id for s in self.steps]
        if len(set(ids)) != len(ids):
            raise TaskSpecError("duplicate step ids")
        known = set(ids)
        for a, b in self.edges():
            if a not in known or b not in known:
                raise TaskSpecError(f"edge ({a}, {b}) references an unknown step")
        try:
            return _topo_order(ids, self.edges())
        except DagCycleError as exc:
            raise TaskSpecError(str(exc)) from None

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps], "deps": sorted([list(e) for e in self.deps])}

    @classmethod
    def from_dict(cls, d: Mapping) -> TaskSpec:
        if "steps" not in d:
            raise TaskSpecError("task needs a 'steps' list")
        return cls(steps=[Step.from_dict(s) for s in d["steps"]], deps={tuple(e) for e in d.get("deps", [])})


@dataclass(frozen=True)
class PlanNode:
    node_id: str
    step_id: str
    agent: str
    params: dict
    timeout: int
    est_cost: float
    est_latency: int
    est_quality: float
    op: Optional[str] = None
    asset: Optional[str] = None
    skip: bool = False
    cached_output: Any = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlanDag:
    nodes: list
    edges: tuple
    est_total: Estimate
    method: str = "exhaustive"

    def __post_init__(self) -> None:
        self.edges = tuple(sorted(tuple(e) for e in self.edges))

    def node(self, node_id: str) -> PlanNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def predecessors(self, node_id: str) -> list[str]:
        return [a for a, b in self.edges if b == node_id]

    def successors(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def sinks(self) -> list[str]:
        sources = {a for a, _ in self.edges}
        return [n.node_id for n in self.nodes if n.node_id not in sources]

    def agents(self) -> list[str]:
        return [n.agent for n in self.nodes]

    def with_node(self, node: PlanNode) -> PlanDag:
        nodes = [node if n.node_id == node.node_id else n for n in self.nodes]
        dag = PlanDag(nodes, self.edges, self.est_total, self.method)
        dag.est_total = estimate(dag)
        return dag

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "est_total": self.est_total.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> PlanDag:
        nodes = [PlanNode(**n) for n in d["nodes"]]
        est = d["est_total"]
        return cls(
            nodes=nodes,
            edges=tuple(tuple(e) for e in d["edges"]),
            est_total=Estimate(est["cost"], est["latency"], est["quality"]),
            method=d.get("method", "exhaustive"),
        )


def _topo_order(ids: Iterable[str], edges: Iterable[tuple]) -> list[str]:
    ids = list(ids)
    indeg = {i: 0 for i in ids}
    succ: dict[str, list[str]] = {i: [] for i in ids}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    heap = [i for i in ids if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(order) < len(ids):
        raise DagCycleError(_find_cycle({i for i in ids if indeg[i] > 0}, edges))
    return order


def _find_cycle(remaining: set, edges: Iterable[tuple]) -> list[str]:
    # Every leftover node has a leftover predecessor; walking predecessors
    # must revisit a node, and the revisited stretch is a cycle.
    pred: dict[str, str] = {}
    for a, b in sorted(edges):
        if a in remaining and b in remaining and b not in pred:
            pred[b] = a
    node = min(remaining)
    seen: list[str] = []
    while node not in seen:
        seen.append(node)
        node = pred[node]
    cycle = seen[seen.index(node):]
    cycle.reverse()
    k = cycle.index(min(cycle))
    return cycle[k:] + cycle[:k]


def validate_dag(dag: PlanDag) -> list[str]:
    """Topological order of the nodes (Kahn, ties by node_id); raises on cycles."""
    ids = [n.node_id for n in dag.nodes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate node ids")
    known = set(ids)
    for a, b in dag.edges:
        if a not in known or b not in known:
            raise ValueError(f"edge ({a}, {b}) references an unknown node")
    return _topo_order(ids, dag.edges)


def _critical_path(order: Sequence[str], edges: Iterable[tuple], latency: Mapping[str, int]) -> int:
    preds: dict[str, list[str]] = {n: [] for n in order}
    for a, b in edges:
        preds[b].append(a)
    finish: dict[str, int] = {}
    for n in order:
        finish[n] = latency[n] + max((finish[p] for p in preds[n]), default=0)
    return max(finish.values(), default=0)


def estimate(dag: PlanDag) -> Estimate:
    order = validate_dag(dag)
    cost = 0.0
    quality = 1.0
    for n in dag.nodes:
        cost += n.est_cost
        quality *= n.est_quality
    latency = _critical_path(order, dag.edges, {n.node_id: n.est_latency for n in dag.nodes})
    return Estimate(cost, latency, quality)


def node_estimate(step: Step, record: AgentRecord) -> Estimate:
    return Estimate(
        record.cost_per_call + step.extra_cost,
        record.latency_est + step.extra_latency,
        record.quality_est * step.extra_quality,
    )


def node_timeout(record: AgentRecord, constraints: Constraints) -> int:
    cap = constraints.node_timeout_default
    t = 2 * record.latency_est
    return int(t if math.isinf(cap) else min(t, cap))


def _make_dag(task: TaskSpec, assignment: Sequence[AgentRecord], constraints: Constraints, method: str) -> PlanDag:
    nodes = []
    for step, rec in zip(task.steps, assignment):
        est = node_estimate(step, rec)
        nodes.append(
            PlanNode(
                node_id=step.step_id,
                step_id=step.step_id,
                agent=rec.name,
                params=step.params,
                timeout=node_timeout(rec, constraints),
                est_cost=est.cost,
                est_latency=est.latency,
                est_quality=est.quality,
                op=step.op,
                asset=step.asset,
            )
        )
    dag = PlanDag(nodes, tuple(task.edges()), Estimate(0.0, 0, 1.0), method)
    dag.est_total = estimate(dag)
    return dag


class _Evaluator:
    """Scores assignments (tuples of candidate indices) without building DAGs."""

    def __init__(self, task: TaskSpec, cands: Sequence[Sequence[AgentRecord]]) -> None:
        self.order_idx = [i for i in _topo_index(task)]
        ids = [s.step_id for s in task.steps]
        pos = {sid: i for i, sid in enumerate(ids)}
        self.preds = [[] for _ in ids]
        for a, b in task.edges():
            self.preds[pos[b]].append(pos[a])
        self.est = [[node_estimate(step, r) for r in cs] for step, cs in zip(task.steps, cands)]
        self.names = [[r.name for r in cs] for cs in cands]

    def __call__(self, choice: Sequence[int]) -> tuple[Estimate, tuple]:
        cost = 0.0
        quality = 1.0
        for i, c in enumerate(choice):
            e = self.est[i][c]
            cost += e.cost
            quality *= e.quality
        finish = [0] * len(choice)
        for i in self.order_idx:
            finish[i] = self.est[i][choice[i]].latency + max((finish[p] for p in self.preds[i]), default=0)
        est = Estimate(cost, max(finish, default=0), quality)
        names = tuple(self.names[i][c] for i, c in enumerate(choice))
        return est, (est.cost, est.latency, -est.quality, names)


def _topo_index(task: TaskSpec) -> list[int]:
    ids = [s.step_id for s in task.steps]
    pos = {sid: i for i, sid in enumerate(ids)}
    return [pos[sid] for sid in _topo_order(ids, task.edges())]


def _violation(est: Estimate, c: Constraints) -> float:
    def over(x, bound):
        if math.isinf(bound):
            return 0.0
        return max(0.0, x - bound) / (1.0 + abs(bound))

    return over(est.cost, c.max_cost) + over(est.latency, c.max_latency) + max(0.0, c.min_quality - est.quality)


def _greedy(evaluate: _Evaluator, cands, constraints: Constraints) -> Optional[tuple]:
    choice = []
    for cs in cands:
        best = min(range(len(cs)), key=lambda j: (-(cs[j].quality_est / (1.0 + cs[j].cost_per_call)), cs[j].cost_per_call, cs[j].name))
        choice.append(best)
    # Repair: single-step swaps that most reduce the constraint violation.
    for _ in range(4 * len(cands) + 4):
        est, key = evaluate(choice)
        v = _violation(est, constraints)
        if v <= 0:
            break
        best_swap = None
        for i, cs in enumerate(cands):
            for j in range(len(cs)):
                if j == choice[i]:
                    continue
                trial = list(choice)
                trial[i] = j
                e2, k2 = evaluate(trial)
                cand = (_violation(e2, constraints), k2)
                if best_swap is None or cand < best_swap[0]:
                    best_swap = (cand, trial)
        if best_swap is None or best_swap[0][0] >= v:
            break
        choice = best_swap[1]
    est, key = evaluate(choice)
    if not constraints.admits(est):
        return None
    # Descent: cheaper single swaps that stay feasible.
    improved = True
    while improved:
        improved = False
        for i, cs in enumerate(cands):
            for j in range(len(cs)):
                trial = list(choice)
                trial[i] = j
                e2, k2 = evaluate(trial)
                if constraints.admits(e2) and k2 < key:
                    choice, key, improved = trial, k2, True
    return tuple(choice)


def plan(
    task: TaskSpec,
    registry: AgentRegistry,
    constraints: Constraints,
    excluded: Iterable[str] = frozenset(),
) -> PlanDag:
    """Choose an agent per step minimising cost subject to ``constraints``.

    Exhaustive over all assignments when there are at most
    ``EXHAUSTIVE_LIMIT`` of them, otherwise a greedy pick with a repair pass
    (the resulting plan has ``method == "heuristic"``).
    """
    task.validate()
    excluded = set(excluded)
    cands = []
    for step in task.steps:
        cs = [r for r in registry.candidates(step.capability) if r.name not in excluded]
        if not cs:
            raise Infeasible("no_agent", step.step_id)
        cands.append(cs)
    evaluate = _Evaluator(task, cands)
    space = math.prod(len(cs) for cs in cands)
    if space <= EXHAUSTIVE_LIMIT:
        best = None
        for choice in itertools.product(*(range(len(cs)) for cs in cands)):
            est, key = evaluate(choice)
            if constraints.admits(est) and (best is None or key < best[0]):
                best = (key, choice)
        if best is None:
            raise Infeasible("constraints")
        choice, method = best[1], "exhaustive"
    else:
        choice = _greedy(evaluate, cands, constraints)
        if choice is None:
            raise Infeasible("constraints", heuristic=True)
        method = "heuristic"
    return _make_dag(task, [cs[j] for cs, j in zip(cands, choice)], constraints, method)


def replan(
    old: PlanDag,
    failed_node: str,
    task: TaskSpec,
    registry: AgentRegistry,
    constraints: Constraints,
    prior_exclusions: Iterable[str] = frozenset(),
    completed: Optional[Mapping[str, tuple]] = None,
) -> PlanDag:
    """Plan again without the failed node's agent.

    ``completed`` maps node_id to ``(agent, output)`` for finished nodes. A
    new node is marked ``skip`` (carrying the cached output) when the same
    agent already completed it with the same parameters and every node it
    depends on is skipped too.
    """
    failed_agent = old.node(failed_node).agent
    new = plan(task, registry, constraints, set(prior_exclusions) | {failed_agent})
    completed = completed or {}
    skipped: set[str] = set()
    nodes = {n.node_id: n for n in new.nodes}
    for nid in validate_dag(new):
        n = nodes[nid]
        done = completed.get(nid)
        try:
            old_node = old.node(nid)
        except KeyError:
            old_node = None
        if (
            done is not None
            and done[0] == n.agent
            and old_node is not None
            and old_node.params == n.params
            and all(p in skipped for p in new.predecessors(nid))
        ):
            nodes[nid] = replace(n, skip=True, cached_output=done[1])
            skipped.add(nid)
    new.nodes = [nodes[n.node_id] for n in new.nodes]
    return new


def publish_plan(dag: PlanDag, session: Session, producer: str = "planner", extra_tags: Iterable[str] = ()) -> StreamLog:
    """Open a ``plan``-tagged stream holding the serialised DAG, then close it."""
    validate_dag(dag)
    stream = session.create_stream(session.unique_name(f"{producer}/plan"), {"plan", *extra_tags}, producer)
    stream.append(MessageKind.DATA, (), dag.to_dict(), producer)
    stream.close()
    return stream


def publish_infeasible(err: Infeasible, session: Session, producer: str = "planner") -> StreamLog:
    stream = session.create_stream(session.unique_name(f"{producer}/plan"), {"plan", "infeasible"}, producer)
    stream.append(MessageKind.DATA, (), {"infeasible": err.to_dict()}, producer)
    stream.close()
    return stream
