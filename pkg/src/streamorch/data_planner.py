"""Retrieval planning over the data registry.

A request names target fields, optional filters and an optional aggregate.
The pipeline is assembled by a fixed rule table, applied in order:

1. DISCOVER picks the cheapest asset set covering every target and filter
   field (exhaustive over at most eight top-ranked candidates).
2. One QUERY per chosen asset applies the filters whose field it holds.
3. EXTRACT follows a QUERY when a target is nested (``profile.city``)
   inside a record or text field of that asset.
4. Several assets are joined pairwise, in a chain, on shared join keys.
5. SUMMARIZE or COMPARE is appended per the request's aggregate.

Each step's capability is the lowercase op name, so the task planner binds
steps to data-op agents exactly as it binds any other step. QUERY and
EXTRACT steps add their asset's access cost, latency and quality to the
agent's own estimates.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from .planner import Constraints, Infeasible, PlanDag, Step, TaskSpec, plan
from .registry import AgentRecord, AgentRegistry, DataAssetRecord, DataOp, DataRegistry, asset_score
from .tables import split_aggregate

__all__ = [
    "Aggregate",
    "DataPlan",
    "DATA_OP_KINDS",
    "DataPlanError",
    "MAX_CANDIDATES",
    "RetrievalRequest",
    "asset_provides",
    "default_data_agents",
    "execute_data_plan",
    "plan_retrieval",
]

MAX_CANDIDATES = 8
_NESTABLE = ("record", "text")


class Aggregate(str, enum.Enum):
    NONE = "NONE"
    SUMMARIZE = "SUMMARIZE"
    COMPARE = "COMPARE"


class DataPlanError(RuntimeError):
    """Execution of a data plan did not complete; ``report`` says why."""

    def __init__(self, report) -> None:
        self.report = report
        super().__init__(f"data plan ended {report.final_status.value}")


@dataclass
class RetrievalRequest:
    target_fields: list
    filters: list = field(default_factory=list)
    aggregate: Aggregate = Aggregate.NONE
    constraints: Constraints = field(default_factory=Constraints)

    def __post_init__(self) -> None:
        self.target_fields = [str(f) for f in self.target_fields]
        if not self.target_fields:
            raise ValueError("a retrieval request needs at least one target field")
        self.filters = [(str(f), str(p)) for f, p in self.filters]
        for f, _ in self.filters:
            if "." in f:
                raise ValueError(f"filter field {f!r} must be a top-level field")
        self.aggregate = Aggregate(self.aggregate)

    def to_dict(self) -> dict:
        return {
            "target_fields": list(self.target_fields),
            "filters": [list(f) for f in self.filters],
            "aggregate": self.aggregate.value,
            "constraints": self.constraints.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> RetrievalRequest:
        return cls(
            target_fields=list(d["target_fields"]),
            filters=[tuple(f) for f in d.get("filters", [])],
            aggregate=Aggregate(str(d.get("aggregate", "NONE")).upper()),
            constraints=Constraints.from_dict(d.get("constraints")),
        )


@dataclass
class DataPlan:
    dag: PlanDag
    task: TaskSpec
    cover: tuple
    cover_cost: float
    request: RetrievalRequest

    def ops(self) -> list[str]:
        return [n.op for n in self.dag.nodes]


def asset_provides(asset: DataAssetRecord, target: str, aggregate: Aggregate = Aggregate.NONE) -> Optional[str]:
    """How ``asset`` supplies ``target``: "direct", "extract", "aggregate", or None."""
    names = asset.field_names
    if target in names:
        return "direct"
    if "." in target:
        base = target.split(".", 1)[0]
        if base in names and asset.field_type(base) in _NESTABLE and DataOp.EXTRACT in asset.supported_ops:
            return "extract"
        return None
    if aggregate is Aggregate.SUMMARIZE:
        if target == "count":
            return "aggregate"
        agg = split_aggregate(target)
        if agg is not None and agg[1] in names:
            return "aggregate"
    return None


def _lookup_fields(target: str, aggregate: Aggregate) -> list[str]:
    out = [target]
    if "." in target:
        out.append(target.split(".", 1)[0])
    elif aggregate is Aggregate.SUMMARIZE:
        agg = split_aggregate(target)
        if agg is not None:
            out.append(agg[1])
    return out


def _candidates(req: RetrievalRequest, registry: DataRegistry) -> list[DataAssetRecord]:
    found: dict[str, DataAssetRecord] = {}
    wanted = list(req.target_fields) + [f for f, _ in req.filters]
    for target in wanted:
        if target == "count" and req.aggregate is Aggregate.SUMMARIZE:
            pool = [a for a in registry if a.available and DataOp.QUERY in a.supported_ops]
        else:
            pool = [a for f in _lookup_fields(target, req.aggregate) for a in registry.search_assets([f], DataOp.QUERY)]
        for a in pool:
            found.setdefault(a.name, a)
    ranked = sorted(found.values(), key=lambda a: (-asset_score(a), a.name))
    return ranked[:MAX_CANDIDATES]


def _covers(assets: Sequence[DataAssetRecord], req: RetrievalRequest) -> bool:
    for t in req.target_fields:
        if not any(asset_provides(a, t, req.aggregate) for a in assets):
            return False
    for f, _ in req.filters:
        if not any(f in a.field_names for a in assets):
            return False
    return True


def _join_chain(assets: Sequence[DataAssetRecord]) -> Optional[list[tuple]]:
    """Order ``assets`` into a join chain; None if some asset cannot be reached."""
    ordered = sorted(assets, key=lambda a: a.name)
    chain = [(ordered[0], ())]
    keys = set(ordered[0].join_keys)
    rest = ordered[1:]
    while rest:
        for a in rest:
            shared = keys & set(a.join_keys)
            if shared:
                chain.append((a, tuple(sorted(shared))))
                keys |= set(a.join_keys)
                rest.remove(a)
                break
        else:
            return None
    return chain


def _cover_key(assets: Sequence[DataAssetRecord]) -> tuple:
    return (sum(a.access_cost for a in assets), len(assets), tuple(sorted(a.name for a in assets)))


def _select_cover(req: RetrievalRequest, cands: list[DataAssetRecord]) -> list[tuple]:
    _require_fields(req, cands)
    best = None
    saw_cover = False
    for k in range(1, len(cands) + 1):
        for subset in itertools.combinations(cands, k):
            if not _covers(subset, req):
                continue
            saw_cover = True
            chain = _join_chain(subset)
            if chain is None:
                continue
            key = _cover_key(subset)
            if best is None or key < best[0]:
                best = (key, chain)
    if best is None:
        raise Infeasible("join_key" if saw_cover else "field")
    return best[1]


def _select_compare(req: RetrievalRequest, cands: list[DataAssetRecord]) -> list[tuple]:
    _require_fields(req, cands)
    full = [a for a in cands if _covers([a], req)]
    if len(full) < 2:
        missing = next((t for t in req.target_fields if sum(bool(asset_provides(a, t)) for a in cands) < 2), None)
        raise Infeasible("field", missing)
    best = None
    for a, b in itertools.combinations(full, 2):
        shared = set(a.join_keys) & set(b.join_keys)
        if not shared:
            continue
        left, right = sorted((a, b), key=lambda x: x.name)
        key = _cover_key((a, b))
        if best is None or key < best[0]:
            best = (key, [(left, ()), (right, tuple(sorted(shared)))])
    if best is None:
        raise Infeasible("join_key")
    return best[1]


def _require_fields(req: RetrievalRequest, cands: Sequence[DataAssetRecord]) -> None:
    for t in req.target_fields:
        if not any(asset_provides(a, t, req.aggregate) for a in cands):
            raise Infeasible("field", t)
    for f, _ in req.filters:
        if not any(f in a.field_names for a in cands):
            raise Infeasible("field", f)


def _asset_step(step_id: str, op: DataOp, asset: DataAssetRecord, params: dict) -> Step:
    return Step(
        step_id,
        op.value.lower(),
        params,
        op=op.value,
        asset=asset.name,
        extra_cost=asset.access_cost,
        extra_latency=asset.latency_est,
        extra_quality=asset.quality_est,
    )


def _op_step(step_id: str, op: DataOp, params: dict) -> Step:
    return Step(step_id, op.value.lower(), params, op=op.value)


def build_task(req: RetrievalRequest, chain: list[tuple]) -> TaskSpec:
    """The data pipeline for a chosen asset chain, as a task for the planner."""
    names = [a.name for a, _ in chain]
    steps = [_op_step("discover", DataOp.DISCOVER, {"assets": names, "fields": list(req.target_fields)})]
    deps = set()
    tails = []
    for asset, _ in chain:
        filters = [[f, p] for f, p in req.filters if f in asset.field_names]
        qid = f"query_{asset.name}"
        steps.append(_asset_step(qid, DataOp.QUERY, asset, {"asset": asset.name, "filters": filters}))
        deps.add(("discover", qid))
        tail = qid
        nested = [t for t in req.target_fields if asset_provides(asset, t, req.aggregate) == "extract"]
        if nested:
            eid = f"extract_{asset.name}"
            steps.append(_asset_step(eid, DataOp.EXTRACT, asset, {"rows": {"$from": qid}, "fields": nested}))
            tail = eid
        tails.append(tail)
    if req.aggregate is Aggregate.COMPARE:
        (left, _), (right, keys) = chain
        steps.append(
            _op_step(
                "compare",
                DataOp.COMPARE,
                {
                    "left": {"$from": tails[0]},
                    "right": {"$from": tails[1]},
                    "keys": list(keys),
                    "left_fields": list(left.field_names),
                    "right_fields": list(right.field_names),
                    "fields": [t for t in req.target_fields if t not in keys],
                },
            )
        )
        return TaskSpec(steps, deps)
    current = tails[0]
    for i, ((asset, keys), tail) in enumerate(zip(chain[1:], tails[1:]), start=1):
        jid = f"join_{i}"
        steps.append(
            _op_step(jid, DataOp.JOIN, {"left": {"$from": current}, "right": {"$from": tail}, "keys": list(keys)})
        )
        current = jid
    if req.aggregate is Aggregate.SUMMARIZE:
        steps.append(_op_step("summarize", DataOp.SUMMARIZE, {"rows": {"$from": current}, "fields": list(req.target_fields)}))
    else:
        sink = next(i for i, s in enumerate(steps) if s.step_id == current)
        s = steps[sink]
        steps[sink] = Step(s.step_id, s.capability, {**s.params, "project": list(req.target_fields)},
                           s.op, s.asset, s.extra_cost, s.extra_latency, s.extra_quality)
    return TaskSpec(steps, deps)


def plan_retrieval(
    req: RetrievalRequest,
    data_registry: DataRegistry,
    constraints: Optional[Constraints] = None,
    agents: Optional[AgentRegistry] = None,
) -> DataPlan:
    """Choose assets, lay out the op pipeline, and bind ops to data-op agents."""
    constraints = constraints if constraints is not None else req.constraints
    agents = agents if agents is not None else default_data_agents()
    cands = _candidates(req, data_registry)
    if req.aggregate is Aggregate.COMPARE:
        chain = _select_compare(req, cands)
    else:
        chain = _select_cover(req, cands)
    task = build_task(req, chain)
    dag = plan(task, agents, constraints)
    cover = tuple(a.name for a, _ in chain)
    return DataPlan(dag, task, cover, sum(a.access_cost for a, _ in chain), req)


DATA_OP_KINDS = {
    DataOp.DISCOVER: "discover_stub",
    DataOp.QUERY: "query_stub",
    DataOp.EXTRACT: "extract_stub",
    DataOp.JOIN: "join_stub",
    DataOp.SUMMARIZE: "summarize_stub",
    DataOp.COMPARE: "compare_stub",
}


def default_data_agents() -> AgentRegistry:
    """One zero-cost agent per data op, named after the op (``Query`` etc.)."""
    reg = AgentRegistry()
    for op in DataOp:
        reg.register_agent(
            AgentRecord(
                op.value.title(),
                description=f"{op.value.lower()} data operation",
                capabilities={op.value.lower()},
                latency_est=1,
                quality_est=1.0,
                worker_count=MAX_CANDIDATES,
            )
        )
    return reg


def default_data_processors() -> dict[str, Any]:
    from .stubs import make_stub

    return {op.value.title(): make_stub(kind) for op, kind in DATA_OP_KINDS.items()}


def execute_data_plan(dplan: DataPlan, coordinator, constraints: Optional[Constraints] = None) -> Any:
    """Run the plan through the coordinator and return the sink node's output."""
    constraints = constraints if constraints is not None else dplan.request.constraints
    report = coordinator.execute(dplan.dag, dplan.task, constraints)
    if report.final_status.value != "COMPLETED":
        raise DataPlanError(report)
    return report.output
