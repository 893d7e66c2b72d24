"""Scenario files: JSON documents describing one runnable session.

Top-level keys are ``session``, ``agents``, ``data``, ``task``,
``constraints``, ``seed`` and ``clock``. Data assets point at delimited
fixture files relative to the scenario; when a scenario is embedded in a
trace the loaded rows travel with it under ``rows`` instead.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .data_planner import DATA_OP_KINDS, RetrievalRequest, default_data_agents
from .planner import Constraints, TaskSpec, TaskSpecError
from .registry import (
    AgentRecord,
    AgentRegistry,
    DataAssetRecord,
    DataRegistry,
    DataOp,
    Granularity,
    RegistryError,
)
from .stubs import STUB_KINDS
from .tables import load_table
from .tags import TagParseError

__all__ = ["SYSTEM_AGENTS", "Scenario", "ScenarioError", "load_scenario"]

SYSTEM_AGENTS = ("user", "planner", "coordinator")
_TOP_KEYS = {"session", "agents", "data", "task", "constraints", "seed", "clock"}
_AGENT_KEYS = {
    "name", "kind", "params", "description", "capabilities", "input_sig", "output_sig",
    "cost_per_call", "latency_est", "quality_est", "worker_count", "inclusion", "exclusion",
    "output_tags", "available",
}
_ASSET_KEYS = {
    "name", "granularity", "fields", "join_keys", "access_cost", "latency_est", "quality_est",
    "supported_ops", "path", "delimiter", "rows", "row_count", "available",
}


class ScenarioError(ValueError):
    """Invalid scenario; ``location`` is a dotted path into the document."""

    def __init__(self, message: str, location: str = "", source: str = "") -> None:
        self.location = location
        self.source = source
        where = ": ".join(p for p in (source, location) if p)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class Scenario:
    raw: dict
    session_id: str
    session_agents: list
    session_input: Any
    agents: AgentRegistry
    agent_specs: dict  # name -> (kind, params)
    data: DataRegistry
    tables: dict
    task: Optional[TaskSpec]
    request: Optional[RetrievalRequest]
    constraints: Constraints
    seed: int = 0
    clock: str = "sim"
    source: str = ""
    asset_rows: dict = field(default_factory=dict)

    def embedded(self) -> dict:
        """The scenario document with fixture rows inlined and paths dropped."""
        doc = copy.deepcopy(self.raw)
        for asset in doc.get("data", {}).get("assets", []):
            asset.pop("path", None)
            asset.pop("delimiter", None)
            asset["rows"] = self.tables.get(asset["name"], [])
        return doc


def _require(cond: bool, msg: str, loc: str, src: str) -> None:
    if not cond:
        raise ScenarioError(msg, loc, src)


def _agent_record(spec: dict, loc: str, src: str) -> AgentRecord:
    unknown = set(spec) - _AGENT_KEYS
    _require(not unknown, f"unknown keys {sorted(unknown)}", loc, src)
    _require(isinstance(spec.get("name"), str) and spec["name"], "agent needs a name", loc, src)
    kind = spec.get("kind")
    _require(kind in STUB_KINDS, f"unknown stub kind {kind!r}; known: {sorted(STUB_KINDS)}", f"{loc}.kind", src)
    kw: dict = {
        "name": spec["name"],
        "description": spec.get("description", ""),
        "capabilities": frozenset(spec.get("capabilities", [])),
        "input_sig": tuple(spec.get("input_sig", [])),
        "output_sig": tuple(spec.get("output_sig", [])),
        "cost_per_call": spec.get("cost_per_call", 0.0),
        "latency_est": spec.get("latency_est", 0),
        "quality_est": spec.get("quality_est", 1.0),
        "worker_count": spec.get("worker_count", 1),
        "available": spec.get("available", True),
    }
    if "inclusion" in spec:
        kw["inclusion_rule"] = spec["inclusion"]
    if "exclusion" in spec:
        kw["exclusion_rule"] = spec["exclusion"]
    if "output_tags" in spec:
        kw["output_tags"] = spec["output_tags"]
    try:
        return AgentRecord(**kw)
    except (RegistryError, TagParseError, ValueError, TypeError) as exc:
        raise ScenarioError(str(exc), loc, src) from None


def _asset_record(spec: dict, rows: list, loc: str, src: str) -> DataAssetRecord:
    unknown = set(spec) - _ASSET_KEYS
    _require(not unknown, f"unknown keys {sorted(unknown)}", loc, src)
    try:
        fields = tuple((f["name"], f.get("type", "text")) for f in spec.get("fields", []))
        return DataAssetRecord(
            name=spec["name"],
            granularity=Granularity(str(spec.get("granularity", "RAW")).upper()),
            schema_fields=fields,
            row_count=spec.get("row_count", len(rows)),
            access_cost=spec.get("access_cost", 0.0),
            latency_est=spec.get("latency_est", 0),
            quality_est=spec.get("quality_est", 1.0),
            join_keys=frozenset(spec.get("join_keys", [])),
            supported_ops=frozenset(DataOp(str(o).upper()) for o in spec.get("supported_ops", ["QUERY"])),
            available=spec.get("available", True),
        )
    except KeyError as exc:
        raise ScenarioError(f"missing key {exc}", loc, src) from None
    except (RegistryError, ValueError, TypeError) as exc:
        raise ScenarioError(str(exc), loc, src) from None


def scenario_from_dict(doc: dict, base_dir: Union[str, Path, None] = None, source: str = "") -> Scenario:
    src = source
    _require(isinstance(doc, dict), "scenario must be a JSON object", "", src)
    unknown = set(doc) - _TOP_KEYS
    _require(not unknown, f"unknown top-level keys {sorted(unknown)}", "", src)
    session = doc.get("session") or {}
    _require(isinstance(session.get("id"), str) and session["id"], "session needs an id", "session.id", src)
    clock = doc.get("clock", "sim")
    _require(clock in ("sim", "wall"), f"clock must be 'sim' or 'wall', got {clock!r}", "clock", src)
    seed = doc.get("seed", 0)
    _require(isinstance(seed, int) and not isinstance(seed, bool), "seed must be an integer", "seed", src)

    agents = AgentRegistry()
    specs: dict = {}
    for i, spec in enumerate(doc.get("agents", [])):
        loc = f"agents[{i}]"
        rec = _agent_record(spec, loc, src)
        _require(rec.name not in SYSTEM_AGENTS, f"{rec.name!r} is a reserved system agent name", loc, src)
        try:
            agents.register_agent(rec)
        except RegistryError as exc:
            raise ScenarioError(str(exc), loc, src) from None
        specs[rec.name] = (spec["kind"], dict(spec.get("params", {})))

    session_agents = list(session.get("agents", []))
    for i, name in enumerate(session_agents):
        _require(
            name in SYSTEM_AGENTS or name in agents,
            f"session agent {name!r} has no agent fixture",
            f"session.agents[{i}]",
            src,
        )

    data = DataRegistry()
    tables: dict = {}
    base = Path(base_dir) if base_dir is not None else Path(".")
    for i, spec in enumerate((doc.get("data") or {}).get("assets", [])):
        loc = f"data.assets[{i}]"
        _require("name" in spec, "asset needs a name", loc, src)
        if "rows" in spec:
            rows = list(spec["rows"])
        elif "path" in spec:
            schema = [(f["name"], f.get("type", "text")) for f in spec.get("fields", [])]
            try:
                rows = load_table(base / spec["path"], schema, spec.get("delimiter", ","))
            except (OSError, ValueError) as exc:
                raise ScenarioError(str(exc), f"{loc}.path", src) from None
        else:
            rows = []
        rec = _asset_record(spec, rows, loc, src)
        try:
            data.register_asset(rec)
        except RegistryError as exc:
            raise ScenarioError(str(exc), loc, src) from None
        tables[rec.name] = rows

    try:
        constraints = Constraints.from_dict(doc.get("constraints"))
    except (ValueError, TypeError) as exc:
        raise ScenarioError(str(exc), "constraints", src) from None

    task_doc = doc.get("task")
    _require(isinstance(task_doc, dict), "scenario needs a task", "task", src)
    task = request = None
    if "target_fields" in task_doc:
        try:
            request = RetrievalRequest.from_dict({**task_doc, "constraints": doc.get("constraints")})
        except (ValueError, KeyError, TypeError) as exc:
            raise ScenarioError(str(exc), "task", src) from None
    else:
        try:
            task = TaskSpec.from_dict(task_doc)
            task.validate()
        except (TaskSpecError, TypeError) as exc:
            raise ScenarioError(str(exc), "task", src) from None

    if request is not None:
        # Data ops nobody declared fall back to the built-in stub agents.
        for rec in default_data_agents():
            if not agents.candidates(next(iter(rec.capabilities))) and rec.name not in agents:
                agents.register_agent(rec)
                specs[rec.name] = (DATA_OP_KINDS[DataOp(rec.name.upper())], {})

    return Scenario(
        raw=copy.deepcopy(doc),
        session_id=session["id"],
        session_agents=session_agents,
        session_input=session.get("input"),
        agents=agents,
        agent_specs=specs,
        data=data,
        tables=tables,
        task=task,
        request=request,
        constraints=constraints,
        seed=seed,
        clock=clock,
        source=src,
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", "", str(path)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", f"line {exc.lineno} column {exc.colno}", str(path)) from None
    return scenario_from_dict(doc, path.parent, str(path))
