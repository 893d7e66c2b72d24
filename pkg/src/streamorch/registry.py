"""Agent and data-asset registries with deterministic lexical search."""

from __future__ import annotations

import enum
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .tags import NEVER, TagExpr, as_expr, normalize_tags, parse_tag_expr, to_text

__all__ = [
    "AgentRecord",
    "AgentRegistry",
    "DataAssetRecord",
    "DataOp",
    "DataRegistry",
    "DuplicateNameError",
    "Granularity",
    "NotFoundError",
    "RegistryError",
    "ValidationError",
    "agent_search_score",
    "asset_score",
    "lexical_tokens",
]

_SPLIT_RE = re.compile(r"[^a-z0-9]+")


class RegistryError(Exception):
    pass


class ValidationError(RegistryError, ValueError):
    pass


class DuplicateNameError(RegistryError):
    pass


class NotFoundError(RegistryError, LookupError):
    pass


class Granularity(str, enum.Enum):
    RAW = "RAW"
    SUMMARY = "SUMMARY"
    SCHEMA = "SCHEMA"


class DataOp(str, enum.Enum):
    DISCOVER = "DISCOVER"
    QUERY = "QUERY"
    EXTRACT = "EXTRACT"
    SUMMARIZE = "SUMMARIZE"
    JOIN = "JOIN"
    COMPARE = "COMPARE"


def lexical_tokens(text: str) -> set[str]:
    return {t for t in _SPLIT_RE.split(text.lower()) if t}


def _check_unit(name: str, what: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
        raise ValidationError(f"{name}: {what} must lie in [0, 1], got {value!r}")


def _check_nonneg(name: str, what: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and value >= 0 and not math.isnan(value)):
        raise ValidationError(f"{name}: {what} must be non-negative, got {value!r}")


@dataclass(frozen=True)
class AgentRecord:
    name: str
    description: str = ""
    capabilities: frozenset = frozenset()
    input_sig: tuple = ()
    output_sig: tuple = ()
    cost_per_call: float = 0.0
    latency_est: int = 0
    quality_est: float = 1.0
    inclusion_rule: TagExpr = field(default_factory=lambda: parse_tag_expr("instruction"))
    exclusion_rule: TagExpr = NEVER
    worker_count: int = 1
    output_tags: frozenset = frozenset({"result"})
    available: bool = True

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("agent name must be non-empty")
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        object.__setattr__(self, "input_sig", tuple(self.input_sig))
        object.__setattr__(self, "output_sig", tuple(self.output_sig))
        object.__setattr__(self, "inclusion_rule", as_expr(self.inclusion_rule))
        object.__setattr__(self, "exclusion_rule", as_expr(self.exclusion_rule))
        try:
            object.__setattr__(self, "output_tags", normalize_tags(self.output_tags))
        except ValueError as exc:
            raise ValidationError(f"{self.name}: {exc}") from None
        _check_nonneg(self.name, "cost_per_call", self.cost_per_call)
        _check_unit(self.name, "quality_est", self.quality_est)
        if not isinstance(self.latency_est, int) or self.latency_est < 0:
            raise ValidationError(f"{self.name}: latency_est must be a non-negative integer")
        if not isinstance(self.worker_count, int) or self.worker_count < 1:
            raise ValidationError(f"{self.name}: worker_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "capabilities": sorted(self.capabilities),
            "input_sig": list(self.input_sig),
            "output_sig": list(self.output_sig),
            "cost_per_call": self.cost_per_call,
            "latency_est": self.latency_est,
            "quality_est": self.quality_est,
            "inclusion": to_text(self.inclusion_rule),
            "exclusion": to_text(self.exclusion_rule),
            "worker_count": self.worker_count,
            "output_tags": sorted(self.output_tags),
            "available": self.available,
        }


@dataclass(frozen=True)
class DataAssetRecord:
    name: str
    granularity: Granularity = Granularity.RAW
    schema_fields: tuple = ()  # ((field name, semantic type), ...)
    row_count: int = 0
    access_cost: float = 0.0
    latency_est: int = 0
    quality_est: float = 1.0
    join_keys: frozenset = frozenset()
    supported_ops: frozenset = frozenset()
    available: bool = True

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("asset name must be non-empty")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        fields = []
        for f in self.schema_fields:
            if isinstance(f, str):
                f = (f, "text")
            fields.append((str(f[0]), str(f[1])))
        object.__setattr__(self, "schema_fields", tuple(fields))
        object.__setattr__(self, "join_keys", frozenset(self.join_keys))
        try:
            ops = frozenset(DataOp(op.upper() if isinstance(op, str) else op) for op in self.supported_ops)
        except ValueError as exc:
            raise ValidationError(f"{self.name}: {exc}") from None
        object.__setattr__(self, "supported_ops", ops)
        missing = self.join_keys - set(self.field_names)
        if missing:
            raise ValidationError(f"{self.name}: join keys {sorted(missing)} are not schema fields")
        _check_nonneg(self.name, "access_cost", self.access_cost)
        _check_unit(self.name, "quality_est", self.quality_est)
        if not isinstance(self.row_count, int) or self.row_count < 0:
            raise ValidationError(f"{self.name}: row_count must be a non-negative integer")
        if not isinstance(self.latency_est, int) or self.latency_est < 0:
            raise ValidationError(f"{self.name}: latency_est must be a non-negative integer")

    @property
    def field_names(self) -> tuple:
        return tuple(name for name, _ in self.schema_fields)

    def field_type(self, name: str) -> Optional[str]:
        for fname, ftype in self.schema_fields:
            if fname == name:
                return ftype
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "granularity": self.granularity.value,
            "fields": [{"name": n, "type": t} for n, t in self.schema_fields],
            "row_count": self.row_count,
            "access_cost": self.access_cost,
            "latency_est": self.latency_est,
            "quality_est": self.quality_est,
            "join_keys": sorted(self.join_keys),
            "supported_ops": sorted(op.value for op in self.supported_ops),
            "available": self.available,
        }


def agent_search_score(record: AgentRecord, capability: str) -> float:
    """1.0 on an exact capability hit, else Jaccard over lexical tokens."""
    if capability in record.capabilities:
        return 1.0
    query = lexical_tokens(capability)
    doc = lexical_tokens(record.description)
    for cap in record.capabilities:
        doc |= lexical_tokens(cap)
    union = query | doc
    if not union:
        return 0.0
    return len(query & doc) / len(union)


def asset_score(record: DataAssetRecord) -> float:
    return record.quality_est / (1.0 + record.access_cost)


class _Registry:
    kind = "record"

    def __init__(self) -> None:
        self._records: dict = {}
        self._lock = threading.Lock()

    def _register(self, record) -> str:
        with self._lock:
            if record.name in self._records:
                raise DuplicateNameError(f"{self.kind} {record.name!r} is already registered")
            # Replace the dict wholesale so concurrent searches see a snapshot.
            records = dict(self._records)
            records[record.name] = record
            self._records = records
        return record.name

    def get(self, name: str):
        try:
            return self._records[name]
        except KeyError:
            raise NotFoundError(f"no {self.kind} named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._records

    def __iter__(self):
        return iter(sorted(self._records.values(), key=lambda r: r.name))

    def __len__(self) -> int:
        return len(self._records)

    def names(self) -> list[str]:
        return sorted(self._records)


class AgentRegistry(_Registry):
    kind = "agent"

    def register_agent(self, record: AgentRecord) -> str:
        if not isinstance(record, AgentRecord):
            raise ValidationError("register_agent expects an AgentRecord")
        return self._register(record)

    register = register_agent

    def search_agents(
        self,
        capability: str,
        input_type: Optional[str] = None,
        output_type: Optional[str] = None,
    ) -> list[AgentRecord]:
        """Rank available agents for ``capability``; best first, ties by name."""
        scored = []
        for rec in self._records.values():
            if not rec.available:
                continue
            if input_type is not None and input_type not in rec.input_sig:
                continue
            if output_type is not None and output_type not in rec.output_sig:
                continue
            score = agent_search_score(rec, capability)
            if score > 0.0:
                scored.append((-score, rec.name, rec))
        scored.sort(key=lambda t: (t[0], t[1]))
        return [rec for _, _, rec in scored]

    def candidates(self, capability: str) -> list[AgentRecord]:
        """Agents whose capability set names ``capability`` exactly, in search order."""
        return [r for r in self.search_agents(capability) if capability in r.capabilities]


class DataRegistry(_Registry):
    kind = "asset"

    def register_asset(self, record: DataAssetRecord) -> str:
        if not isinstance(record, DataAssetRecord):
            raise ValidationError("register_asset expects a DataAssetRecord")
        return self._register(record)

    register = register_asset

    def search_assets(self, required_fields: Iterable[str], op) -> list[DataAssetRecord]:
        required = list(required_fields)
        if not required:
            raise ValidationError("search_assets needs at least one required field")
        op = DataOp(op.upper() if isinstance(op, str) else op)
        hits = []
        for rec in self._records.values():
            if not rec.available or op not in rec.supported_ops:
                continue
            if all(f in rec.field_names for f in required):
                hits.append(rec)
        hits.sort(key=lambda r: (-asset_score(r), r.name))
        return hits
