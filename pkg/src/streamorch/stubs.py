"""Deterministic in-process stand-ins for external services.

Each stub kind is a factory taking the agent's scenario parameters and
returning a processor ``(payload, ctx) -> ProcessorOutput``. Common
parameters understood by every kind:

``latency``  run time in simulated ms, overriding the registry estimate
``quality``  reported output quality (fixed)
``cost``     declared cost of each call
``fail``     raise on every call (exercises the error path)
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from typing import Any, Callable, Optional

from .agents import OutputEntry, ProcessorContext, ProcessorError, ProcessorOutput
from . import tables as T

__all__ = ["STUB_KINDS", "StubProcessor", "make_stub", "skill_tokens"]

_QUERY_SPLIT = re.compile(r"[^a-z0-9_]+")


class StubProcessor:
    def __init__(self, kind: str, fn: Callable[[Any, ProcessorContext, dict], Any], params: dict) -> None:
        self.kind = kind
        self.fn = fn
        self.params = dict(params)
        self.latency: Optional[int] = params.get("latency")
        self.quality: Optional[float] = params.get("quality")
        self.cost: Optional[float] = params.get("cost")
        self.fail = bool(params.get("fail", False))

    def __repr__(self) -> str:
        return f"StubProcessor({self.kind!r})"

    def __call__(self, payload: Any, ctx: ProcessorContext) -> ProcessorOutput:
        if self.fail:
            raise ProcessorError(f"{self.kind} stub configured to fail")
        result = self.fn(payload, ctx, self.params)
        if isinstance(result, ProcessorOutput):
            out = result
        else:
            out = ProcessorOutput([OutputEntry(result)])
        if isinstance(payload, dict) and payload.get("project"):
            for entry in out.entries:
                if entry.target == "out":
                    entry.payload = T.project(entry.payload, payload["project"])
        if self.quality is not None:
            out.quality = float(self.quality)
        if self.cost is not None and out.declared_cost is None:
            out.declared_cost = float(self.cost)
        return out


def _table(ctx: ProcessorContext, name: Optional[str]) -> list:
    if name is None:
        raise ProcessorError("no table configured")
    try:
        return ctx.tables[name]
    except KeyError:
        raise ProcessorError(f"unknown table {name!r}") from None


def skill_tokens(value: Any) -> set[str]:
    return T.value_tokens(value)


def _query_tokens(query: Any) -> set[str]:
    if isinstance(query, dict):
        toks: set[str] = set()
        for key in ("skill", "skills", "text"):
            if key in query:
                v = query[key]
                toks |= T.value_tokens(v) if key == "skills" else {t for t in _QUERY_SPLIT.split(str(v).lower()) if t}
        return toks
    return {t for t in _QUERY_SPLIT.split(str(query).lower()) if t}


def _uppercase(payload, ctx, params):
    text = payload["text"] if isinstance(payload, dict) else payload
    if not isinstance(text, str):
        raise ProcessorError("uppercase expects text")
    return ProcessorOutput.single(text.upper(), quality=1.0)


def _job_search(payload, ctx, params):
    """Rows of the fixture table whose skill list shares a token with the query."""
    query = payload.get("query", payload) if isinstance(payload, dict) else payload
    wanted = _query_tokens(query)
    field = params.get("field", "skills")
    rows = _table(ctx, params.get("table"))
    return [row for row in rows if wanted & skill_tokens(row.get(field))]


def match_score(job: dict, candidate: dict, field: str = "skills") -> float:
    a, b = skill_tokens(job.get(field)), skill_tokens(candidate.get(field))
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _match_predict(payload, ctx, params):
    """Jaccard skill overlap; a job list yields the best match (first on ties)."""
    field = params.get("field", "skills")
    jobs = payload.get("jobs", payload.get("job"))
    candidate = payload.get("candidate") or {}
    if isinstance(jobs, dict):
        score = match_score(jobs, candidate, field)
        return ProcessorOutput.single({"job_id": jobs.get("job_id"), "score": score}, quality=score)
    if not isinstance(jobs, list):
        raise ProcessorError("match_predict expects a job record or list of jobs")
    best, best_score = None, -1.0
    for job in jobs:
        s = match_score(job, candidate, field)
        if s > best_score:
            best, best_score = job, s
    if best is None:
        return ProcessorOutput.single({"job_id": None, "title": None, "score": 0.0}, quality=0.0)
    top = {"job_id": best.get("job_id"), "title": best.get("title"), "score": best_score}
    return ProcessorOutput.single(top, quality=best_score)


def _seeded_rng(ctx: ProcessorContext, payload: Any) -> random.Random:
    blob = json.dumps([ctx.seed, ctx.agent, payload], sort_keys=True).encode()
    return random.Random(int.from_bytes(hashlib.sha256(blob).digest()[:8], "big"))


def _llm_stub(payload, ctx, params):
    """Fill a template, then append seeded filler words drawn from ``vocab``."""
    template = params.get("template", "{text}")
    fields = payload if isinstance(payload, dict) else {"text": payload}
    try:
        text = template.format(**fields)
    except (KeyError, IndexError) as exc:
        raise ProcessorError(f"template field missing: {exc}") from None
    rng = _seeded_rng(ctx, payload)
    vocab = params.get("vocab", [])
    n = int(params.get("words", 0))
    if vocab and n:
        text = text + " " + " ".join(rng.choice(vocab) for _ in range(n))
    lo, hi = params.get("quality_range", (0.7, 0.95))
    return ProcessorOutput.single(text, quality=round(rng.uniform(lo, hi), 3))


def _rows(value: Any) -> list:
    if isinstance(value, list):
        return value
    raise ProcessorError(f"expected a list of rows, got {type(value).__name__}")


def _query_stub(payload, ctx, params):
    return T.filter_rows(_table(ctx, payload.get("asset")), payload.get("filters", []))


def _discover_stub(payload, ctx, params):
    assets = list(payload.get("assets", []))
    missing = [a for a in assets if a not in ctx.tables]
    if missing:
        raise ProcessorError(f"assets not found: {missing}")
    return {"assets": assets, "fields": list(payload.get("fields", []))}


def _extract_stub(payload, ctx, params):
    return T.extract_fields(_rows(payload.get("rows")), payload.get("fields", []))


def _join_stub(payload, ctx, params):
    keys = payload.get("keys") or []
    if not keys:
        raise ProcessorError("join needs at least one key")
    return T.join_rows(_rows(payload.get("left")), _rows(payload.get("right")), keys)


def _summarize_stub(payload, ctx, params):
    if isinstance(payload, str) or (isinstance(payload, dict) and "rows" not in payload):
        text = payload if isinstance(payload, str) else str(payload.get("text", ""))
        words = text.split()
        n = int(params.get("max_words", 8))
        return " ".join(words[:n])
    return T.summarize_rows(_rows(payload.get("rows")), payload.get("fields", ["count"]))


def _compare_stub(payload, ctx, params):
    return T.compare_rows(
        _rows(payload.get("left")),
        _rows(payload.get("right")),
        payload.get("keys", []),
        payload.get("left_fields", []),
        payload.get("right_fields", []),
        payload.get("fields"),
    )


STUB_KINDS: dict[str, Callable] = {
    "uppercase": _uppercase,
    "job_search": _job_search,
    "match_predict": _match_predict,
    "llm_stub": _llm_stub,
    "summarize_stub": _summarize_stub,
    "join_stub": _join_stub,
    "compare_stub": _compare_stub,
    "extract_stub": _extract_stub,
    "query_stub": _query_stub,
    "discover_stub": _discover_stub,
}


def make_stub(kind: str, params: Optional[dict] = None) -> StubProcessor:
    try:
        fn = STUB_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown stub kind {kind!r}; known: {sorted(STUB_KINDS)}") from None
    return StubProcessor(kind, fn, params or {})
