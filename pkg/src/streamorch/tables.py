"""In-memory fixture tables and the row-level semantics of the data operations."""

from __future__ import annotations

import csv
import json
import operator
import re
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

__all__ = [
    "AGGREGATES",
    "Predicate",
    "compare_rows",
    "extract_fields",
    "filter_rows",
    "join_rows",
    "load_table",
    "parse_predicate",
    "project",
    "summarize_rows",
    "value_tokens",
]

_TOKEN_SPLIT = re.compile(r"[;,|\s]+")
_PRED_RE = re.compile(r"^\s*(==|!=|>=|<=|>|<|contains)\s*(.*?)\s*$", re.IGNORECASE)
_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    ">=": operator.ge,
    "<=": operator.le,
    ">": operator.gt,
    "<": operator.lt,
}
AGGREGATES = ("avg", "sum", "min", "max")


def _convert(raw: str, ftype: str) -> Any:
    if ftype == "int":
        return int(raw) if raw != "" else None
    if ftype in ("float", "number"):
        return float(raw) if raw != "" else None
    if ftype == "record":
        return json.loads(raw) if raw != "" else None
    return raw


def load_table(path, schema: Sequence[tuple], delimiter: str = ",") -> list[dict]:
    """Read a delimited file whose header names the schema fields.

    Values are converted per the schema's semantic types (``int``,
    ``float``, ``record`` as JSON text, anything else kept as text).
    """
    types = dict(schema)
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        unknown = [h for h in header if h not in types]
        if unknown:
            raise ValueError(f"{path}: columns {unknown} are not declared in the asset schema")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            try:
                rows.append({k: _convert(v, types[k]) for k, v in raw.items()})
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def value_tokens(value: Any) -> set[str]:
    if value is None:
        return set()
    if isinstance(value, (list, tuple, set, frozenset)):
        return {str(v).lower() for v in value}
    return {t for t in _TOKEN_SPLIT.split(str(value).lower()) if t}


class Predicate:
    """A single-field comparison such as ``> 100`` or ``contains welding``."""

    def __init__(self, op: str, literal: Any) -> None:
        self.op = op.lower()
        self.literal = literal

    def __repr__(self) -> str:
        return f"Predicate({self.op!r}, {self.literal!r})"

    def __call__(self, value: Any) -> bool:
        if self.op == "contains":
            return str(self.literal).lower() in value_tokens(value)
        if value is None:
            return False
        literal = self.literal
        if isinstance(value, (int, float)) and isinstance(literal, str):
            try:
                literal = float(literal)
            except ValueError:
                return False
        elif isinstance(value, str) and not isinstance(literal, str):
            literal = str(literal)
        try:
            return _OPS[self.op](value, literal)
        except TypeError:
            return False


def parse_predicate(text: str) -> Predicate:
    m = _PRED_RE.match(str(text))
    if m is None:
        raise ValueError(f"cannot parse predicate {text!r}; expected '<op> <value>'")
    op, raw = m.group(1), m.group(2)
    try:
        literal = json.loads(raw)
    except ValueError:
        literal = raw
    return Predicate(op, literal)


def filter_rows(rows: Iterable[dict], filters: Sequence) -> list[dict]:
    preds = [(field, parse_predicate(p)) for field, p in filters]
    return [r for r in rows if all(pred(r.get(field)) for field, pred in preds)]


def _descend(value: Any, path: Sequence[str]) -> Any:
    for key in path:
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except ValueError:
                return None
        if not isinstance(value, dict):
            return None
        value = value.get(key)
    return value


def extract_fields(rows: Iterable[dict], fields: Sequence[str]) -> list[dict]:
    """Add ``a.b`` keys by reading ``b`` out of record (or JSON text) field ``a``."""
    out = []
    for row in rows:
        new = dict(row)
        for f in fields:
            head, *rest = f.split(".")
            new[f] = _descend(row.get(head), rest)
        out.append(new)
    return out


def join_rows(left: Sequence[dict], right: Sequence[dict], keys: Sequence[str]) -> list[dict]:
    """Inner equi-join, nested-loop order (left outer, right inner)."""
    out = []
    for lrow in left:
        for rrow in right:
            if all(lrow.get(k) is not None and lrow.get(k) == rrow.get(k) for k in keys):
                out.append({**lrow, **rrow})
    return out


def _aggregate(name: str, values: list) -> Any:
    values = [v for v in values if v is not None]
    if not values:
        return None
    if name == "avg":
        return sum(values) / len(values)
    if name == "sum":
        return sum(values)
    if name == "min":
        return min(values)
    return max(values)


def split_aggregate(field: str) -> Optional[tuple[str, str]]:
    head, _, rest = field.partition("_")
    if head in AGGREGATES and rest:
        return head, rest
    return None


def summarize_rows(rows: Sequence[dict], fields: Sequence[str]) -> dict:
    """Collapse rows into one record.

    A field already present on the rows (a precomputed summary) is read from
    the first row; ``count`` counts rows; ``avg_x``/``sum_x``/``min_x``/
    ``max_x`` aggregate column ``x``.
    """
    out = {}
    for f in fields:
        if rows and f in rows[0]:
            out[f] = rows[0][f]
        elif f == "count":
            out[f] = len(rows)
        elif split_aggregate(f) is not None:
            agg, col = split_aggregate(f)
            out[f] = _aggregate(agg, [r.get(col) for r in rows])
        else:
            out[f] = None
    return out


def compare_rows(
    left: Sequence[dict],
    right: Sequence[dict],
    keys: Sequence[str],
    left_fields: Sequence[str],
    right_fields: Sequence[str],
    fields: Optional[Sequence[str]] = None,
) -> dict:
    """Diff two inputs: schema differences, unmatched keys, and value mismatches."""
    lf, rf = set(left_fields), set(right_fields)
    shared = [f for f in (fields if fields is not None else sorted(lf & rf)) if f in lf and f in rf and f not in keys]

    def key_of(row):
        return tuple(row.get(k) for k in keys)

    right_index: dict = {}
    for row in right:
        right_index.setdefault(key_of(row), row)
    left_keys = {key_of(r) for r in left}
    mismatches = []
    missing_in_right = []
    for lrow in left:
        k = key_of(lrow)
        rrow = right_index.get(k)
        if rrow is None:
            missing_in_right.append(dict(zip(keys, k)))
            continue
        for f in shared:
            if lrow.get(f) != rrow.get(f):
                mismatches.append({"key": dict(zip(keys, k)), "field": f, "left": lrow.get(f), "right": rrow.get(f)})
    missing_in_left = [dict(zip(keys, key_of(r))) for r in right if key_of(r) not in left_keys]
    return {
        "only_in_left": sorted(lf - rf),
        "only_in_right": sorted(rf - lf),
        "mismatches": mismatches,
        "missing_in_left": missing_in_left,
        "missing_in_right": missing_in_right,
    }


def project(value: Any, fields: Sequence[str]) -> Any:
    if isinstance(value, list):
        return [{f: row.get(f) for f in fields} for row in value]
    if isinstance(value, dict):
        return {f: value.get(f) for f in fields}
    return value
