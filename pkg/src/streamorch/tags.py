"""Tag expressions used by agents to select streams and messages.

Grammar (keywords are case-insensitive, tags are lowercase)::

    expr  := or
    or    := and ('OR' and)*
    and   := unary ('AND' unary)*
    unary := 'NOT' unary | '(' expr ')' | tag | 'TRUE'
    tag   := [a-z0-9_]+

Binary operators associate to the left, so ``a AND b AND c`` parses as
``And(And(a, b), c)``. :func:`to_text` emits the minimal parenthesisation
that parses back to the same tree.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import AbstractSet, Union

__all__ = [
    "And",
    "Not",
    "Or",
    "Tag",
    "TagExpr",
    "TagParseError",
    "TrueExpr",
    "TRUE",
    "NEVER",
    "is_tag",
    "match_tags",
    "normalize_tags",
    "parse_tag_expr",
    "to_text",
]

TAG_RE = re.compile(r"[a-z0-9_]+")
_LEX_RE = re.compile(r"\s+|\(|\)|[A-Za-z0-9_]+")
_KEYWORDS = {"AND", "OR", "NOT", "TRUE"}


class TagParseError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        self.position = position
        super().__init__(f"{message} at position {position}")


@dataclass(frozen=True)
class Tag:
    name: str


@dataclass(frozen=True)
class TrueExpr:
    pass


@dataclass(frozen=True)
class Not:
    operand: TagExpr


@dataclass(frozen=True)
class And:
    left: TagExpr
    right: TagExpr


@dataclass(frozen=True)
class Or:
    left: TagExpr
    right: TagExpr


TagExpr = Union[Tag, TrueExpr, Not, And, Or]

TRUE = TrueExpr()
# Canonical "never matches" rule, used as the default exclusion.
NEVER = Not(TRUE)


def is_tag(token: str) -> bool:
    return TAG_RE.fullmatch(token) is not None


def normalize_tags(tags) -> frozenset[str]:
    """Validate an iterable of tag tokens and freeze it."""
    if isinstance(tags, str):
        raise TypeError("tags must be an iterable of tokens, not a string")
    out = frozenset(tags or ())
    for t in out:
        if not isinstance(t, str) or not is_tag(t):
            raise ValueError(f"invalid tag token {t!r}; tags must match [a-z0-9_]+")
    return out


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _LEX_RE.match(text, pos)
        if m is None:
            raise TagParseError(f"unexpected character {text[pos]!r}", pos)
        lexeme = m.group(0)
        if not lexeme.isspace():
            upper = lexeme.upper()
            if upper in _KEYWORDS:
                tokens.append((upper, lexeme, pos))
            elif lexeme in "()":
                tokens.append((lexeme, lexeme, pos))
            elif is_tag(lexeme):
                tokens.append(("TAG", lexeme, pos))
            else:
                raise TagParseError(f"tag {lexeme!r} must be lowercase", pos)
        pos = m.end()
    tokens.append(("EOF", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str) -> None:
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> TagExpr:
        expr = self.parse_or()
        kind, lexeme, pos = self.peek()
        if kind != "EOF":
            raise TagParseError(f"unexpected {lexeme!r}", pos)
        return expr

    def parse_or(self) -> TagExpr:
        left = self.parse_and()
        while self.peek()[0] == "OR":
            self.take()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self) -> TagExpr:
        left = self.parse_unary()
        while self.peek()[0] == "AND":
            self.take()
            left = And(left, self.parse_unary())
        return left

    def parse_unary(self) -> TagExpr:
        kind, lexeme, pos = self.take()
        if kind == "NOT":
            return Not(self.parse_unary())
        if kind == "(":
            inner = self.parse_or()
            closing, lex2, pos2 = self.take()
            if closing != ")":
                raise TagParseError("expected ')'", pos2)
            return inner
        if kind == "TAG":
            return Tag(lexeme)
        if kind == "TRUE":
            return TRUE
        if kind == "EOF":
            raise TagParseError("unexpected end of expression", pos)
        raise TagParseError(f"unexpected {lexeme!r}", pos)


def parse_tag_expr(text: str) -> TagExpr:
    """Parse ``text`` into a tag-expression tree.

    Raises :class:`TagParseError` carrying the offending character offset.
    """
    return _Parser(text).parse()


_PREC = {Or: 1, And: 2, Not: 3, Tag: 4, TrueExpr: 4}


def to_text(expr: TagExpr) -> str:
    return _emit(expr, 0)


def _emit(expr: TagExpr, min_prec: int) -> str:
    prec = _PREC[type(expr)]
    if isinstance(expr, Tag):
        s = expr.name
    elif isinstance(expr, TrueExpr):
        s = "TRUE"
    elif isinstance(expr, Not):
        s = "NOT " + _emit(expr.operand, 3)
    elif isinstance(expr, And):
        s = _emit(expr.left, 2) + " AND " + _emit(expr.right, 3)
    elif isinstance(expr, Or):
        s = _emit(expr.left, 1) + " OR " + _emit(expr.right, 2)
    else:
        raise TypeError(f"not a tag expression: {expr!r}")
    return f"({s})" if prec < min_prec else s


def match_tags(expr: TagExpr, tags: AbstractSet[str]) -> bool:
    if isinstance(expr, Tag):
        return expr.name in tags
    if isinstance(expr, TrueExpr):
        return True
    if isinstance(expr, Not):
        return not match_tags(expr.operand, tags)
    if isinstance(expr, And):
        return match_tags(expr.left, tags) and match_tags(expr.right, tags)
    if isinstance(expr, Or):
        return match_tags(expr.left, tags) or match_tags(expr.right, tags)
    raise TypeError(f"not a tag expression: {expr!r}")


def as_expr(rule) -> TagExpr:
    """Accept either a parsed expression or its textual form."""
    if isinstance(rule, str):
        return parse_tag_expr(rule)
    if isinstance(rule, (Tag, TrueExpr, Not, And, Or)):
        return rule
    raise TypeError(f"expected tag expression or text, got {type(rule).__name__}")
