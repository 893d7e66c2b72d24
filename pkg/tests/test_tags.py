from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamorch.tags import (
    NEVER,
    TRUE,
    And,
    Not,
    Or,
    Tag,
    TagParseError,
    match_tags,
    normalize_tags,
    parse_tag_expr,
    to_text,
)

TOKENS = ("a", "b", "c", "d")


def py_eval(expr, tags) -> bool:
    """Oracle: compile the AST to a Python boolean expression and eval it."""

    def src(e):
        if isinstance(e, Tag):
            return repr(e.name in tags)
        if e == TRUE:
            return "True"
        if isinstance(e, Not):
            return f"(not {src(e.operand)})"
        if isinstance(e, And):
            return f"({src(e.left)} and {src(e.right)})"
        return f"({src(e.left)} or {src(e.right)})"

    return eval(src(expr))


def ast_strategy(max_leaves: int = 40):
    leaves = st.one_of(st.sampled_from([Tag(t) for t in TOKENS]), st.just(TRUE))
    return st.recursive(
        leaves,
        lambda kids: st.one_of(
            kids.map(Not),
            st.tuples(kids, kids).map(lambda p: And(*p)),
            st.tuples(kids, kids).map(lambda p: Or(*p)),
        ),
        max_leaves=max_leaves,
    )


def depth(e) -> int:
    if isinstance(e, Not):
        return 1 + depth(e.operand)
    if isinstance(e, (And, Or)):
        return 1 + max(depth(e.left), depth(e.right))
    return 0


def all_subsets(tokens):
    return [frozenset(c) for r in range(len(tokens) + 1) for c in itertools.combinations(tokens, r)]


class TestParse:
    def test_and(self):
        assert parse_tag_expr("a AND b") == And(Tag("a"), Tag("b"))

    def test_not_binds_tighter_than_or(self):
        assert parse_tag_expr("NOT a OR b") == Or(Not(Tag("a")), Tag("b"))

    def test_and_binds_tighter_than_or(self):
        assert parse_tag_expr("a OR b AND c") == Or(Tag("a"), And(Tag("b"), Tag("c")))

    def test_left_associative(self):
        assert parse_tag_expr("a AND b AND c") == And(And(Tag("a"), Tag("b")), Tag("c"))

    def test_leading_operator_errors_at_zero(self):
        with pytest.raises(TagParseError) as err:
            parse_tag_expr("AND a")
        assert err.value.position == 0

    def test_keywords_case_insensitive(self):
        assert parse_tag_expr("a and not b or TRUE") == Or(And(Tag("a"), Not(Tag("b"))), TRUE)

    def test_parentheses(self):
        assert parse_tag_expr("(a OR b) AND c") == And(Or(Tag("a"), Tag("b")), Tag("c"))

    @pytest.mark.parametrize("text,pos", [("", 0), ("a AND", 5), ("(a", 2), ("a b", 2), ("Foo", 0), ("a)", 1)])
    def test_malformed(self, text, pos):
        with pytest.raises(TagParseError) as err:
            parse_tag_expr(text)
        assert err.value.position == pos

    def test_tokens_allow_digits_and_underscore(self):
        assert parse_tag_expr("job_2") == Tag("job_2")

    def test_never_matches_nothing(self):
        assert not match_tags(NEVER, frozenset())
        assert not match_tags(NEVER, frozenset(TOKENS))


class TestMatch:
    def test_plan_and_not_final(self):
        e = parse_tag_expr("plan AND NOT final")
        assert match_tags(e, {"plan"}) is True
        assert match_tags(e, {"plan", "final"}) is False

    def test_truth_table(self):
        e = parse_tag_expr("a OR (b AND c)")
        for tags in all_subsets(("a", "b", "c")):
            expected = ("a" in tags) or ("b" in tags and "c" in tags)
            assert match_tags(e, tags) == expected, tags

    def test_true_always(self):
        assert match_tags(TRUE, set())


class TestNormalize:
    def test_accepts_lowercase(self):
        assert normalize_tags(["plan", "x_1"]) == frozenset({"plan", "x_1"})

    @pytest.mark.parametrize("bad", ["Plan", "a-b", "", "a b"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            normalize_tags([bad])


@settings(max_examples=300, deadline=None)
@given(ast_strategy())
def test_round_trip(expr):
    assert parse_tag_expr(to_text(expr)) == expr


@settings(max_examples=300, deadline=None)
@given(ast_strategy())
def test_matches_truth_table_oracle(expr):
    for tags in all_subsets(TOKENS):
        assert match_tags(expr, tags) == py_eval(expr, tags)
