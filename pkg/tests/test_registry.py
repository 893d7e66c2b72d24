from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamorch.registry import (
    AgentRecord,
    AgentRegistry,
    DataAssetRecord,
    DataOp,
    DataRegistry,
    DuplicateNameError,
    Granularity,
    NotFoundError,
    ValidationError,
)


class TestAgents:
    def test_register_and_get(self):
        reg = AgentRegistry()
        rec = AgentRecord("JobSearch", capabilities={"search_jobs"})
        assert reg.register_agent(rec) == "JobSearch"
        assert reg.get("JobSearch") is rec

    def test_duplicate(self):
        reg = AgentRegistry()
        reg.register_agent(AgentRecord("A"))
        with pytest.raises(DuplicateNameError):
            reg.register_agent(AgentRecord("A"))

    def test_quality_out_of_range(self):
        with pytest.raises(ValidationError):
            AgentRecord("A", quality_est=1.3)

    @pytest.mark.parametrize("kw", [{"worker_count": 0}, {"cost_per_call": -1}, {"latency_est": -5}, {"name": ""}])
    def test_invalid_fields(self, kw):
        with pytest.raises(ValidationError):
            AgentRecord(**{"name": "A", **kw})

    def test_search_exact_capability(self):
        reg = AgentRegistry()
        reg.register_agent(AgentRecord("JobSearch", capabilities={"search_jobs"}))
        reg.register_agent(AgentRecord("MatchPredict", capabilities={"predict_match"}))
        assert [r.name for r in reg.search_agents("predict_match")] == ["MatchPredict"]

    def test_search_empty(self):
        assert AgentRegistry().search_agents("x") == []

    def test_tie_break_by_name(self):
        reg = AgentRegistry()
        reg.register_agent(AgentRecord("b", capabilities={"c"}))
        reg.register_agent(AgentRecord("a", capabilities={"c"}))
        assert [r.name for r in reg.search_agents("c")] == ["a", "b"]

    def test_lexical_score_jaccard(self):
        reg = AgentRegistry()
        # tokens {find, jobs, search_jobs} vs query {find, jobs}: 2/3
        reg.register_agent(AgentRecord("J", description="find jobs", capabilities={"search_jobs"}))
        reg.register_agent(AgentRecord("K", description="jobs", capabilities={"other"}))
        hits = reg.search_agents("find_jobs")
        assert [r.name for r in hits] == ["J", "K"]
        assert reg.candidates("find_jobs") == []

    def test_type_filters(self):
        reg = AgentRegistry()
        reg.register_agent(AgentRecord("A", capabilities={"c"}, input_sig=["text"], output_sig=["jobs"]))
        reg.register_agent(AgentRecord("B", capabilities={"c"}, input_sig=["image"]))
        assert [r.name for r in reg.search_agents("c", input_type="text")] == ["A"]
        assert [r.name for r in reg.search_agents("c", output_type="jobs")] == ["A"]

    def test_unavailable_filtered(self):
        reg = AgentRegistry()
        reg.register_agent(AgentRecord("A", capabilities={"c"}, available=False))
        assert reg.search_agents("c") == []


def two_assets():
    reg = DataRegistry()
    fields = [("title", "text"), ("salary", "int")]
    reg.register_asset(DataAssetRecord("jobs_raw", Granularity.RAW, fields, access_cost=4, quality_est=0.9,
                                       supported_ops={DataOp.QUERY}))
    reg.register_asset(DataAssetRecord("jobs_summary", Granularity.SUMMARY, fields, access_cost=1,
                                       quality_est=0.8, supported_ops={DataOp.QUERY}))
    return reg


class TestAssets:
    def test_register_get(self):
        reg = DataRegistry()
        rec = DataAssetRecord("jobs_raw", Granularity.RAW)
        reg.register_asset(rec)
        assert reg.get("jobs_raw") is rec

    def test_missing(self):
        with pytest.raises(NotFoundError):
            DataRegistry().get("missing")

    def test_join_keys_must_be_fields(self):
        with pytest.raises(ValidationError):
            DataAssetRecord("x", schema_fields=[("a", "text")], join_keys={"b"})

    def test_ranking_against_hand_formula(self):
        reg = two_assets()
        # hand oracle: q / (1 + cost)
        scores = {"jobs_raw": 0.9 / 5, "jobs_summary": 0.8 / 2}
        assert round(scores["jobs_summary"], 2) == 0.40
        assert round(scores["jobs_raw"], 2) == 0.18
        expected = sorted(scores, key=lambda n: (-scores[n], n))
        assert [r.name for r in reg.search_assets(["title"], "QUERY")] == expected == ["jobs_summary", "jobs_raw"]

    def test_no_match(self):
        assert two_assets().search_assets(["visa_status"], DataOp.QUERY) == []

    def test_single_match(self):
        reg = DataRegistry()
        reg.register_asset(DataAssetRecord("a", schema_fields=["x"], supported_ops={"QUERY"}))
        assert [r.name for r in reg.search_assets(["x"], "QUERY")] == ["a"]

    def test_op_filter(self):
        assert two_assets().search_assets(["title"], "EXTRACT") == []

    def test_empty_fields(self):
        with pytest.raises(ValidationError):
            two_assets().search_assets([], "QUERY")


NAMES = st.sampled_from(["a", "b", "c", "d", "e"])
CAPS = st.sampled_from(["x", "y", "x_y"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(NAMES, st.sets(CAPS), st.booleans()), max_size=8), CAPS)
def test_search_is_filtered_subset_and_deterministic(entries, query):
    reg = AgentRegistry()
    registered = set()
    for name, caps, avail in entries:
        try:
            reg.register_agent(AgentRecord(name, capabilities=caps, available=avail))
            registered.add(name)
        except DuplicateNameError:
            assert name in registered
    for name in "abcde":
        assert (name in reg) == (name in registered)
    hits = reg.search_agents(query)
    assert {r.name for r in hits} <= registered
    assert all(r.available for r in hits)
    assert hits == reg.search_agents(query)
