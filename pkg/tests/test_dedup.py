"""Redundancy checks: per-pair classification and rule-set deduplication."""

from pathlib import Path

import pytest

from ruleforge.plan import checksum, parse_rule_line, serialize_template, sym
from ruleforge.dedup import (
    RtpBase,
    _merge_maps,
    is_redundant_in_set,
    pair_key,
    partition_dedup,
    plan_population,
    rtp_check,
)
from ruleforge.semantics import VerifierBound

DATA = Path(__file__).parent / "data"


def _load_rules(path):
    return [
        parse_rule_line(ln.strip())
        for ln in path.read_text().splitlines()
        if ln.strip() and not ln.startswith("#")
    ]


@pytest.fixture(scope="module")
def overlap_rules():
    return _load_rules(DATA / "redundant_rules.txt")


class TestPopulation:
    def test_merge_maps_cover_identity_and_pairs(self):
        maps = _merge_maps([sym("a0"), sym("a1"), sym("t0")])
        assert {} in maps
        assert {sym("a1"): sym("a0")} in maps
        # relation and attribute symbols never merge with each other
        assert all(
            k.kind == v.kind for m in maps for k, v in m.items()
        )

    def test_population_is_schema_consistent_and_sorted(self):
        rule = parse_rule_line(
            "Filter{p0,a1}(Proj{a0}(t0)) | Proj{a0}(Filter{p0,a1}(t0)) | AttrsEq(a0,a1)"
        )
        pops = plan_population(rule)
        assert pops
        lines = [serialize_template(p.plan) for p in pops]
        assert lines == sorted(lines)
        # the unmerged source is schema-inconsistent (a1 hidden by Proj{a0});
        # only the attr-merged instantiation survives the static check
        from ruleforge.plan import parse_template, template_checksum

        assert "Filter{p0,a1}(Proj{a0}(t0))" not in lines
        merged = template_checksum(parse_template("Filter{p0,a0}(Proj{a0}(t0))"))
        assert merged in {template_checksum(p.plan) for p in pops}


class TestPairClassification:
    def test_neq_for_unsound_rule(self):
        base = RtpBase(pair_key(parse_rule_line("Dedup(t0) | t0")))
        assert rtp_check(parse_rule_line("Dedup(t0) | t0"), base) == "NEQ"
        assert base.rules == []

    def test_eq_then_repeat(self):
        rule = parse_rule_line("Dedup(t0) | t0 | Unique(t0,a0)")
        weaker = parse_rule_line(
            "Dedup(t0) | t0 | Unique(t0,a0);NotNull(t0,a0)"
        )
        base = RtpBase(pair_key(rule))
        assert rtp_check(rule, base) == "EQ"
        assert len(base.rules) == 1
        assert rtp_check(weaker, base) == "Repeat"
        assert len(base.rules) == 1

    def test_overlap_rules_classify_as_expected(self, overlap_rules):
        r1, r2, r3 = overlap_rules
        base = RtpBase(pair_key(r3))
        # r3 is refuted at the bound; force it in and the weaker r1 repeats
        base.rules.append(r3)
        assert rtp_check(r1, base) == "Repeat"


class TestSetDedup:
    def test_most_constrained_rule_survives(self, overlap_rules):
        result = partition_dedup(overlap_rules, partition_size=2)
        assert [checksum(r) for r in result.kept] == [checksum(overlap_rules[2])]
        removed = {checksum(r) for r, _ in result.removed}
        assert removed == {checksum(overlap_rules[0]), checksum(overlap_rules[1])}

    def test_individual_redundancy(self, overlap_rules):
        r1, r2, r3 = overlap_rules
        assert is_redundant_in_set(r1, overlap_rules)
        assert is_redundant_in_set(r2, overlap_rules)
        # r3 is refuted at the bound, so it contributes no sound
        # applications of its own; the set scan still retains one survivor
        assert is_redundant_in_set(r3, overlap_rules)

    def test_non_member_rejected(self, overlap_rules):
        outsider = parse_rule_line("Dedup(t0) | t0 | Unique(t0,a0)")
        with pytest.raises(ValueError):
            is_redundant_in_set(outsider, overlap_rules)

    def test_duplicates_collapsed(self):
        a = parse_rule_line("Dedup(t0) | t0 | Unique(t0,a0)")
        b = parse_rule_line("Dedup(t5) | t5 | Unique(t5,a9)")  # alpha-equal to a
        result = partition_dedup([a, b])
        assert len(result.kept) == 1
        assert result.removed and result.removed[0][1] == "duplicate"

    def test_independent_rules_all_kept(self):
        rules = [
            parse_rule_line("Dedup(t0) | t0 | Unique(t0,a0)"),
            parse_rule_line("Dedup(Dedup(t0)) | Dedup(t0)"),
        ]
        result = partition_dedup(rules)
        assert len(result.kept) == 2

    def test_partition_size_validation(self):
        with pytest.raises(ValueError):
            partition_dedup([], partition_size=1)
