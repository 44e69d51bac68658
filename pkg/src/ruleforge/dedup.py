"""Rule-set redundancy pruning.

Online pruning (the EQ/NEQ/Repeat check) rejects a freshly generated rule
when the rules already kept for its template pair reproduce every rewrite it
enables.  Offline pruning partitions a rule set, removes redundant members
per partition, merges, and finishes with a whole-set subsumption pass.

Redundancy is decided over a finite plan population: the well-formed
symbolic instantiations of the rule's source template (one per symbol-merge
class), each carrying the rule's instantiated constraints as an assumed
context.  Inside the rewrite closure, a rule application is admitted only
when (a) its constraints are discharged by the context and (b) the concrete
instantiated rewrite is itself verified equivalent at the bound - this keeps
vacuously-true rules from fabricating unsound rewrites during comparison.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .plan import (
    Constraint,
    PlanError,
    PlanNode,
    PlanTemplate,
    RewriteRule,
    SymbolId,
    Param,
    checksum,
    make_rule,
    rule_line,
    schema_consistent,
    serialize_template,
    template_checksum,
)
from .rewriter import (
    Match,
    _build_dest,
    _replace,
    _used_indices,
    apply_rule,
    find_matches,
    instantiate_constraint,
)
from .semantics import SemanticsError, VerifierBound, check_equivalence


# ---------------------------------------------------------------------------
# Plan population
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PopulationPlan:
    """A concrete symbolic plan plus the constraint context it carries."""

    plan: PlanTemplate
    context: frozenset[Constraint]


def _merge_maps(symbols: list[SymbolId]) -> list[dict[SymbolId, SymbolId]]:
    """Identity, every same-kind pair merge, and the full per-kind merge."""
    maps: list[dict[SymbolId, SymbolId]] = [{}]
    by_kind: dict[str, list[SymbolId]] = {}
    for s in symbols:
        by_kind.setdefault(s.kind, []).append(s)
    for group in by_kind.values():
        for a, b in itertools.combinations(group, 2):
            maps.append({b: a})
    full: dict[SymbolId, SymbolId] = {}
    for group in by_kind.values():
        if len(group) > 1:
            for s in group[1:]:
                full[s] = group[0]
    if full:
        maps.append(full)
    return maps


def _rename_template(t: PlanTemplate, mapping: dict[SymbolId, SymbolId]) -> PlanTemplate:
    def rename(node: PlanNode) -> PlanNode:
        params = tuple(
            Param(
                mapping.get(p.symbol, p.symbol),
                mapping.get(p.qualifier, p.qualifier) if p.qualifier else None,
            )
            for p in node.params
        )
        return PlanNode(node.kind, params, tuple(rename(c) for c in node.children))

    return PlanTemplate(rename(t.root))


def _rename_constraints(
    cons: Iterable[Constraint], mapping: dict[SymbolId, SymbolId]
) -> frozenset[Constraint]:
    out = set()
    for c in cons:
        try:
            out.add(Constraint(c.kind, tuple(mapping.get(a, a) for a in c.args)))
        except PlanError:
            continue
    return frozenset(out)


def plan_population(
    rule: RewriteRule,
    extra_templates: Iterable[PlanTemplate] = (),
) -> list[PopulationPlan]:
    """Well-formed instantiations of the rule's source, plus extra plans.

    One instantiation per symbol-merge class whose renamed source template
    passes the static schema check; each carries the correspondingly renamed
    constraint set as its assumed context.  Extra templates (e.g. a library
    slice) join with an empty context.
    """
    out: list[PopulationPlan] = []
    seen: set[str] = set()
    syms = [s for s in rule.src.symbols() if s.kind in "tap"]
    for mapping in _merge_maps(syms):
        try:
            plan = _rename_template(rule.src, mapping)
        except PlanError:
            continue
        if not schema_consistent(plan):
            continue
        key = template_checksum(plan)
        if key in seen:
            continue
        seen.add(key)
        out.append(PopulationPlan(plan, _rename_constraints(rule.constraints, mapping)))
    for t in extra_templates:
        key = template_checksum(t)
        if key not in seen and schema_consistent(t):
            seen.add(key)
            out.append(PopulationPlan(t, frozenset()))
    out.sort(key=lambda p: serialize_template(p.plan))
    return out


# ---------------------------------------------------------------------------
# Soundness-gated rewrite closure
# ---------------------------------------------------------------------------

def _instantiated_rule(
    plan: PlanTemplate, rule: RewriteRule, match: Match
) -> Optional[RewriteRule]:
    """The concrete rewrite the application performs, as a standalone rule."""
    try:
        src = PlanTemplate(match.root)
        fresh = _used_indices(plan)
        bindings = dict(match.bindings)
        dest = PlanTemplate(_build_dest(rule.dest.root, bindings, fresh))
        cons = []
        for c in rule.sorted_constraints():
            inst = instantiate_constraint(c, bindings)
            if inst is None:
                return None
            cons.append(inst)
        return make_rule(src, dest, cons)
    except PlanError:
        return None


def _application_sound(
    plan: PlanTemplate,
    rule: RewriteRule,
    match: Match,
    bound: VerifierBound,
    cache: dict[str, bool],
) -> bool:
    inst = _instantiated_rule(plan, rule, match)
    if inst is None:
        return False
    key = checksum(inst)
    if key not in cache:
        try:
            cache[key] = check_equivalence(inst, bound).equivalent
        except SemanticsError:
            cache[key] = False
    return cache[key]


def _context_key(plan: PlanTemplate, context: frozenset[Constraint]) -> str:
    """Canonical key of a plan relative to a constraint context.

    Two plans are interchangeable inside a closure only when some renaming
    maps one onto the other while fixing the context, so plain alpha
    equivalence of the bare plan is too coarse: the key must canonicalize
    the (plan, context) pair jointly.
    """
    try:
        return checksum(make_rule(plan, plan, context))
    except PlanError:
        return template_checksum(plan) + "|" + ";".join(sorted(map(str, context)))


def gated_closure(
    plan: PlanTemplate,
    rules: Iterable[RewriteRule],
    context: frozenset[Constraint],
    bound: VerifierBound = VerifierBound(),
    cache: Optional[dict[str, bool]] = None,
    max_steps: int = 16,
    max_frontier: int = 2_000,
) -> frozenset[str]:
    """Keys of the minimal plans reachable by sound rule applications."""
    if cache is None:
        cache = {}
    rules = list(rules)
    seen: dict[str, PlanTemplate] = {_context_key(plan, context): plan}
    frontier = [plan]
    steps = 0
    while frontier and steps < max_steps and len(seen) <= max_frontier:
        steps += 1
        frontier.sort(key=serialize_template)
        next_frontier: list[PlanTemplate] = []
        for current in frontier:
            for rule in rules:
                for match in find_matches(current, rule, assumed=context):
                    if not _application_sound(current, rule, match, bound, cache):
                        continue
                    candidate = apply_rule(current, rule, match)
                    key = _context_key(candidate, context)
                    if key in seen:
                        continue
                    seen[key] = candidate
                    next_frontier.append(candidate)
        frontier = next_frontier
    best = min(p.node_count() for p in seen.values())
    return frozenset(
        k for k, p in seen.items() if p.node_count() == best
    )


# ---------------------------------------------------------------------------
# Online check (EQ / NEQ / Repeat)
# ---------------------------------------------------------------------------

@dataclass
class RtpBase:
    """Kept rules for one template pair, grown during enumeration."""

    pair_key: str
    rules: list[RewriteRule] = field(default_factory=list)


def pair_key(rule: RewriteRule) -> str:
    return template_checksum(rule.src) + ":" + template_checksum(rule.dest)


def rtp_check(
    rule: RewriteRule,
    base: RtpBase,
    bound: VerifierBound = VerifierBound(),
    cache: Optional[dict[str, bool]] = None,
) -> str:
    """Classify a candidate as ``NEQ``, ``Repeat``, or ``EQ`` (and insert).

    Non-equivalent candidates are NEQ.  Otherwise the candidate is Repeat
    when adding it to the kept set changes no rewrite closure over the
    candidate's plan population, and EQ (inserted into the base) otherwise.
    """
    if cache is None:
        cache = {}
    try:
        verdict = check_equivalence(rule, bound)
    except SemanticsError:
        return "NEQ"
    if not verdict.equivalent:
        return "NEQ"
    for pop in plan_population(rule):
        without = gated_closure(pop.plan, base.rules, pop.context, bound, cache)
        with_rule = gated_closure(
            pop.plan, base.rules + [rule], pop.context, bound, cache
        )
        if without != with_rule:
            base.rules.append(rule)
            return "EQ"
    return "Repeat"


# ---------------------------------------------------------------------------
# Offline set dedup
# ---------------------------------------------------------------------------

def is_redundant_in_set(
    rule: RewriteRule,
    ruleset: Iterable[RewriteRule],
    sample_plans: Optional[Iterable[PopulationPlan]] = None,
    bound: VerifierBound = VerifierBound(),
    cache: Optional[dict[str, bool]] = None,
) -> bool:
    """True iff removing the rule changes no closure over the population."""
    if cache is None:
        cache = {}
    key = checksum(rule)
    ruleset = list(ruleset)
    others = [r for r in ruleset if checksum(r) != key]
    if len(others) == len(ruleset):
        raise ValueError("rule must be a member of the set")
    population = (
        list(sample_plans) if sample_plans is not None else plan_population(rule)
    )
    for pop in population:
        full = gated_closure(pop.plan, ruleset, pop.context, bound, cache)
        reduced = gated_closure(pop.plan, others, pop.context, bound, cache)
        if full != reduced:
            return False
    return True


def _removal_order(rules: Iterable[RewriteRule]) -> list[RewriteRule]:
    return sorted(rules, key=lambda r: (len(r.constraints), rule_line(r)))


@dataclass
class DedupResult:
    kept: list[RewriteRule]
    removed: list[tuple[RewriteRule, str]]

    def kept_checksums(self) -> frozenset[str]:
        return frozenset(checksum(r) for r in self.kept)


def union_population(rules: Iterable[RewriteRule]) -> list[PopulationPlan]:
    """Deduplicated plan populations of every rule, in canonical order.

    A population entry is a (plan, context) pair whose symbols only have
    meaning together, so deduplication keys on their joint canonical form.
    """
    merged: dict[str, PopulationPlan] = {}
    for rule in rules:
        for pop in plan_population(rule):
            key = checksum(make_rule(pop.plan, pop.plan, pop.context))
            merged.setdefault(key, pop)
    return sorted(
        merged.values(),
        key=lambda p: (serialize_template(p.plan), sorted(map(str, p.context))),
    )


def _scan(
    rules: list[RewriteRule],
    bound: VerifierBound,
    cache: dict[str, bool],
    stage: str,
    population: Optional[list[PopulationPlan]] = None,
) -> DedupResult:
    kept = list(rules)
    removed: list[tuple[RewriteRule, str]] = []
    # every removal must preserve the closure of every plan any member of
    # the set can touch, so survivor sets are closure-equal regardless of
    # how the scan was partitioned
    if population is None:
        population = union_population(rules)
    for rule in _removal_order(rules):
        if len(kept) <= 1:
            break
        key = checksum(rule)
        if not any(checksum(r) == key for r in kept):
            continue
        if is_redundant_in_set(
            rule, kept, sample_plans=population, bound=bound, cache=cache
        ):
            kept = [r for r in kept if checksum(r) != key]
            removed.append((rule, stage))
    return DedupResult(kept, removed)


def partition_dedup(
    rules: Iterable[RewriteRule],
    partition_size: int = 16,
    bound: VerifierBound = VerifierBound(),
) -> DedupResult:
    """Partition, dedup each part, merge, then subsume over the merged set.

    Alpha-equivalent duplicates (equal checksums) are collapsed first.
    Rules are scanned for removal in ascending (constraint count, canonical
    form) order, so the most-constrained member of a redundancy class is the
    one retained.
    """
    if partition_size < 2:
        raise ValueError("partition_size must be >= 2")
    cache: dict[str, bool] = {}
    unique: dict[str, RewriteRule] = {}
    removed: list[tuple[RewriteRule, str]] = []
    for r in rules:
        key = checksum(r)
        if key in unique:
            removed.append((r, "duplicate"))
        else:
            unique[key] = r
    # global removal order (ascending constraint count) so the most
    # constrained member of a redundancy class is the one retained
    ordered = _removal_order(unique.values())
    population = union_population(ordered)
    kept = list(ordered)

    def sweep(candidates: list[RewriteRule], stage: str) -> None:
        # redundancy is always judged against the current global survivor
        # set, so every removal preserves the closure of every population
        # plan and the result is closure-equal to a whole-set scan
        nonlocal kept
        for rule in _removal_order(candidates):
            if len(kept) <= 1:
                return
            key = checksum(rule)
            if not any(checksum(r) == key for r in kept):
                continue
            if is_redundant_in_set(
                rule, kept, sample_plans=population, bound=bound, cache=cache
            ):
                kept = [r for r in kept if checksum(r) != key]
                removed.append((rule, stage))

    for i in range(0, len(ordered), partition_size):
        sweep(ordered[i : i + partition_size], "partition")
    sweep(kept, "merge")
    return DedupResult(sorted(kept, key=rule_line), removed)
