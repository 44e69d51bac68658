"""Rule matching and application over plan templates.

Matches a rule's source template against subtrees of a target plan, replaces
the match with the instantiated destination template, and computes the
breadth-first rewrite closure used for redundancy proofs and end users.

Relation symbols in the rule's source act as subtree wildcards: the same
symbol must bind to structurally identical subtrees.  Attribute, fresh-name,
and predicate symbols bind to the parameter occupying the matched slot.
Rule constraints must be discharged before a match is accepted — either by
declared schema facts (concrete mode) or by an assumed constraint context
(symbolic mode, used during rule-set deduplication).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .plan import (
    Constraint,
    ConstraintKind,
    OperatorKind,
    Param,
    PlanError,
    PlanNode,
    PlanTemplate,
    RewriteRule,
    SymbolId,
    rule_line,
    serialize_template,
    sym,
    template_checksum,
)

Binding = Union[Param, PlanNode]


_FACT_KINDS = {
    "unique": ConstraintKind.UNIQUE,
    "notnull": ConstraintKind.NOT_NULL,
    "ref": ConstraintKind.REF_ATTRS,
    "subattrs": ConstraintKind.SUB_ATTRS,
}


@dataclass(frozen=True)
class SchemaAnnotations:
    """Declared facts about concrete relations, used to discharge constraints.

    Each fact is ``(kind, args)`` where args name a relation symbol and the
    attribute symbols it constrains, exactly as they appear in the plan.
    """

    facts: frozenset[tuple[ConstraintKind, tuple[SymbolId, ...]]] = frozenset()

    def has(self, kind: ConstraintKind, args: tuple[SymbolId, ...]) -> bool:
        return (kind, args) in self.facts

    @staticmethod
    def parse(text: str) -> "SchemaAnnotations":
        """Parse fact lines such as ``unique t0 a0`` or ``notnull t0 a1``."""
        facts = set()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind = _FACT_KINDS.get(parts[0].lower())
            if kind is None:
                raise PlanError(f"unknown schema fact {parts[0]!r}")
            args = tuple(sym(p) for p in parts[1:])
            facts.add((kind, args))
        return SchemaAnnotations(frozenset(facts))


@dataclass(frozen=True)
class Match:
    """An embedding of a rule's source template at one plan subtree."""

    root_index: int
    root: PlanNode
    bindings: dict[SymbolId, Binding] = field(hash=False)

    def bound_param(self, s: SymbolId) -> Param:
        b = self.bindings[s]
        if not isinstance(b, Param):
            raise PlanError(f"symbol {s} is bound to a subtree, not a parameter")
        return b


def _match_node(pattern: PlanNode, target: PlanNode, bindings: dict) -> bool:
    if pattern.kind is OperatorKind.INPUT:
        rel = pattern.params[0].symbol
        prior = bindings.get(rel)
        if prior is None:
            bindings[rel] = target
            return True
        return prior == target
    if pattern.kind is not target.kind:
        return False
    if len(pattern.params) != len(target.params):
        return False
    for p, t in zip(pattern.params, target.params):
        prior = bindings.get(p.symbol)
        if prior is None:
            bindings[p.symbol] = t
        elif prior != t:
            return False
    if len(pattern.children) != len(target.children):
        return False
    return all(
        _match_node(pc, tc, bindings)
        for pc, tc in zip(pattern.children, target.children)
    )


def _subst_constraint_args(c: Constraint, bindings: dict) -> Optional[tuple]:
    """Instantiated constraint args, or None if a relation binds to a non-leaf."""
    out = []
    for a in c.args:
        b = bindings.get(a)
        if b is None:
            return None
        if isinstance(b, PlanNode):
            if b.kind is not OperatorKind.INPUT:
                return None
            out.append(b.params[0].symbol)
        else:
            out.append(b.symbol)
    return tuple(out)


def instantiate_constraint(c: Constraint, bindings: dict) -> Optional[Constraint]:
    """The constraint with rule symbols replaced by their plan bindings."""
    args = _subst_constraint_args(c, bindings)
    if args is None:
        return None
    try:
        return Constraint(c.kind, args)
    except PlanError:
        return None


def _discharged(
    c: Constraint,
    bindings: dict,
    schema: Optional[SchemaAnnotations],
    assumed: Optional[frozenset],
) -> bool:
    # Structural discharge: equalities that the binding itself realizes.
    if c.kind in (ConstraintKind.REL_EQ, ConstraintKind.ATTRS_EQ, ConstraintKind.PRED_EQ):
        left, right = bindings.get(c.args[0]), bindings.get(c.args[1])
        if left is not None and left == right:
            return True
    args: list[Optional[SymbolId]] = []
    free: list[int] = []
    for i, a in enumerate(c.args):
        b = bindings.get(a)
        if b is None:
            args.append(None)
            free.append(i)
        elif isinstance(b, PlanNode):
            if b.kind is not OperatorKind.INPUT:
                return False
            args.append(b.params[0].symbol)
        else:
            args.append(b.symbol)
    if not free:
        inst = instantiate_constraint(c, bindings)
        if inst is None:
            return False
        if assumed is not None and inst in assumed:
            return True
        if schema is not None and schema.has(inst.kind, inst.args):
            return True
        return False
    # Symbols appearing only in the constraint list are existential: the
    # constraint is discharged by any available fact agreeing on the bound
    # positions, and the free symbols adopt that fact's arguments.
    facts: list[tuple[ConstraintKind, tuple[SymbolId, ...]]] = []
    if assumed is not None:
        facts.extend((f.kind, f.args) for f in assumed)
    if schema is not None:
        facts.extend(schema.facts)
    for kind, fact_args in sorted(facts, key=str):
        if kind is not c.kind or len(fact_args) != len(args):
            continue
        if all(a is None or a == fa for a, fa in zip(args, fact_args)):
            for i in free:
                bindings[c.args[i]] = Param(fact_args[i])
            return True
    return False


def find_matches(
    plan: PlanTemplate,
    rule: RewriteRule,
    schema: Optional[SchemaAnnotations] = None,
    assumed: Optional[Iterable[Constraint]] = None,
) -> list[Match]:
    """All embeddings of rule.src into the plan, in pre-order of match root.

    A match is kept only when every rule constraint is discharged — by the
    binding itself (bound-equal symbols), by ``schema`` facts, or by
    membership in the ``assumed`` constraint context.
    """
    assumed_set = frozenset(assumed) if assumed is not None else None
    out: list[Match] = []
    for index, node in enumerate(plan.root.walk()):
        bindings: dict[SymbolId, Binding] = {}
        if not _match_node(rule.src.root, node, bindings):
            continue
        if all(
            _discharged(c, bindings, schema, assumed_set)
            for c in rule.sorted_constraints()
        ):
            out.append(Match(index, node, bindings))
    return out


def find_structural_matches(plan: PlanTemplate, pattern: PlanTemplate) -> list[Match]:
    """Embeddings of a bare template into the plan, ignoring constraints.

    Used when constraints are carried symbolically (pulled back through the
    bindings) rather than discharged at match time, e.g. rule composition.
    """
    out: list[Match] = []
    for index, node in enumerate(plan.root.walk()):
        bindings: dict[SymbolId, Binding] = {}
        if _match_node(pattern.root, node, bindings):
            out.append(Match(index, node, bindings))
    return out


def _used_indices(plan: PlanTemplate) -> dict[str, int]:
    used: dict[str, int] = {}
    for s in plan.symbols():
        used[s.kind] = max(used.get(s.kind, -1), s.index)
    return used


def _build_dest(node: PlanNode, bindings: dict, fresh: dict[str, int]) -> PlanNode:
    if node.kind is OperatorKind.INPUT:
        rel = node.params[0].symbol
        bound = bindings.get(rel)
        if bound is None:
            raise PlanError(f"destination relation symbol {rel} is unbound")
        if isinstance(bound, Param):
            return PlanNode(OperatorKind.INPUT, (bound,))
        return bound
    params = []
    for p in node.params:
        bound = bindings.get(p.symbol)
        if bound is None:
            # destination-only symbol (e.g. a fresh output name): allocate a
            # plan symbol unused anywhere in the target plan
            fresh[p.symbol.kind] = fresh.get(p.symbol.kind, -1) + 1
            bound = Param(SymbolId(p.symbol.kind, fresh[p.symbol.kind]))
            bindings[p.symbol] = bound
        if isinstance(bound, PlanNode):
            raise PlanError(f"parameter symbol {p.symbol} is bound to a subtree")
        params.append(bound)
    children = tuple(_build_dest(c, bindings, fresh) for c in node.children)
    return PlanNode(node.kind, tuple(params), children)


def _replace(node: PlanNode, target: PlanNode, replacement: PlanNode) -> PlanNode:
    if node is target:
        return replacement
    if not node.children:
        return node
    children = tuple(_replace(c, target, replacement) for c in node.children)
    if all(c is o for c, o in zip(children, node.children)):
        return node
    return PlanNode(node.kind, node.params, children)


def apply_rule(plan: PlanTemplate, rule: RewriteRule, match: Match) -> PlanTemplate:
    """The plan with the matched subtree replaced by the instantiated dest."""
    fresh = _used_indices(plan)
    replacement = _build_dest(rule.dest.root, dict(match.bindings), fresh)
    return PlanTemplate(_replace(plan.root, match.root, replacement))


@dataclass
class RewriteResult:
    """Outcome of a breadth-first rewrite closure."""

    plans: tuple[PlanTemplate, ...]  # minimal-node-count plans reached
    visited: int
    steps: int
    budget_hit: bool
    derivations: dict[str, tuple[str, str]] = field(default_factory=dict)

    def checksums(self) -> frozenset[str]:
        return frozenset(template_checksum(p) for p in self.plans)


def rewrite_fixpoint(
    plan: PlanTemplate,
    rules: Iterable[RewriteRule],
    schema: Optional[SchemaAnnotations] = None,
    assumed: Optional[Iterable[Constraint]] = None,
    max_steps: int = 32,
    max_frontier: int = 10_000,
) -> RewriteResult:
    """Breadth-first closure of rule application, deduplicated canonically.

    Returns the set of minimal-node-count plans reached (the input plan
    included), with a derivation trace keyed by canonical plan checksum.
    """
    rules = list(rules)
    seen: dict[str, PlanTemplate] = {template_checksum(plan): plan}
    derivations: dict[str, tuple[str, str]] = {}
    frontier = [plan]
    steps = 0
    budget_hit = False
    while frontier and steps < max_steps:
        steps += 1
        frontier.sort(key=serialize_template)
        next_frontier: list[PlanTemplate] = []
        for current in frontier:
            parent_key = template_checksum(current)
            for rule in rules:
                for match in find_matches(current, rule, schema, assumed):
                    candidate = apply_rule(current, rule, match)
                    key = template_checksum(candidate)
                    if key in seen:
                        continue
                    seen[key] = candidate
                    derivations[key] = (parent_key, rule_line(rule))
                    next_frontier.append(candidate)
        if len(seen) > max_frontier:
            budget_hit = True
            break
        frontier = next_frontier
    if frontier and steps >= max_steps:
        # plans remained unexpanded when the step budget ran out
        budget_hit = True
    best = min(p.node_count() for p in seen.values())
    minimal = tuple(
        sorted(
            (p for p in seen.values() if p.node_count() == best),
            key=serialize_template,
        )
    )
    return RewriteResult(minimal, len(seen), steps, budget_hit, derivations)
