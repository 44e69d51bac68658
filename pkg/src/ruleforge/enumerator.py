"""Template and rule enumeration.

Builds the plan-template library, generates candidate normalization rules
(single-operator deletes and priority-directed adjacent swaps), prunes
reducible source templates, searches for minimal constraint sets per template
pair, and composes rules for the small-to-large composability study.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from .plan import (
    Constraint,
    ConstraintKind,
    OperatorKind,
    Param,
    PlanNode,
    PlanTemplate,
    RewriteRule,
    SymbolId,
    canonicalize,
    canonicalize_template,
    checksum,
    input_node,
    make_rule,
    rule_line,
    serialize_template,
    template_checksum,
)
from .semantics import Verdict, VerifierBound, check_equivalence
from .rewriter import (
    find_matches,
    find_structural_matches,
    instantiate_constraint,
    _build_dest,
    _replace,
    _used_indices,
)

# ---------------------------------------------------------------------------
# Template library
# ---------------------------------------------------------------------------

_UNARY_TAGS = ("Proj", "Proj*", "Filter", "Dedup")
_BINARY_TAGS = ("IJoin", "LJoin", "RJoin", "InSub", "InSub2")

#: Order used to direct swaps: projections float up, filters sink down, and
#: everything else (multi-input operators, inputs) never moves.
PRIORITY = {"Proj": 3, "Proj*": 3, "Dedup": 2, "Filter": 1}


def _tag_cost(tag: str, metric: str) -> int:
    if tag == "Input":
        return 1 if metric == "nodes" else 0
    if tag == "Proj*" and metric == "nodes":
        return 2
    return 1


@dataclass(frozen=True)
class _Shape:
    tag: str
    children: tuple["_Shape", ...] = ()

    def leaves(self) -> int:
        if self.tag == "Input":
            return 1
        return sum(c.leaves() for c in self.children)


def _shapes(budget: int, metric: str, _memo: dict) -> list[_Shape]:
    key = budget
    if key in _memo:
        return _memo[key]
    out: list[_Shape] = []
    leaf_cost = _tag_cost("Input", metric)
    if leaf_cost <= budget:
        out.append(_Shape("Input"))
    for tag in _UNARY_TAGS:
        cost = _tag_cost(tag, metric)
        if cost < budget or (cost <= budget and leaf_cost == 0):
            for child in _shapes(budget - cost, metric, _memo):
                out.append(_Shape(tag, (child,)))
    for tag in _BINARY_TAGS:
        cost = _tag_cost(tag, metric)
        rest = budget - cost
        if rest < 0:
            continue
        for lb in range(rest + 1):
            for left in _shapes(lb, metric, _memo):
                for right in _shapes(rest - lb, metric, _memo):
                    out.append(_Shape(tag, (left, right)))
    # the recursion above re-derives smaller shapes at every budget; dedup
    seen = set()
    unique = []
    for s in out:
        if s not in seen:
            seen.add(s)
            unique.append(s)
    _memo[key] = unique
    return unique


def _rel_assignments(n_leaves: int, max_distinct: int = 2) -> list[tuple[int, ...]]:
    """Canonical leaf-to-relation identifications with a distinctness cap."""
    out: list[tuple[int, ...]] = []

    def grow(prefix: tuple[int, ...], used: int):
        if len(prefix) == n_leaves:
            out.append(prefix)
            return
        for v in range(min(used + 1, max_distinct)):
            grow(prefix + (v,), max(used, v + 1))

    grow((), 0)
    return out


class _Counters:
    def __init__(self):
        self.idx = {"a": 0, "p": 0}

    def fresh(self, kind: str) -> Param:
        i = self.idx[kind]
        self.idx[kind] += 1
        return Param(SymbolId(kind, i))


def _shape_to_node(shape: _Shape, rels: Iterator[int], counters: _Counters) -> PlanNode:
    if shape.tag == "Input":
        return input_node(SymbolId("t", next(rels)))
    if shape.tag in ("Proj", "Proj*"):
        attr = counters.fresh("a")
        child = _shape_to_node(shape.children[0], rels, counters)
        proj = PlanNode(OperatorKind.PROJ, (attr,), (child,))
        if shape.tag == "Proj*":
            return PlanNode(OperatorKind.DEDUP, (), (proj,))
        return proj
    if shape.tag == "Filter":
        pred = counters.fresh("p")
        attr = counters.fresh("a")
        child = _shape_to_node(shape.children[0], rels, counters)
        return PlanNode(OperatorKind.FILTER, (pred, attr), (child,))
    if shape.tag == "Dedup":
        child = _shape_to_node(shape.children[0], rels, counters)
        return PlanNode(OperatorKind.DEDUP, (), (child,))
    kind = {
        "IJoin": OperatorKind.INNER_JOIN,
        "LJoin": OperatorKind.LEFT_JOIN,
        "RJoin": OperatorKind.RIGHT_JOIN,
    }.get(shape.tag)
    if kind is not None:
        a_l, a_r = counters.fresh("a"), counters.fresh("a")
        left = _shape_to_node(shape.children[0], rels, counters)
        right = _shape_to_node(shape.children[1], rels, counters)
        return PlanNode(kind, (a_l, a_r), (left, right))
    params = (counters.fresh("a"),) if shape.tag == "InSub" else (
        counters.fresh("a"),
        counters.fresh("a"),
    )
    left = _shape_to_node(shape.children[0], rels, counters)
    right = _shape_to_node(shape.children[1], rels, counters)
    return PlanNode(OperatorKind.IN_SUB, params, (left, right))


@dataclass(frozen=True)
class TemplateLibrary:
    """Canonically distinct plan templates grouped by size."""

    by_size: dict[int, tuple[PlanTemplate, ...]]
    size_metric: str
    max_size: int

    def all_templates(self) -> list[PlanTemplate]:
        out: list[PlanTemplate] = []
        for size in sorted(self.by_size):
            out.extend(self.by_size[size])
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_size.values())


def enumerate_templates(max_size: int, size_metric: str = "nodes") -> TemplateLibrary:
    """All templates up to ``max_size`` under the chosen size metric.

    ``nodes`` counts every operator including Input leaves; ``surface``
    counts non-Input operators with Dedup-over-Proj fused as one.  Each
    Input leaf is assigned a relation symbol; identifications with up to two
    distinct relation symbols are generated, canonically numbered.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    if size_metric not in ("nodes", "surface"):
        raise ValueError(f"unknown size metric {size_metric!r}")
    by_size: dict[int, list[PlanTemplate]] = {}
    seen: set[str] = set()
    memo: dict = {}
    for shape in _shapes(max_size, size_metric, memo):
        for rel_ids in _rel_assignments(shape.leaves()):
            node = _shape_to_node(shape, iter(rel_ids), _Counters())
            t = canonicalize_template(PlanTemplate(node))
            line = serialize_template(t)
            if line in seen:
                continue
            seen.add(line)
            size = t.node_count() if size_metric == "nodes" else t.surface_size()
            by_size.setdefault(size, []).append(t)
    return TemplateLibrary(
        {k: tuple(sorted(v, key=serialize_template)) for k, v in sorted(by_size.items())},
        size_metric,
        max_size,
    )


# ---------------------------------------------------------------------------
# Surface-view tree surgery (fused Dedup-over-Proj treated as one operator)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Surface:
    tag: str
    params: tuple[Param, ...]
    children: tuple["_Surface", ...] = ()


def _to_surface(node: PlanNode) -> _Surface:
    if (
        node.kind is OperatorKind.DEDUP
        and node.children
        and node.children[0].kind is OperatorKind.PROJ
    ):
        proj = node.children[0]
        return _Surface("Proj*", proj.params, tuple(_to_surface(c) for c in proj.children))
    tag = {
        OperatorKind.INPUT: "Input",
        OperatorKind.PROJ: "Proj",
        OperatorKind.FILTER: "Filter",
        OperatorKind.DEDUP: "Dedup",
        OperatorKind.INNER_JOIN: "IJoin",
        OperatorKind.LEFT_JOIN: "LJoin",
        OperatorKind.RIGHT_JOIN: "RJoin",
        OperatorKind.IN_SUB: "InSub",
    }[node.kind]
    return _Surface(tag, node.params, tuple(_to_surface(c) for c in node.children))


def _from_surface(s: _Surface) -> PlanNode:
    children = tuple(_from_surface(c) for c in s.children)
    if s.tag == "Proj*":
        return PlanNode(OperatorKind.DEDUP, (), (PlanNode(OperatorKind.PROJ, s.params, children),))
    kind = {
        "Input": OperatorKind.INPUT,
        "Proj": OperatorKind.PROJ,
        "Filter": OperatorKind.FILTER,
        "Dedup": OperatorKind.DEDUP,
        "IJoin": OperatorKind.INNER_JOIN,
        "LJoin": OperatorKind.LEFT_JOIN,
        "RJoin": OperatorKind.RIGHT_JOIN,
        "InSub": OperatorKind.IN_SUB,
    }[s.tag]
    return PlanNode(kind, s.params, children)


def _paths(s: _Surface, prefix: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], _Surface]]:
    yield prefix, s
    for i, c in enumerate(s.children):
        yield from _paths(c, prefix + (i,))


def _get(s: _Surface, path: tuple[int, ...]) -> _Surface:
    for i in path:
        s = s.children[i]
    return s


def _set(s: _Surface, path: tuple[int, ...], new: _Surface) -> _Surface:
    if not path:
        return new
    i = path[0]
    children = list(s.children)
    children[i] = _set(children[i], path[1:], new)
    return _Surface(s.tag, s.params, tuple(children))


def standardization_measure(t: PlanTemplate) -> int:
    """Well-founded measure decreased by every emitted delete and swap."""
    total = 0
    for path, node in _paths(_to_surface(t.root)):
        total += (len(path) + 1) * PRIORITY.get(node.tag, 0)
    return total


def generate_standardized_candidates(lib: TemplateLibrary) -> list[RewriteRule]:
    """Constraint-free delete and swap candidates, one per eligible node.

    For each template, a destination copy is edited in place: every
    single-input operator yields a delete candidate (the operator removed,
    its child spliced in), and every node whose parent has strictly lower
    priority yields a swap candidate (node and parent exchanged).  Fused
    Dedup-over-Proj pairs move and delete as a unit.
    """
    out: list[RewriteRule] = []
    for t_src in lib.all_templates():
        surface = _to_surface(t_src.root)
        for path, node in _paths(surface):
            if node.tag in _UNARY_TAGS or node.tag == "Proj*":
                deleted = _set(surface, path, node.children[0])
                out.append(make_rule(t_src, PlanTemplate(_from_surface(deleted))))
            if path:
                parent_path = path[:-1]
                parent = _get(surface, parent_path)
                if PRIORITY.get(parent.tag, 0) < PRIORITY.get(node.tag, 0):
                    # exchange node and parent: node takes the parent's place,
                    # the parent adopts the node's child in the node's slot
                    slot = path[-1]
                    new_children = list(parent.children)
                    new_children[slot] = node.children[0]
                    lowered = _Surface(parent.tag, parent.params, tuple(new_children))
                    raised = _Surface(node.tag, node.params, (lowered,))
                    swapped = _set(surface, parent_path, raised)
                    out.append(make_rule(t_src, PlanTemplate(_from_surface(swapped))))
    return out


@dataclass(frozen=True)
class StandardizedRuleBase:
    """Verified constraint-free normalization rules."""

    rules: tuple[RewriteRule, ...]

    def __len__(self) -> int:
        return len(self.rules)


def build_standardized_rulebase(
    candidates: Iterable[RewriteRule],
    verifier: Optional[Callable[[RewriteRule], Verdict]] = None,
    deduplicator: Optional[Callable[[list[RewriteRule]], list[RewriteRule]]] = None,
    bound: VerifierBound = VerifierBound(),
) -> StandardizedRuleBase:
    """Keep candidates the verifier confirms, deduplicated canonically."""
    verify = verifier if verifier is not None else (lambda r: check_equivalence(r, bound))
    kept: dict[str, RewriteRule] = {}
    for cand in candidates:
        # a delete that leaves src and dest identical proves nothing
        if template_checksum(cand.src) == template_checksum(cand.dest):
            continue
        key = checksum(cand)
        if key in kept:
            continue
        try:
            verdict = verify(cand)
        except Exception:
            continue
        if verdict.equivalent:
            kept[key] = cand
    rules = sorted(kept.values(), key=rule_line)
    if deduplicator is not None:
        rules = list(deduplicator(rules))
    return StandardizedRuleBase(tuple(rules))


def is_source_reducible(t_src: PlanTemplate, base: StandardizedRuleBase) -> bool:
    """True iff any normalization rule fires on the template in one step."""
    return any(find_matches(t_src, rule) for rule in base.rules)


# ---------------------------------------------------------------------------
# Constraint-set search
# ---------------------------------------------------------------------------

def constraint_vocabulary(
    rule: RewriteRule,
    kinds: Iterable[ConstraintKind] = (
        ConstraintKind.UNIQUE,
        ConstraintKind.NOT_NULL,
        ConstraintKind.ATTRS_EQ,
        ConstraintKind.PRED_EQ,
        ConstraintKind.REL_EQ,
    ),
) -> list[Constraint]:
    """All type-correct constraint atoms over the rule's symbols."""
    syms = rule.symbols()
    rels = [s for s in syms if s.kind == "t"]
    attrs = [s for s in syms if s.kind == "a"]
    preds = [s for s in syms if s.kind == "p"]
    # column-fact constraints may also range over a column named by neither
    # template (e.g. key-ness of the whole relation), so include one spare
    # attribute symbol for them
    spare = SymbolId("a", max((a.index for a in attrs), default=-1) + 1)
    fact_attrs = attrs + [spare]
    out: list[Constraint] = []
    kinds = set(kinds)
    if ConstraintKind.UNIQUE in kinds:
        out += [Constraint(ConstraintKind.UNIQUE, (t, a)) for t in rels for a in fact_attrs]
    if ConstraintKind.NOT_NULL in kinds:
        out += [Constraint(ConstraintKind.NOT_NULL, (t, a)) for t in rels for a in fact_attrs]
    if ConstraintKind.ATTRS_EQ in kinds:
        out += [
            Constraint(ConstraintKind.ATTRS_EQ, (a, b))
            for a, b in itertools.combinations(attrs, 2)
        ]
    if ConstraintKind.PRED_EQ in kinds:
        out += [
            Constraint(ConstraintKind.PRED_EQ, (p, q))
            for p, q in itertools.combinations(preds, 2)
        ]
    if ConstraintKind.REL_EQ in kinds:
        out += [
            Constraint(ConstraintKind.REL_EQ, (t, u))
            for t, u in itertools.combinations(rels, 2)
        ]
    if ConstraintKind.SUB_ATTRS in kinds:
        out += [Constraint(ConstraintKind.SUB_ATTRS, (a, t)) for a in attrs for t in rels]
    if ConstraintKind.REF_ATTRS in kinds:
        out += [
            Constraint(ConstraintKind.REF_ATTRS, (t, a, u, b))
            for t in rels
            for a in fact_attrs
            for u in rels
            for b in fact_attrs
            if (t, a) != (u, b)
        ]
    return sorted(out, key=str)


def enumerate_constraint_sets(
    t_src: PlanTemplate,
    t_dest: PlanTemplate,
    vocabulary: Optional[list[Constraint]] = None,
    bound: VerifierBound = VerifierBound(),
    max_size: int = 2,
    base_constraints: Iterable[Constraint] = (),
) -> Iterator[frozenset[Constraint]]:
    """Minimal constraint sets making the pair equivalent, smallest first.

    Breadth-first over subset size with superset pruning: once a set passes,
    none of its supersets is tried, so every emitted set is minimal by
    construction (all of its proper subsets were already refuted).
    """
    skeleton = make_rule(t_src, t_dest, base_constraints)
    vocab = (
        vocabulary if vocabulary is not None else constraint_vocabulary(skeleton)
    )
    passed: list[frozenset[Constraint]] = []
    for size in range(max_size + 1):
        for combo in itertools.combinations(vocab, size):
            cset = frozenset(combo)
            if any(p <= cset for p in passed):
                continue
            rule = make_rule(t_src, t_dest, cset | frozenset(base_constraints))
            try:
                verdict = check_equivalence(rule, bound)
            except Exception:
                continue
            if verdict.equivalent:
                passed.append(cset)
                yield cset


# ---------------------------------------------------------------------------
# Width pre-filter and symbol unification for template pairs
# ---------------------------------------------------------------------------

def template_width(t: PlanTemplate, relation_arity: int = 2) -> int:
    """Output width under singleton attribute bindings and fixed arity."""

    def width(node: PlanNode) -> int:
        kind = node.kind
        if kind is OperatorKind.INPUT:
            return relation_arity
        if kind is OperatorKind.PROJ:
            return 1
        if kind in (OperatorKind.FILTER, OperatorKind.DEDUP):
            return width(node.children[0])
        if kind is OperatorKind.IN_SUB:
            return width(node.children[0])
        return width(node.children[0]) + width(node.children[1])

    return width(t.root)


def _unifications(t_src: PlanTemplate, t_dest: PlanTemplate) -> Iterator[PlanTemplate]:
    """Destination variants with symbols identified into the source's pool.

    Every destination relation/attribute/predicate symbol is mapped onto a
    source symbol of the same kind; pairs whose destination needs a symbol
    kind the source lacks are skipped.  Further equalities between source
    symbols are expressed by constraints, not by renaming.
    """
    src_syms = {"t": t_src.symbols_of_kind("t"), "a": t_src.symbols_of_kind("a"), "p": t_src.symbols_of_kind("p")}
    dest_syms = [s for s in t_dest.symbols() if s.kind in "tap"]
    pools = []
    for s in dest_syms:
        pool = src_syms[s.kind]
        if not pool:
            return
        pools.append(pool)
    for combo in itertools.product(*pools):
        mapping = dict(zip(dest_syms, combo))

        def rename(node: PlanNode) -> PlanNode:
            params = tuple(
                Param(mapping.get(p.symbol, p.symbol), p.qualifier) for p in node.params
            )
            return PlanNode(node.kind, params, tuple(rename(c) for c in node.children))

        try:
            yield PlanTemplate(rename(t_dest.root))
        except Exception:
            continue


# ---------------------------------------------------------------------------
# Full enumeration pipeline
# ---------------------------------------------------------------------------

@dataclass
class EnumerationStats:
    pairs_considered: int = 0
    pairs_pruned_reducible: int = 0
    pairs_pruned_width: int = 0
    pairs_pruned_ranker: int = 0
    base_calls: int = 0
    verification_calls: int = 0
    rules_emitted: int = 0
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def rules_for_pair(
    t_src: PlanTemplate,
    t_dest: PlanTemplate,
    bound: VerifierBound = VerifierBound(),
    max_constraints: int = 1,
    max_unifications: Optional[int] = None,
) -> Iterator[RewriteRule]:
    """Verified rules for one template pair, over all symbol unifications."""
    unifications = _unifications(t_src, t_dest)
    if max_unifications is not None:
        unifications = itertools.islice(unifications, max_unifications)
    for dest_variant in unifications:
        for cset in enumerate_constraint_sets(
            t_src, dest_variant, bound=bound, max_size=max_constraints
        ):
            yield make_rule(t_src, dest_variant, cset)


def enumerate_rules(
    max_size: int,
    size_metric: str = "nodes",
    bound: VerifierBound = VerifierBound(),
    use_standardization: bool = True,
    max_constraints: int = 1,
    pair_scorer: Optional[Callable[[PlanTemplate, PlanTemplate], float]] = None,
    top_k: Optional[int] = None,
    rtp_filter: Optional[Callable[[RewriteRule], bool]] = None,
    pair_limit: Optional[int] = None,
    pair_seed: int = 0,
    base_max_size: Optional[int] = None,
    max_unifications: Optional[int] = None,
) -> tuple[list[RewriteRule], EnumerationStats]:
    """The discovery pipeline: templates -> pairs -> constraints -> rules.

    Pairs are ordered (source, destination) with the destination no larger
    than the source.  A pair is pruned when either template is reducible by
    the standardized base: a rule over a non-canonical template is subsumed
    by the rule over its normal form.  ``pair_limit`` keeps a deterministic
    random sample of the pair population (drawn before any pruning, so
    pruned and unpruned runs measure the same pairs).  ``base_max_size``
    builds the standardized base from a smaller library; its rules still
    fire on larger templates by subtree matching.  ``max_unifications``
    caps the symbol mappings tried per pair (mapping construction builds a
    bounded set rather than the full assignment product).  ``pair_scorer``
    with
    ``top_k`` keeps only the k highest-scoring pairs; ``rtp_filter`` drops
    rules it reports redundant.
    """
    import random

    from .semantics import reset_verification_counter, verification_counter

    start = time.monotonic()
    stats = EnumerationStats()
    reset_verification_counter()
    lib = enumerate_templates(max_size, size_metric)
    base = StandardizedRuleBase(())
    if use_standardization:
        base_lib = (
            lib
            if base_max_size is None or base_max_size >= max_size
            else enumerate_templates(base_max_size, size_metric)
        )
        base = build_standardized_rulebase(
            generate_standardized_candidates(base_lib), bound=bound
        )
        stats.base_calls = verification_counter()["calls"]
        # the normalization base is built once and reused; only the
        # per-pair constraint search counts toward enumeration cost
        reset_verification_counter()
    templates = lib.all_templates()
    counts = [t.node_count() for t in templates]
    n = len(templates)
    pairs: list[tuple[PlanTemplate, PlanTemplate]]
    if pair_limit is not None:
        # sample (src, dest) cells of the n x n grid directly, rejecting
        # invalid cells, so large libraries never materialize all pairs;
        # library templates are canonical and distinct, so i == j is the
        # only identical pair
        rng = random.Random(pair_seed)
        chosen: set[tuple[int, int]] = set()
        attempts = 0
        while len(chosen) < pair_limit and attempts < pair_limit * 1000:
            attempts += 1
            i = rng.randrange(n)
            j = rng.randrange(n)
            if i == j or counts[j] > counts[i]:
                continue
            chosen.add((i, j))
        pairs = [(templates[i], templates[j]) for i, j in sorted(chosen)]
    else:
        pairs = [
            (templates[i], templates[j])
            for i in range(n)
            for j in range(n)
            if i != j and counts[j] <= counts[i]
        ]
    stats.pairs_considered = len(pairs)
    if use_standardization:
        reducible_cache: dict[str, bool] = {}

        def reducible(t: PlanTemplate) -> bool:
            key = serialize_template(t)
            if key not in reducible_cache:
                reducible_cache[key] = is_source_reducible(t, base)
            return reducible_cache[key]

        survivors = []
        for t_src, t_dest in pairs:
            if reducible(t_src) or reducible(t_dest):
                stats.pairs_pruned_reducible += 1
            else:
                survivors.append((t_src, t_dest))
        pairs = survivors
    if pair_scorer is not None and top_k is not None:
        scored = sorted(
            pairs,
            key=lambda p: (-pair_scorer(p[0], p[1]), serialize_template(p[0]), serialize_template(p[1])),
        )
        stats.pairs_pruned_ranker = max(0, len(scored) - top_k)
        pairs = scored[:top_k]
    emitted: dict[str, RewriteRule] = {}
    for t_src, t_dest in pairs:
        if template_width(t_src, bound.relation_arity) != template_width(
            t_dest, bound.relation_arity
        ):
            stats.pairs_pruned_width += 1
            continue
        for rule in rules_for_pair(
            t_src, t_dest, bound, max_constraints, max_unifications
        ):
            key = checksum(rule)
            if key in emitted:
                continue
            if rtp_filter is not None and not rtp_filter(rule):
                continue
            emitted[key] = rule
    stats.verification_calls = verification_counter()["calls"]
    stats.rules_emitted = len(emitted)
    stats.wall_time = time.monotonic() - start
    return sorted(emitted.values(), key=rule_line), stats


# ---------------------------------------------------------------------------
# Rule composition
# ---------------------------------------------------------------------------

def compose_rules(r1: RewriteRule, r2: RewriteRule) -> Optional[RewriteRule]:
    """The composite rule applying r1 then r2, or None when r2 never fires.

    r2 is matched structurally against r1's destination; its constraints
    are pulled back through the match bindings and unioned with r1's.  The
    first match in pre-order is used.
    """
    matches = find_structural_matches(r1.dest, r2.src)
    for match in matches:
        pulled: list[Constraint] = []
        ok = True
        for c in r2.sorted_constraints():
            inst = instantiate_constraint(c, match.bindings)
            if inst is None:
                ok = False
                break
            pulled.append(inst)
        if not ok:
            continue
        fresh = _used_indices(r1.src)
        for kind, idx in _used_indices(r1.dest).items():
            fresh[kind] = max(fresh.get(kind, -1), idx)
        replacement = _build_dest(r2.dest.root, dict(match.bindings), fresh)
        new_dest = PlanTemplate(_replace(r1.dest.root, match.root, replacement))
        return make_rule(r1.src, new_dest, set(r1.constraints) | set(pulled))
    return None


def composability_study(
    direct_rules: Iterable[RewriteRule],
    first_stage: Iterable[RewriteRule],
    second_stage: Iterable[RewriteRule],
    subsumes: Optional[Callable[[RewriteRule, list[RewriteRule]], bool]] = None,
) -> tuple[float, dict]:
    """Fraction of direct rules reproduced by two-stage composition.

    Membership is canonical-checksum equality by default; ``subsumes`` can
    supply a semantic redundancy test instead.
    """
    direct = list(direct_rules)
    composites: dict[str, RewriteRule] = {}
    for r1 in first_stage:
        for r2 in second_stage:
            comp = compose_rules(r1, r2)
            if comp is not None:
                composites[checksum(comp)] = comp
    if not direct:
        return 0.0, {"direct": 0, "composites": len(composites), "composable": 0}
    composite_list = sorted(composites.values(), key=rule_line)
    composable = 0
    for rule in direct:
        if checksum(rule) in composites:
            composable += 1
        elif subsumes is not None and subsumes(rule, composite_list):
            composable += 1
    fraction = composable / len(direct)
    return fraction, {
        "direct": len(direct),
        "composites": len(composites),
        "composable": composable,
    }
