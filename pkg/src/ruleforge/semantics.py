"""Bag-semantics evaluation of plan templates over small finite databases,
plus the bounded equivalence verifier and constraint-minimality checker.

Values are small non-negative integers or NULL (Python ``None``).  Relations
are multisets of fixed-arity tuples.  Attribute symbols bind to lists of
column references ``(relation symbol, column index)``; when a template is
evaluated, each reference is looked up in the schema that flows up from the
Input leaves, falling back to positional column indices when the reference
does not appear in the schema.

Equivalence checking enumerates every database up to a configurable bound,
deterministically, and reports either a bounded confirmation with the model
count or the first counterexample found.
"""

from __future__ import annotations

import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from .plan import (
    Constraint,
    ConstraintKind,
    OperatorKind,
    PlanNode,
    PlanTemplate,
    RewriteRule,
    SymbolId,
)

Value = Optional[int]
ColumnRef = tuple[SymbolId, int]


class SemanticsError(ValueError):
    """Unbound symbol, arity mismatch, or a bound too small to bind symbols."""


# ---------------------------------------------------------------------------
# Databases
# ---------------------------------------------------------------------------

def _value_key(v: Value) -> tuple[int, int]:
    return (0, 0) if v is None else (1, v)


def _row_key(row: tuple[Value, ...]) -> tuple:
    return tuple(_value_key(v) for v in row)


@dataclass
class BagRelation:
    """A finite multiset of same-length tuples."""

    arity: int
    rows: dict[tuple[Value, ...], int] = field(default_factory=dict)

    def __post_init__(self):
        for row, mult in self.rows.items():
            if len(row) != self.arity:
                raise SemanticsError(f"row {row} does not match arity {self.arity}")
            if mult < 1:
                raise SemanticsError("multiplicities must be positive")

    def __eq__(self, other):
        return isinstance(other, BagRelation) and self.rows == other.rows and (
            self.arity == other.arity or not self.rows or not other.rows
        )

    def total(self) -> int:
        return sum(self.rows.values())

    def render(self) -> str:
        def fmt(v: Value) -> str:
            return "NULL" if v is None else str(v)

        items = sorted(self.rows.items(), key=lambda kv: _row_key(kv[0]))
        body = ", ".join(f"({','.join(fmt(v) for v in row)}):{m}" for row, m in items)
        return "{" + body + "}"


@dataclass(frozen=True)
class Predicate:
    """A unary predicate from a small fixed family; NULL input is unknown."""

    kind: str  # "true" | "eq" | "neq"
    const: int = 0

    def __call__(self, vals: tuple[Value, ...]) -> Optional[bool]:
        if self.kind == "true":
            return True
        if not vals or vals[0] is None:
            return None
        if self.kind == "eq":
            return vals[0] == self.const
        if self.kind == "neq":
            return vals[0] != self.const
        raise SemanticsError(f"unknown predicate kind {self.kind!r}")

    def __str__(self) -> str:
        if self.kind == "true":
            return "true"
        op = "=" if self.kind == "eq" else "!="
        return f"col{op}{self.const}"


def predicate_family(domain_size: int) -> tuple[Predicate, ...]:
    fam = [Predicate("true")]
    for c in range(domain_size):
        fam.append(Predicate("eq", c))
    for c in range(domain_size):
        fam.append(Predicate("neq", c))
    return tuple(fam)


@dataclass
class Database:
    """Concrete bindings for every symbol of a template or rule."""

    relations: dict[SymbolId, BagRelation] = field(default_factory=dict)
    attrs: dict[SymbolId, tuple[ColumnRef, ...]] = field(default_factory=dict)
    preds: dict[SymbolId, Predicate] = field(default_factory=dict)

    def render(self) -> str:
        lines = []
        for t in sorted(self.relations):
            lines.append(f"rel {t} = {self.relations[t].render()}")
        for a in sorted(self.attrs):
            refs = ",".join(f"{t}.c{j}" for t, j in self.attrs[a])
            lines.append(f"attr {a} = [{refs}]")
        for p in sorted(self.preds):
            lines.append(f"pred {p} = {self.preds[p]}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Schema resolution and evaluation
# ---------------------------------------------------------------------------

def resolve_positions(
    refs: tuple[ColumnRef, ...], schema: tuple[ColumnRef, ...]
) -> Optional[tuple[int, ...]]:
    """First-occurrence column positions for refs within a schema.

    None when any ref is absent: the binding does not make sense for the
    template and is excluded from the verifier's model space.
    """
    if all(r in schema for r in refs):
        return tuple(schema.index(r) for r in refs)
    return None


def _project(row: tuple[Value, ...], positions: tuple[int, ...]) -> tuple[Value, ...]:
    return tuple(row[i] for i in positions)


def _non_null_match(left: tuple[Value, ...], right: tuple[Value, ...]) -> bool:
    return all(l is not None and r is not None and l == r for l, r in zip(left, right))


@dataclass
class _Compiled:
    """An evaluator over relation contents given as {symbol: rows dict}.

    Memo keys use ``id()`` of the rows dicts, so callers must keep each
    distinct contents dict alive for the lifetime of the compiled evaluator.
    """

    schema: tuple[ColumnRef, ...]
    rels: frozenset[SymbolId]
    fn: Callable[[dict[SymbolId, dict]], dict]


class _Compiler:
    """Resolves a template against attr/pred bindings into an evaluator.

    Each compiled node memoizes its output bag per assignment of the relation
    contents appearing in its subtree, so verification reuses subtree results
    across the model enumeration.
    """

    def __init__(
        self,
        attrs: dict[SymbolId, tuple[ColumnRef, ...]],
        preds: dict[SymbolId, Predicate],
        rel_arity: dict[SymbolId, int],
        memo: bool = False,
        memo_total_rels: int = 0,
    ):
        self.attrs = attrs
        self.preds = preds
        self.rel_arity = rel_arity
        self.memo = memo
        self.memo_total_rels = memo_total_rels

    def compile(self, node: PlanNode) -> Optional[_Compiled]:
        compiled = self._compile_node(node)
        return compiled

    def _attr(self, s: SymbolId) -> tuple[ColumnRef, ...]:
        if s not in self.attrs:
            raise SemanticsError(f"unbound attribute symbol {s}")
        return self.attrs[s]

    def _wrap(
        self,
        schema: tuple[ColumnRef, ...],
        rels: frozenset[SymbolId],
        fn: Callable[[dict[SymbolId, BagRelation]], dict],
    ) -> _Compiled:
        if self.memo and 0 < len(rels) < self.memo_total_rels:
            order = sorted(rels)
            cache: dict[tuple, dict] = {}
            raw = fn

            def memo_fn(contents, _order=order, _cache=cache, _raw=raw):
                key = tuple(id(contents[t]) for t in _order)
                out = _cache.get(key)
                if out is None:
                    out = _raw(contents)
                    _cache[key] = out
                return out

            fn = memo_fn
        return _Compiled(schema, rels, fn)

    def _compile_node(self, node: PlanNode) -> Optional[_Compiled]:
        kind = node.kind
        if kind is OperatorKind.INPUT:
            t = node.params[0].symbol
            if t not in self.rel_arity:
                raise SemanticsError(f"unbound relation symbol {t}")
            schema = tuple((t, j) for j in range(self.rel_arity[t]))

            def fn(contents, _t=t):
                return contents[_t]

            return self._wrap(schema, frozenset([t]), fn)

        children = [self._compile_node(c) for c in node.children]
        if any(c is None for c in children):
            return None

        if kind is OperatorKind.PROJ:
            (child,) = children
            refs = self._attr(node.params[0].symbol)
            pos = resolve_positions(refs, child.schema)
            if pos is None:
                return None

            def fn(contents, _child=child.fn, _pos=pos):
                out: dict = {}
                for row, m in _child(contents).items():
                    key = _project(row, _pos)
                    out[key] = out.get(key, 0) + m
                return out

            return self._wrap(refs, child.rels, fn)

        if kind is OperatorKind.FILTER:
            (child,) = children
            p = node.params[0].symbol
            if p not in self.preds:
                raise SemanticsError(f"unbound predicate symbol {p}")
            pred = self.preds[p]
            pos = resolve_positions(self._attr(node.params[1].symbol), child.schema)
            if pos is None:
                return None

            def fn(contents, _child=child.fn, _pred=pred, _pos=pos):
                return {
                    row: m
                    for row, m in _child(contents).items()
                    if _pred(_project(row, _pos)) is True
                }

            return self._wrap(child.schema, child.rels, fn)

        if kind is OperatorKind.DEDUP:
            (child,) = children

            def fn(contents, _child=child.fn):
                return {row: 1 for row in _child(contents)}

            return self._wrap(child.schema, child.rels, fn)

        left, right = children
        rels = left.rels | right.rels
        schema = left.schema + right.schema

        if kind in (OperatorKind.INNER_JOIN, OperatorKind.LEFT_JOIN, OperatorKind.RIGHT_JOIN):
            if kind is OperatorKind.RIGHT_JOIN:
                # mirror of LJoin: compile as LJoin over swapped children, then
                # swap the output columns back
                posr = resolve_positions(self._attr(node.params[0].symbol), left.schema)
                posl = resolve_positions(self._attr(node.params[1].symbol), right.schema)
                if posl is None or posr is None:
                    return None
                lw, rw = len(left.schema), len(right.schema)

                def fn(contents, _l=right.fn, _r=left.fn, _pl=posl, _pr=posr, _lw=lw, _rw=rw):
                    out: dict = {}
                    rbag = _r(contents)
                    for lrow, lm in _l(contents).items():
                        lkey = _project(lrow, _pl)
                        matched = 0
                        for rrow, rm in rbag.items():
                            if _non_null_match(lkey, _project(rrow, _pr)):
                                row = rrow + lrow
                                out[row] = out.get(row, 0) + lm * rm
                                matched += rm
                        if matched == 0:
                            row = (None,) * _lw + lrow
                            out[row] = out.get(row, 0) + lm
                    return out

                return self._wrap(schema, rels, fn)

            posl = resolve_positions(self._attr(node.params[0].symbol), left.schema)
            posr = resolve_positions(self._attr(node.params[1].symbol), right.schema)
            if posl is None or posr is None:
                return None
            pad = kind is OperatorKind.LEFT_JOIN
            rw = len(right.schema)

            def fn(contents, _l=left.fn, _r=right.fn, _pl=posl, _pr=posr, _pad=pad, _rw=rw):
                out: dict = {}
                rbag = _r(contents)
                for lrow, lm in _l(contents).items():
                    lkey = _project(lrow, _pl)
                    matched = 0
                    for rrow, rm in rbag.items():
                        if _non_null_match(lkey, _project(rrow, _pr)):
                            row = lrow + rrow
                            out[row] = out.get(row, 0) + lm * rm
                            matched += rm
                    if _pad and matched == 0:
                        row = lrow + (None,) * _rw
                        out[row] = out.get(row, 0) + lm
                return out

            return self._wrap(schema, rels, fn)

        if kind is OperatorKind.IN_SUB:
            refs = self._attr(node.params[0].symbol)
            posl = resolve_positions(refs, left.schema)
            if posl is None:
                return None
            if len(node.params) == 2:
                posr = resolve_positions(self._attr(node.params[1].symbol), right.schema)
                if posr is None:
                    return None
            else:
                posr = resolve_positions(refs, right.schema)
                if posr is None:
                    if len(refs) == len(right.schema):
                        posr = tuple(range(len(right.schema)))
                    else:
                        return None

            def fn(contents, _l=left.fn, _r=right.fn, _pl=posl, _pr=posr):
                out: dict = {}
                rbag = _r(contents)
                for lrow, lm in _l(contents).items():
                    key = _project(lrow, _pl)
                    if any(v is None for v in key):
                        continue
                    if any(_non_null_match(key, _project(r, _pr)) for r in rbag):
                        out[lrow] = out.get(lrow, 0) + lm
                return out

            return self._wrap(left.schema, rels, fn)

        raise SemanticsError(f"cannot evaluate operator {kind}")


def evaluate(t: PlanTemplate, db: Database) -> BagRelation:
    """Evaluate a template to its output multiset over a concrete database."""
    arity = {s: r.arity for s, r in db.relations.items()}
    compiled = _Compiler(db.attrs, db.preds, arity).compile(t.root)
    if compiled is None:
        raise SemanticsError("attribute bindings do not resolve against the template's schema")
    rows = compiled.fn({t: r.rows for t, r in db.relations.items()})
    width = len(compiled.schema)
    return BagRelation(width, dict(rows))


# ---------------------------------------------------------------------------
# Constraint satisfaction
# ---------------------------------------------------------------------------

def _project_relation(db: Database, t: SymbolId, a: SymbolId) -> list[tuple[tuple[Value, ...], int]]:
    rel = db.relations.get(t)
    if rel is None:
        raise SemanticsError(f"unbound relation symbol {t}")
    refs = db.attrs.get(a)
    if refs is None:
        raise SemanticsError(f"unbound attribute symbol {a}")
    schema = tuple((t, j) for j in range(rel.arity))
    pos = resolve_positions(refs, schema)
    if pos is None:
        raise _Unresolvable(f"attribute {a} does not resolve against relation {t}")
    return [(_project(row, pos), m) for row, m in rel.rows.items()]


class _Unresolvable(SemanticsError):
    pass


def satisfies(db: Database, c: Constraint) -> bool:
    try:
        return _satisfies(db, c)
    except _Unresolvable:
        # the attribute does not belong to the relation the constraint names;
        # such a binding can never witness the constraint
        return False


def _satisfies(db: Database, c: Constraint) -> bool:
    kind = c.kind
    if kind is ConstraintKind.REL_EQ:
        return db.relations[c.args[0]] == db.relations[c.args[1]]
    if kind is ConstraintKind.ATTRS_EQ:
        return db.attrs[c.args[0]] == db.attrs[c.args[1]]
    if kind is ConstraintKind.PRED_EQ:
        return db.preds[c.args[0]] == db.preds[c.args[1]]
    if kind is ConstraintKind.SUB_ATTRS:
        a, other = c.args
        refs = db.attrs[a]
        if other.kind == "t":
            return all(t == other for t, _ in refs)
        return set(refs) <= set(db.attrs[other])
    if kind is ConstraintKind.REF_ATTRS:
        t1, a1, t2, a2 = c.args
        src_vals = {
            key for key, _ in _project_relation(db, t1, a1) if all(v is not None for v in key)
        }
        dst_vals = {key for key, _ in _project_relation(db, t2, a2)}
        return src_vals <= dst_vals
    if kind is ConstraintKind.UNIQUE:
        # NULL is treated as an ordinary value here: a unique column admits at
        # most one NULL, matching the symbolic treatment of keys rather than
        # SQL's multiple-NULL allowance.
        t, a = c.args
        seen: Counter = Counter()
        for key, m in _project_relation(db, t, a):
            seen[key] += m
        return all(m <= 1 for m in seen.values())
    if kind is ConstraintKind.NOT_NULL:
        t, a = c.args
        return all(
            all(v is not None for v in key) for key, _ in _project_relation(db, t, a)
        )
    raise SemanticsError(f"unsupported constraint {c}")


# ---------------------------------------------------------------------------
# Bounded equivalence verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifierBound:
    max_rows: int = 2
    domain_size: int = 2
    max_relations: int = 3
    relation_arity: int = 2

    def predicates(self) -> tuple[Predicate, ...]:
        return predicate_family(self.domain_size)

    def contents(self) -> list[dict[tuple[Value, ...], int]]:
        """All relation contents up to max_rows, in deterministic order."""
        values: list[Value] = [None] + list(range(self.domain_size))
        rows = sorted(
            itertools.product(values, repeat=self.relation_arity), key=_row_key
        )
        out: list[dict] = []
        for size in range(self.max_rows + 1):
            for combo in itertools.combinations_with_replacement(rows, size):
                out.append(dict(Counter(combo)))
        return out


@dataclass
class Verdict:
    equivalent: bool
    models_checked: int
    counterexample: Optional[Database] = None
    src_out: Optional[BagRelation] = None
    dest_out: Optional[BagRelation] = None

    @property
    def status(self) -> str:
        return "EquivalentBounded" if self.equivalent else "NotEquivalent"

    def render(self) -> str:
        lines = [f"{self.status} models_checked={self.models_checked}"]
        if not self.equivalent:
            lines.append(self.counterexample.render())
            lines.append(f"src_out = {self.src_out.render()}")
            lines.append(f"dest_out = {self.dest_out.render()}")
        return "\n".join(lines)


_COUNTERS = {"calls": 0, "models_checked": 0}


def verification_counter() -> dict[str, int]:
    return dict(_COUNTERS)


def reset_verification_counter() -> None:
    _COUNTERS["calls"] = 0
    _COUNTERS["models_checked"] = 0


def _rule_symbols(rule: RewriteRule) -> tuple[list[SymbolId], list[SymbolId], list[SymbolId]]:
    rels, attrs, preds = [], [], []
    for s in rule.symbols():
        if s.kind == "t" and s not in rels:
            rels.append(s)
        elif s.kind == "a" and s not in attrs:
            attrs.append(s)
        elif s.kind == "p" and s not in preds:
            preds.append(s)
    return sorted(rels), sorted(attrs), sorted(preds)


def _binding_level(c: Constraint) -> bool:
    return c.kind in (ConstraintKind.ATTRS_EQ, ConstraintKind.SUB_ATTRS)


def _binding_satisfied(c: Constraint, attrs: dict[SymbolId, tuple[ColumnRef, ...]]) -> bool:
    if c.kind is ConstraintKind.ATTRS_EQ:
        return attrs[c.args[0]] == attrs[c.args[1]]
    a, other = c.args
    refs = attrs[a]
    if other.kind == "t":
        return all(t == other for t, _ in refs)
    return set(refs) <= set(attrs[other])


def check_equivalence(rule: RewriteRule, bound: VerifierBound = VerifierBound()) -> Verdict:
    """Exhaustively compare src and dest over all databases within the bound.

    Attribute/predicate bindings that violate binding-level constraints or do
    not resolve against both templates are excluded from the model space.
    Returns the first (lexicographically, in enumeration order) counterexample
    or a bounded confirmation with the number of databases compared.
    """
    _COUNTERS["calls"] += 1
    rels, attr_syms, pred_syms = _rule_symbols(rule)
    if len(rels) > bound.max_relations:
        raise SemanticsError(
            f"rule uses {len(rels)} relations, bound allows {bound.max_relations}"
        )
    if not rels:
        raise SemanticsError("rule binds no relation symbols")

    arity = {t: bound.relation_arity for t in rels}
    ref_options: list[ColumnRef] = [
        (t, j) for t in rels for j in range(bound.relation_arity)
    ]
    all_contents = bound.contents()
    preds = bound.predicates()

    binding_cons = [c for c in rule.sorted_constraints() if _binding_level(c)]
    pred_cons = [c for c in rule.sorted_constraints() if c.kind is ConstraintKind.PRED_EQ]
    content_cons = [
        c
        for c in rule.sorted_constraints()
        if not _binding_level(c) and c.kind is not ConstraintKind.PRED_EQ
    ]

    models_checked = 0
    bindable = False

    for attr_choice in itertools.product(ref_options, repeat=len(attr_syms)):
        attrs = {a: (ref,) for a, ref in zip(attr_syms, attr_choice)}
        if not all(_binding_satisfied(c, attrs) for c in binding_cons):
            continue
        compiler = _Compiler(attrs, {}, arity)
        pred_bindings = list(itertools.product(preds, repeat=len(pred_syms)))
        pred_bindings = [
            pb
            for pb in pred_bindings
            if all(
                pb[pred_syms.index(c.args[0])] == pb[pred_syms.index(c.args[1])]
                for c in pred_cons
            )
        ]
        if not pred_bindings:
            continue

        # Static resolution check with throwaway predicate bindings
        probe = _Compiler(attrs, {p: preds[0] for p in pred_syms}, arity)
        if probe.compile(rule.src.root) is None or probe.compile(rule.dest.root) is None:
            continue
        bindable = True

        # Per-relation content prefilter from single-relation constraints
        rel_contents: dict[SymbolId, list[dict]] = {}
        for t in rels:
            options = all_contents
            for c in content_cons:
                if c.kind in (ConstraintKind.UNIQUE, ConstraintKind.NOT_NULL) and c.args[0] == t:
                    options = [
                        rows
                        for rows in options
                        if satisfies(
                            Database({t: BagRelation(bound.relation_arity, rows)}, attrs, {}),
                            c,
                        )
                    ]
            rel_contents[t] = options
        cross_cons = [
            c
            for c in content_cons
            if c.kind in (ConstraintKind.REL_EQ, ConstraintKind.REF_ATTRS)
        ]

        for pred_binding in pred_bindings:
            pred_map = dict(zip(pred_syms, pred_binding))
            compiler = _Compiler(attrs, pred_map, arity, memo=True, memo_total_rels=len(rels))
            src_c = compiler.compile(rule.src.root)
            dest_c = compiler.compile(rule.dest.root)
            if src_c is None or dest_c is None:
                continue

            for combo in itertools.product(*(rel_contents[t] for t in rels)):
                assignment = dict(zip(rels, combo))
                if cross_cons:
                    db = Database(
                        {
                            t: BagRelation(bound.relation_arity, rows)
                            for t, rows in assignment.items()
                        },
                        attrs,
                        pred_map,
                    )
                    if not all(satisfies(db, c) for c in cross_cons):
                        continue
                models_checked += 1
                src_rows = src_c.fn(assignment)
                dest_rows = dest_c.fn(assignment)
                if src_rows != dest_rows or len(src_c.schema) != len(dest_c.schema):
                    _COUNTERS["models_checked"] += models_checked
                    witness = Database(
                        {
                            t: BagRelation(bound.relation_arity, dict(rows))
                            for t, rows in assignment.items()
                        },
                        attrs,
                        pred_map,
                    )
                    return Verdict(
                        False,
                        models_checked,
                        witness,
                        BagRelation(len(src_c.schema), dict(src_rows)),
                        BagRelation(len(dest_c.schema), dict(dest_rows)),
                    )

    _COUNTERS["models_checked"] += models_checked
    if not bindable:
        raise SemanticsError("bound too small: no binding resolves both templates")
    return Verdict(True, models_checked)


def check_minimality(
    rule: RewriteRule,
    bound: VerifierBound = VerifierBound(),
    constraints: Optional[Iterable[Constraint]] = None,
) -> bool:
    """True iff removing any single constraint breaks bounded equivalence.

    ``constraints`` restricts the check to a subset (e.g. to skip the
    schema-membership constraints implied by qualified attribute symbols,
    which the binding enumeration already enforces).
    """
    candidates = rule.sorted_constraints() if constraints is None else list(constraints)
    for c in candidates:
        weakened = RewriteRule(
            rule.src, rule.dest, rule.mapping, rule.constraints - {c}
        )
        try:
            verdict = check_equivalence(weakened, bound)
        except SemanticsError:
            continue
        if verdict.equivalent:
            return False
    return True


def random_databases(
    rule: RewriteRule,
    bound: VerifierBound,
    count: int,
    seed: int,
    max_rows: Optional[int] = None,
    domain_size: Optional[int] = None,
) -> Iterator[Database]:
    """Random databases satisfying the rule's constraints, beyond the bound.

    Used to stress bounded confirmations with larger models.
    """
    rng = random.Random(seed)
    rels, attr_syms, pred_syms = _rule_symbols(rule)
    max_rows = max_rows if max_rows is not None else bound.max_rows + 2
    domain_size = domain_size if domain_size is not None else bound.domain_size + 1
    values: list[Value] = [None] + list(range(domain_size))
    non_null: list[Value] = list(range(domain_size))
    preds = predicate_family(domain_size)
    ref_options: list[ColumnRef] = [
        (t, j) for t in rels for j in range(bound.relation_arity)
    ]
    cons = sorted(rule.constraints, key=str)

    def positions(attrs, t, a):
        schema = tuple((t, j) for j in range(bound.relation_arity))
        return resolve_positions(attrs[a], schema)

    produced = 0
    attempts = 0
    while produced < count and attempts < count * 200:
        attempts += 1
        attrs = {a: (rng.choice(ref_options),) for a in attr_syms}
        pred_map = {p: rng.choice(preds) for p in pred_syms}
        # repair symbol bindings so equality/membership constraints hold by
        # construction; pure rejection is hopeless once a rule carries two or
        # three constraints
        for c in cons:
            if c.kind is ConstraintKind.ATTRS_EQ:
                attrs[c.args[1]] = attrs[c.args[0]]
            elif c.kind is ConstraintKind.PRED_EQ:
                pred_map[c.args[1]] = pred_map[c.args[0]]
            elif c.kind is ConstraintKind.SUB_ATTRS:
                a, other = c.args
                if other.kind == "t":
                    attrs[a] = ((other, attrs[a][0][1]),)
                else:
                    attrs[a] = attrs[other]
        rows_by_rel: dict[SymbolId, dict[tuple[Value, ...], int]] = {}
        for t in rels:
            n = rng.randint(0, max_rows)
            counted: Counter = Counter(
                tuple(rng.choice(values) for _ in range(bound.relation_arity))
                for _ in range(n)
            )
            rows_by_rel[t] = dict(counted)
        # repair the row data: fill NULLs, drop duplicate keys, drop dangling
        # references, copy equal relations; a final satisfies() pass still
        # gates the result so repair interactions can only cost a retry
        resolvable = True
        for c in cons:
            if c.kind is ConstraintKind.NOT_NULL:
                t, a = c.args
                pos = positions(attrs, t, a)
                if pos is None:
                    resolvable = False
                    break
                filled: Counter = Counter()
                for row, m in rows_by_rel[t].items():
                    patched = list(row)
                    for j in pos:
                        if patched[j] is None:
                            patched[j] = rng.choice(non_null)
                    filled[tuple(patched)] += m
                rows_by_rel[t] = dict(filled)
            elif c.kind is ConstraintKind.UNIQUE:
                t, a = c.args
                pos = positions(attrs, t, a)
                if pos is None:
                    resolvable = False
                    break
                kept: dict[tuple[Value, ...], int] = {}
                seen_keys: set[tuple[Value, ...]] = set()
                for row in sorted(rows_by_rel[t], key=_row_key):
                    key = _project(row, pos)
                    if key in seen_keys:
                        continue
                    seen_keys.add(key)
                    kept[row] = 1
                rows_by_rel[t] = kept
            elif c.kind is ConstraintKind.REF_ATTRS:
                t1, a1, t2, a2 = c.args
                p1 = positions(attrs, t1, a1)
                p2 = positions(attrs, t2, a2)
                if p1 is None or p2 is None:
                    resolvable = False
                    break
                targets = {_project(r, p2) for r in rows_by_rel[t2]}
                rows_by_rel[t1] = {
                    r: m
                    for r, m in rows_by_rel[t1].items()
                    if any(v is None for v in _project(r, p1))
                    or _project(r, p1) in targets
                }
        if not resolvable:
            continue
        for c in cons:
            if c.kind is ConstraintKind.REL_EQ:
                rows_by_rel[c.args[1]] = dict(rows_by_rel[c.args[0]])
        bags = {
            t: BagRelation(bound.relation_arity, rows)
            for t, rows in rows_by_rel.items()
        }
        db = Database(bags, attrs, pred_map)
        try:
            if not all(satisfies(db, c) for c in rule.constraints):
                continue
            arity = {t: bound.relation_arity for t in rels}
            compiler = _Compiler(attrs, pred_map, arity)
            if (
                compiler.compile(rule.src.root) is None
                or compiler.compile(rule.dest.root) is None
            ):
                continue
        except SemanticsError:
            continue
        produced += 1
        yield db


def agree_on(rule: RewriteRule, db: Database) -> bool:
    """Whether src and dest evaluate to the same bag on a concrete database."""
    return evaluate(rule.src, db) == evaluate(rule.dest, db)
