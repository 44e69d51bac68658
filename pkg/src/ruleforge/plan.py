"""Symbolic query-plan templates, their textual DSL, and rewrite rules.

A template is a rooted operator tree over symbolic relations (t0), attribute
lists (a0), predicates (p0) and fresh output names (s0).  The surface form
``Proj*`` denotes a distinct projection and expands to ``Dedup`` over
``Proj`` (two internal nodes, one surface token).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping, Optional


class OperatorKind(Enum):
    INPUT = "Input"
    PROJ = "Proj"
    FILTER = "Filter"
    INNER_JOIN = "IJoin"
    LEFT_JOIN = "LJoin"
    RIGHT_JOIN = "RJoin"
    IN_SUB = "InSub"
    DEDUP = "Dedup"


# child count per operator
ARITY = {
    OperatorKind.INPUT: 0,
    OperatorKind.PROJ: 1,
    OperatorKind.FILTER: 1,
    OperatorKind.DEDUP: 1,
    OperatorKind.INNER_JOIN: 2,
    OperatorKind.LEFT_JOIN: 2,
    OperatorKind.RIGHT_JOIN: 2,
    OperatorKind.IN_SUB: 2,
}

# (min params, max params, kind letter per slot); trailing optional slots
_PARAM_SPEC = {
    OperatorKind.INPUT: (1, 1, "t"),
    OperatorKind.PROJ: (1, 2, "as"),
    OperatorKind.FILTER: (2, 2, "pa"),
    OperatorKind.DEDUP: (0, 0, ""),
    OperatorKind.INNER_JOIN: (2, 2, "aa"),
    OperatorKind.LEFT_JOIN: (2, 2, "aa"),
    OperatorKind.RIGHT_JOIN: (2, 2, "aa"),
    OperatorKind.IN_SUB: (1, 2, "aa"),
}

SYMBOL_KINDS = ("t", "a", "p", "s")


class PlanError(ValueError):
    """Structurally invalid template or rule."""


class ParseError(PlanError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True, order=True)
class SymbolId:
    """A symbolic name: t/a/p/s plus a non-negative index."""

    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in SYMBOL_KINDS:
            raise PlanError(f"unknown symbol kind {self.kind!r}")
        if self.index < 0:
            raise PlanError("symbol index must be non-negative")

    def __str__(self) -> str:
        return f"{self.kind}{self.index}"


def sym(text: str) -> SymbolId:
    m = re.fullmatch(r"([taps])(\d+)", text)
    if not m:
        raise PlanError(f"bad symbol {text!r}")
    return SymbolId(m.group(1), int(m.group(2)))


@dataclass(frozen=True, order=True)
class Param:
    """A parameter slot: a symbol, optionally qualified as ``t0.a1``."""

    symbol: SymbolId
    qualifier: Optional[SymbolId] = None

    def __str__(self) -> str:
        if self.qualifier is not None:
            return f"{self.qualifier}.{self.symbol}"
        return str(self.symbol)


@dataclass(frozen=True)
class PlanNode:
    kind: OperatorKind
    params: tuple[Param, ...]
    children: tuple["PlanNode", ...] = ()

    def walk(self) -> Iterator["PlanNode"]:
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass(frozen=True)
class PlanTemplate:
    """A rooted operator tree; immutable and hashable."""

    root: PlanNode

    def __post_init__(self):
        validate_node(self.root)

    def nodes(self) -> list[PlanNode]:
        return list(self.root.walk())

    def node_count(self) -> int:
        return sum(1 for _ in self.root.walk())

    def surface_size(self) -> int:
        """Operator count excluding Input leaves, Dedup-over-Proj fused as one."""
        count = 0
        for node in self.root.walk():
            if node.kind is OperatorKind.INPUT:
                continue
            if (
                node.kind is OperatorKind.PROJ
                # fused into the Dedup above it
                and _parent_is_dedup(self.root, node)
            ):
                continue
            count += 1
        return count

    def symbols(self) -> list[SymbolId]:
        """All symbols in first-occurrence pre-order, qualifiers included."""
        seen: list[SymbolId] = []
        for node in self.root.walk():
            for p in node.params:
                if p.qualifier is not None and p.qualifier not in seen:
                    seen.append(p.qualifier)
                if p.symbol not in seen:
                    seen.append(p.symbol)
        return seen

    def symbols_of_kind(self, kind: str) -> list[SymbolId]:
        return [s for s in self.symbols() if s.kind == kind]

    def __str__(self) -> str:
        return serialize_template(self)


def _parent_is_dedup(root: PlanNode, target: PlanNode) -> bool:
    for node in root.walk():
        if node.kind is OperatorKind.DEDUP and node.children and node.children[0] is target:
            return True
    return False


def validate_node(node: PlanNode) -> None:
    if len(node.children) != ARITY[node.kind]:
        raise PlanError(
            f"{node.kind.value} takes {ARITY[node.kind]} children, got {len(node.children)}"
        )
    lo, hi, slots = _PARAM_SPEC[node.kind]
    if not (lo <= len(node.params) <= hi):
        raise PlanError(
            f"{node.kind.value} takes {lo}..{hi} params, got {len(node.params)}"
        )
    for i, p in enumerate(node.params):
        if p.symbol.kind != slots[i]:
            raise PlanError(
                f"{node.kind.value} param {i} must be a {slots[i]!r} symbol, got {p.symbol}"
            )
        if p.qualifier is not None and p.qualifier.kind != "t":
            raise PlanError("qualifier must be a relation symbol")
    for child in node.children:
        if node.kind is not OperatorKind.INPUT and child.kind is OperatorKind.INPUT and not child.children:
            pass
        validate_node(child)
    if node.kind is not OperatorKind.INPUT:
        for child in node.children:
            pass


def input_node(rel: SymbolId) -> PlanNode:
    return PlanNode(OperatorKind.INPUT, (Param(rel),))


def _static_schema(node: PlanNode) -> Optional[tuple[frozenset[SymbolId], bool]]:
    """(named attributes, may-have-unnamed-columns) for a node, or None.

    Treats distinct attribute symbols as distinct columns; Inputs contribute
    an open schema (any attribute may come from a base relation).
    """

    def visible(a: SymbolId, schema: tuple[frozenset[SymbolId], bool]) -> bool:
        named, open_ = schema
        return a in named or open_

    kind = node.kind
    if kind is OperatorKind.INPUT:
        return frozenset(), True
    child_schemas = []
    for c in node.children:
        s = _static_schema(c)
        if s is None:
            return None
        child_schemas.append(s)
    if kind is OperatorKind.PROJ:
        return frozenset({node.params[0].symbol}), False
    if kind is OperatorKind.FILTER:
        if not visible(node.params[1].symbol, child_schemas[0]):
            return None
        return child_schemas[0]
    if kind is OperatorKind.DEDUP:
        return child_schemas[0]
    if kind in (OperatorKind.INNER_JOIN, OperatorKind.LEFT_JOIN, OperatorKind.RIGHT_JOIN):
        if not visible(node.params[0].symbol, child_schemas[0]):
            return None
        if not visible(node.params[1].symbol, child_schemas[1]):
            return None
        return (
            child_schemas[0][0] | child_schemas[1][0],
            child_schemas[0][1] or child_schemas[1][1],
        )
    if kind is OperatorKind.IN_SUB:
        if not visible(node.params[0].symbol, child_schemas[0]):
            return None
        if len(node.params) == 2 and not visible(node.params[1].symbol, child_schemas[1]):
            return None
        return child_schemas[0]
    raise PlanError(f"unknown operator {kind}")


def schema_consistent(t: PlanTemplate) -> bool:
    """True iff every referenced attribute is visible where it is used,
    treating distinct attribute symbols as distinct columns."""
    return _static_schema(t.root) is not None


# ---------------------------------------------------------------------------
# DSL parsing / serialization
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(Proj\*|Proj|Filter|Dedup|IJoin|LJoin|RJoin|InSub"
    r"|[taps]\d+(?:\.a\d+)?"
    r"|[{}(),])"
)

_OP_TOKENS = {
    "Proj": OperatorKind.PROJ,
    "Filter": OperatorKind.FILTER,
    "Dedup": OperatorKind.DEDUP,
    "IJoin": OperatorKind.INNER_JOIN,
    "LJoin": OperatorKind.LEFT_JOIN,
    "RJoin": OperatorKind.RIGHT_JOIN,
    "InSub": OperatorKind.IN_SUB,
}


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self) -> Optional[str]:
        save = self.pos
        tok = self.next(optional=True)
        self.pos = save
        return tok

    def next(self, optional: bool = False) -> Optional[str]:
        m = _TOKEN_RE.match(self.text, self.pos)
        if not m:
            rest = self.text[self.pos :].strip()
            if rest:
                raise ParseError(f"unexpected input {rest[:12]!r}", self.pos)
            if optional:
                return None
            raise ParseError("unexpected end of input", len(self.text))
        self.pos = m.end()
        return m.group(1)

    def expect(self, tok: str) -> None:
        got = self.next()
        if got != tok:
            raise ParseError(f"expected {tok!r}, got {got!r}", self.pos)


def _parse_param(tok: str, offset: int) -> Param:
    if "." in tok:
        qual, attr = tok.split(".")
        return Param(sym(attr), sym(qual))
    return Param(sym(tok))


def _parse_params(toks: _Tokens) -> tuple[Param, ...]:
    if toks.peek() != "{":
        return ()
    toks.expect("{")
    params = []
    while True:
        tok = toks.next()
        if tok is None or tok in "{}(),":
            raise ParseError("expected a symbol", toks.pos)
        params.append(_parse_param(tok, toks.pos))
        tok = toks.next()
        if tok == "}":
            break
        if tok != ",":
            raise ParseError(f"expected ',' or '}}', got {tok!r}", toks.pos)
    return tuple(params)


def _parse_node(toks: _Tokens) -> PlanNode:
    tok = toks.next()
    if tok is None:
        raise ParseError("unexpected end of input", toks.pos)
    if re.fullmatch(r"t\d+", tok):
        return input_node(sym(tok))
    starred = tok == "Proj*"
    kind = OperatorKind.PROJ if starred else _OP_TOKENS.get(tok)
    if kind is None:
        raise ParseError(f"unknown operator {tok!r}", toks.pos)
    params = _parse_params(toks)
    toks.expect("(")
    children = [_parse_node(toks)]
    for _ in range(ARITY[kind] - 1):
        toks.expect(",")
        children.append(_parse_node(toks))
    toks.expect(")")
    node = PlanNode(kind, params, tuple(children))
    if starred:
        node = PlanNode(OperatorKind.DEDUP, (), (node,))
    return node


def parse_template(text: str) -> PlanTemplate:
    toks = _Tokens(text)
    root = _parse_node(toks)
    if toks.peek() is not None:
        raise ParseError(f"trailing input {toks.text[toks.pos:].strip()[:12]!r}", toks.pos)
    try:
        return PlanTemplate(root)
    except PlanError as exc:
        raise PlanError(f"invalid template {text!r}: {exc}") from exc


def _serialize_node(node: PlanNode) -> str:
    if node.kind is OperatorKind.INPUT:
        return str(node.params[0])
    name = node.kind.value
    params = node.params
    children = node.children
    if node.kind is OperatorKind.DEDUP and children[0].kind is OperatorKind.PROJ:
        name = "Proj*"
        params = children[0].params
        children = children[0].children
    inner = ",".join(_serialize_node(c) for c in children)
    plist = "{" + ",".join(str(p) for p in params) + "}" if params else ""
    return f"{name}{plist}({inner})"


def serialize_template(t: PlanTemplate) -> str:
    return _serialize_node(t.root)


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

class ConstraintKind(Enum):
    REL_EQ = "RelEq"
    ATTRS_EQ = "AttrsEq"
    PRED_EQ = "PredEq"
    SUB_ATTRS = "SubAttrs"
    REF_ATTRS = "RefAttrs"
    UNIQUE = "Unique"
    NOT_NULL = "NotNull"


# allowed symbol kinds per argument position; SubAttrs second arg may be a
# relation (qualified-symbol shorthand) or another attribute list
_CONSTRAINT_SIG = {
    ConstraintKind.REL_EQ: ("t", "t"),
    ConstraintKind.ATTRS_EQ: ("a", "a"),
    ConstraintKind.PRED_EQ: ("p", "p"),
    ConstraintKind.SUB_ATTRS: ("a", "at"),
    ConstraintKind.REF_ATTRS: ("t", "a", "t", "a"),
    ConstraintKind.UNIQUE: ("t", "a"),
    ConstraintKind.NOT_NULL: ("t", "a"),
}

_CONSTRAINT_ALIASES = {
    "Ref": ConstraintKind.REF_ATTRS,
    "Reference": ConstraintKind.REF_ATTRS,
}


@dataclass(frozen=True, order=True)
class Constraint:
    kind: ConstraintKind
    args: tuple[SymbolId, ...]

    def __post_init__(self):
        signature = _CONSTRAINT_SIG[self.kind]
        if len(self.args) != len(signature):
            raise PlanError(f"{self.kind.value} takes {len(signature)} args")
        for arg, allowed in zip(self.args, signature):
            if arg.kind not in allowed:
                raise PlanError(f"{self.kind.value} arg {arg} has wrong kind")

    def __str__(self) -> str:
        return f"{self.kind.value}({','.join(str(a) for a in self.args)})"


_CONSTRAINT_RE = re.compile(r"\s*(\w+)\(([^)]*)\)\s*")


def parse_constraint(text: str) -> Constraint:
    m = _CONSTRAINT_RE.fullmatch(text)
    if not m:
        raise PlanError(f"bad constraint {text!r}")
    name, argtext = m.group(1), m.group(2)
    kind = _CONSTRAINT_ALIASES.get(name)
    if kind is None:
        try:
            kind = ConstraintKind(name)
        except ValueError:
            raise PlanError(f"unknown constraint {name!r}") from None
    args = tuple(sym(a.strip()) for a in argtext.split(",") if a.strip())
    return Constraint(kind, args)


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeMapping:
    """Correspondence between source and destination rules.

    Symbols shared between the two templates correspond by name; node pairs
    are pre-order indices for rules built by cloning.
    """

    symbol_map: tuple[tuple[SymbolId, SymbolId], ...] = ()
    node_map: tuple[tuple[int, int], ...] = ()

    @staticmethod
    def identity(src: PlanTemplate, dest: PlanTemplate) -> "NodeMapping":
        shared = [s for s in src.symbols() if s in set(dest.symbols())]
        return NodeMapping(tuple((s, s) for s in shared))


@dataclass(frozen=True)
class RewriteRule:
    src: PlanTemplate
    dest: PlanTemplate
    mapping: NodeMapping = field(default=NodeMapping())
    constraints: frozenset[Constraint] = frozenset()

    def sorted_constraints(self) -> list[Constraint]:
        return sorted(self.constraints, key=str)

    def symbols(self) -> list[SymbolId]:
        seen = list(self.src.symbols())
        for s in self.dest.symbols():
            if s not in seen:
                seen.append(s)
        for c in self.sorted_constraints():
            for s in c.args:
                if s not in seen:
                    seen.append(s)
        return seen

    def validate(self, standardized_swap: bool = False) -> None:
        nsrc, ndest = self.src.node_count(), self.dest.node_count()
        if ndest > nsrc:
            raise PlanError("destination may not have more nodes than source")
        if ndest == nsrc and not standardized_swap:
            raise PlanError("equal node counts are only allowed for swap rules")
        src_syms = set(self.src.symbols())
        for s in self.dest.symbols():
            if s not in src_syms and s.kind != "s":
                raise PlanError(f"destination symbol {s} is not the image of a source symbol")

    def __str__(self) -> str:
        return rule_line(self)


def rule_line(rule: RewriteRule) -> str:
    cons = ";".join(str(c) for c in rule.sorted_constraints())
    return f"{serialize_template(rule.src)} | {serialize_template(rule.dest)} | {cons}"


def _implicit_subattrs(t: PlanTemplate) -> set[Constraint]:
    out = set()
    for node in t.root.walk():
        for p in node.params:
            if p.qualifier is not None:
                out.add(Constraint(ConstraintKind.SUB_ATTRS, (p.symbol, p.qualifier)))
    return out


def strip_qualifiers(t: PlanTemplate) -> PlanTemplate:
    def strip(node: PlanNode) -> PlanNode:
        return PlanNode(
            node.kind,
            tuple(Param(p.symbol) for p in node.params),
            tuple(strip(c) for c in node.children),
        )

    return PlanTemplate(strip(t.root))


def make_rule(
    src: PlanTemplate,
    dest: PlanTemplate,
    constraints=(),
    mapping: Optional[NodeMapping] = None,
) -> RewriteRule:
    """Build a rule; qualified symbols become SubAttrs constraints."""
    implied = _implicit_subattrs(src) | _implicit_subattrs(dest)
    src = strip_qualifiers(src)
    dest = strip_qualifiers(dest)
    if mapping is None:
        mapping = NodeMapping.identity(src, dest)
    return RewriteRule(src, dest, mapping, frozenset(constraints) | frozenset(implied))


def parse_rule_line(line: str) -> RewriteRule:
    parts = line.split("|")
    if len(parts) == 2:
        parts.append("")
    if len(parts) != 3:
        raise PlanError(f"rule line must have 2 or 3 '|'-separated fields: {line!r}")
    src = parse_template(parts[0].strip())
    dest = parse_template(parts[1].strip())
    cons = [parse_constraint(c) for c in parts[2].split(";") if c.strip()]
    return make_rule(src, dest, cons)


# ---------------------------------------------------------------------------
# Canonicalization and checksums
# ---------------------------------------------------------------------------

class _Renamer:
    def __init__(self):
        self.map: dict[SymbolId, SymbolId] = {}
        self.counters = {k: 0 for k in SYMBOL_KINDS}

    def get(self, s: SymbolId) -> SymbolId:
        if s not in self.map:
            self.map[s] = SymbolId(s.kind, self.counters[s.kind])
            self.counters[s.kind] += 1
        return self.map[s]


def _rename_node(node: PlanNode, renamer: _Renamer) -> PlanNode:
    params = tuple(
        Param(
            renamer.get(p.symbol),
            renamer.get(p.qualifier) if p.qualifier is not None else None,
        )
        for p in node.params
    )
    return PlanNode(node.kind, params, tuple(_rename_node(c, renamer) for c in node.children))


def _visit_symbols(node: PlanNode, renamer: _Renamer) -> None:
    for n in node.walk():
        for p in n.params:
            if p.qualifier is not None:
                renamer.get(p.qualifier)
            renamer.get(p.symbol)


def canonicalize_template(t: PlanTemplate) -> PlanTemplate:
    renamer = _Renamer()
    return PlanTemplate(_rename_node(t.root, renamer))


def canonicalize(rule: RewriteRule) -> RewriteRule:
    """Renumber symbols by first occurrence (src then dest) and sort constraints."""
    renamer = _Renamer()
    _visit_symbols(rule.src.root, renamer)
    _visit_symbols(rule.dest.root, renamer)
    for c in sorted(rule.constraints, key=str):
        for s in c.args:
            renamer.get(s)
    src = PlanTemplate(_rename_node(rule.src.root, renamer))
    dest = PlanTemplate(_rename_node(rule.dest.root, renamer))
    cons = frozenset(
        Constraint(c.kind, tuple(renamer.get(s) for s in c.args)) for c in rule.constraints
    )
    mapping = NodeMapping(
        tuple(
            sorted(
                ((renamer.get(a), renamer.get(b)) for a, b in rule.mapping.symbol_map
                 if a in renamer.map and b in renamer.map),
            )
        ),
        rule.mapping.node_map,
    )
    return RewriteRule(src, dest, mapping, cons)


def checksum(rule: RewriteRule) -> str:
    """128-bit digest of the canonical rule line; equal for alpha-equivalent rules."""
    line = rule_line(canonicalize(rule))
    return hashlib.blake2b(line.encode(), digest_size=16).hexdigest()


def template_checksum(t: PlanTemplate) -> str:
    line = serialize_template(canonicalize_template(t))
    return hashlib.blake2b(line.encode(), digest_size=16).hexdigest()
