"""Rule ranking: embeddings, features, boosted-tree ranker, and NDCG.

Templates are embedded with a fixed, seeded tree convolution (untrained
weights - reproducible structural fingerprints rather than learned ones) and
rendered into closed-form multiplicity expressions; nine features per rule
feed a LambdaMART-style gradient-boosted tree ensemble trained on binary
relevance labels.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .plan import (
    OperatorKind,
    PlanNode,
    PlanTemplate,
    RewriteRule,
    make_rule,
    rule_line,
)

FEATURE_NAMES = (
    "l2",
    "cosine",
    "expr_length",
    "sum_count",
    "times_count",
    "neg_count",
    "bracket_count",
    "var_count",
    "complexity",
)

_KIND_INDEX = {k: i for i, k in enumerate(OperatorKind)}
DEFAULT_SEED = 42


# ---------------------------------------------------------------------------
# Tree-convolution embedding
# ---------------------------------------------------------------------------

_EMBED_HIDDEN = 16
_EMBED_DIM = 9


def _kernel_bank(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((3 * len(_KIND_INDEX), _EMBED_HIDDEN)) / math.sqrt(
        3 * len(_KIND_INDEX)
    )
    w2 = rng.standard_normal((_EMBED_HIDDEN, _EMBED_DIM)) / math.sqrt(_EMBED_HIDDEN)
    return w1, w2


def embed_template(t: PlanTemplate, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Deterministic 9-dim embedding from a fixed seeded tree convolution.

    Each node is one-hot encoded over the operator kinds and concatenated
    with its (zero-padded) children's encodings; a seeded linear kernel bank
    with tanh nonlinearity maps each triple, max-pooling over nodes and a
    final seeded projection produce the embedding.
    """
    w1, w2 = _kernel_bank(seed)
    n_kinds = len(_KIND_INDEX)

    def one_hot(node: Optional[PlanNode]) -> np.ndarray:
        v = np.zeros(n_kinds)
        if node is not None:
            v[_KIND_INDEX[node.kind]] = 1.0
        return v

    rows = []
    for node in t.root.walk():
        left = node.children[0] if len(node.children) >= 1 else None
        right = node.children[1] if len(node.children) >= 2 else None
        rows.append(np.concatenate([one_hot(node), one_hot(left), one_hot(right)]))
    hidden = np.tanh(np.array(rows) @ w1)
    pooled = hidden.max(axis=0)
    return pooled @ w2


# ---------------------------------------------------------------------------
# Expression rendering
# ---------------------------------------------------------------------------

def render_expression(t: PlanTemplate) -> str:
    """Closed-form multiplicity expression for the template's root."""
    return _render(t.root, "t")


def _inner_join_expr(node: PlanNode, v: str) -> str:
    a_l, a_r = node.params[0].symbol, node.params[1].symbol
    vl, vr = v + "l", v + "r"
    left = _render(node.children[0], vl)
    right = _render(node.children[1], vr)
    return (
        f"sum_{{{vl},{vr}}}([[{v} = {vl}·{vr}]] × {left} × {right}"
        f" × [[{a_l}({vl}) = {a_r}({vr})]] × not([[IsNull({a_l}({vl}))]]))"
    )


def _outer_pad_expr(node: PlanNode, v: str, keep_left: bool) -> str:
    """The NULL-padding summand keeping unmatched tuples of one side."""
    a_l, a_r = node.params[0].symbol, node.params[1].symbol
    vl, vr = v + "l", v + "r"
    if keep_left:
        kept = _render(node.children[0], vl)
        probe = _render(node.children[1], vr + "'")
        return (
            f"sum_{{{vl},{vr}}}([[{v} = {vl}·{vr}]] × {kept} × [[IsNull({vr})]]"
            f" × not(sum_{{{vr}'}}({probe} × [[{a_l}({vl}) = {a_r}({vr}')]]"
            f" × not([[IsNull({a_l}({vl}))]]))))"
        )
    kept = _render(node.children[1], vr)
    probe = _render(node.children[0], vl + "'")
    return (
        f"sum_{{{vl},{vr}}}([[{v} = {vl}·{vr}]] × {kept} × [[IsNull({vl})]]"
        f" × not(sum_{{{vl}'}}({probe} × [[{a_l}({vl}') = {a_r}({vr})]]"
        f" × not([[IsNull({a_r}({vr}))]]))))"
    )


def _render(node: PlanNode, v: str) -> str:
    kind = node.kind
    if kind is OperatorKind.INPUT:
        return f"r{node.params[0].symbol.index}({v})"
    if kind is OperatorKind.PROJ:
        a = node.params[0].symbol
        vl = v + "l"
        child = _render(node.children[0], vl)
        return f"sum_{{{vl}}}({child} × [[{v} = {a}({vl})]])"
    if kind is OperatorKind.FILTER:
        p, a = node.params[0].symbol, node.params[1].symbol
        child = _render(node.children[0], v)
        return f"{child} × [[{p}({a}({v}))]]"
    if kind is OperatorKind.DEDUP:
        return f"||{_render(node.children[0], v)}||"
    if kind is OperatorKind.IN_SUB:
        a = node.params[0].symbol
        member = node.params[1].symbol if len(node.params) == 2 else a
        left = _render(node.children[0], v)
        right = _render(node.children[1], f"{member}→{a}({v})")
        return f"{left} × ||{right}|| × not([[IsNull({a}({v}))]])"
    if kind is OperatorKind.INNER_JOIN:
        return _inner_join_expr(node, v)
    if kind is OperatorKind.LEFT_JOIN:
        return f"({_inner_join_expr(node, v)} + {_outer_pad_expr(node, v, True)})"
    if kind is OperatorKind.RIGHT_JOIN:
        return f"({_inner_join_expr(node, v)} + {_outer_pad_expr(node, v, False)})"
    raise ValueError(f"cannot render {kind}")


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

_VAR_TOKEN = re.compile(r"\b(?:[rap]\d+|t[lr']*)\b")


def _expression_counts(expr: str) -> dict[str, float]:
    return {
        "expr_length": float(len(expr)),
        "sum_count": float(expr.count("sum_")),
        "times_count": float(expr.count("×")),
        "neg_count": float(expr.count("not(")),
        "bracket_count": float(expr.count("[[")),
        "var_count": float(
            max(len(set(_VAR_TOKEN.findall(expr))), expr.count("IsNull"))
        ),
    }


def extract_features(rule: RewriteRule, seed: int = DEFAULT_SEED) -> np.ndarray:
    """The 9 ranking features, ordered as FEATURE_NAMES."""
    e_src = embed_template(rule.src, seed)
    e_dest = embed_template(rule.dest, seed)
    l2 = float(np.linalg.norm(e_src - e_dest))
    denom = float(np.linalg.norm(e_src) * np.linalg.norm(e_dest))
    cosine = float(e_src @ e_dest / denom) if denom > 0 else 0.0
    src_counts = _expression_counts(render_expression(rule.src))
    dest_counts = _expression_counts(render_expression(rule.dest))
    mean = {k: (src_counts[k] + dest_counts[k]) / 2.0 for k in src_counts}
    complexity = (
        mean["sum_count"] + mean["times_count"] + mean["neg_count"] + mean["bracket_count"]
    )
    return np.array(
        [
            l2,
            cosine,
            mean["expr_length"],
            mean["sum_count"],
            mean["times_count"],
            mean["neg_count"],
            mean["bracket_count"],
            mean["var_count"],
            complexity,
        ]
    )


# ---------------------------------------------------------------------------
# NDCG
# ---------------------------------------------------------------------------

class Ndcg(float):
    """NDCG value; ``degenerate`` is set when the ideal DCG is zero."""

    degenerate: bool

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


def _dcg(labels: Sequence[int], k: int) -> float:
    return sum(
        (2**rel - 1) / math.log2(i + 2) for i, rel in enumerate(labels[:k])
    )


def ndcg_at_k(labels: Sequence[int], k: int) -> Ndcg:
    """DCG of the given order over the ideal DCG; 0 (degenerate) if no
    positive label exists."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ideal = _dcg(sorted(labels, reverse=True), k)
    if ideal == 0:
        return Ndcg(0.0, degenerate=True)
    return Ndcg(_dcg(labels, k) / ideal)


# ---------------------------------------------------------------------------
# Gradient-boosted trees with lambdarank gradients
# ---------------------------------------------------------------------------

@dataclass
class LabeledExample:
    features: np.ndarray
    relevance: int
    group: int = 0


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0
    is_leaf: bool = True


@dataclass
class RegressionTree:
    nodes: list[_TreeNode] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(len(x))
        for i, row in enumerate(x):
            j = 0
            while not self.nodes[j].is_leaf:
                n = self.nodes[j]
                j = n.left if row[n.feature] <= n.threshold else n.right
            out[i] = self.nodes[j].value
        return out


@dataclass
class TrainParams:
    learning_rate: float = 0.1
    num_leaves: int = 62
    min_samples_leaf: int = 20
    iterations: int = 100
    ndcg_k: int = 10


@dataclass
class GBDTModel:
    trees: list[RegressionTree]
    learning_rate: float
    params: dict
    degenerate: bool = False
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def score(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features)
        total = np.zeros(len(x))
        for tree in self.trees:
            total += self.learning_rate * tree.predict(x)
        return total

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "ruleforge-gbdt",
                "version": 1,
                "learning_rate": self.learning_rate,
                "params": self.params,
                "degenerate": self.degenerate,
                "feature_names": list(self.feature_names),
                "trees": [
                    [
                        {
                            "feature": n.feature,
                            "threshold": n.threshold,
                            "left": n.left,
                            "right": n.right,
                            "value": n.value,
                            "is_leaf": n.is_leaf,
                        }
                        for n in t.nodes
                    ]
                    for t in self.trees
                ],
            },
            indent=1,
        )

    @staticmethod
    def from_json(text: str) -> "GBDTModel":
        data = json.loads(text)
        if data.get("format") != "ruleforge-gbdt":
            raise ValueError("not a ruleforge model file")
        trees = [
            RegressionTree([_TreeNode(**n) for n in tnodes]) for tnodes in data["trees"]
        ]
        return GBDTModel(
            trees,
            data["learning_rate"],
            data["params"],
            data.get("degenerate", False),
            tuple(data.get("feature_names", FEATURE_NAMES)),
        )


def _fit_tree(
    x: np.ndarray,
    grad: np.ndarray,
    hess: np.ndarray,
    num_leaves: int,
    min_samples_leaf: int,
) -> RegressionTree:
    """Leaf-wise exact greedy tree on (gradient, hessian) targets."""
    eps = 1e-9
    tree = RegressionTree()

    def leaf_value(idx: np.ndarray) -> float:
        return float(grad[idx].sum() / (hess[idx].sum() + eps))

    def best_split(idx: np.ndarray):
        g, h = grad[idx], hess[idx]
        total = (g.sum() ** 2) / (h.sum() + eps)
        best = None
        lo, hi = min_samples_leaf - 1, len(idx) - min_samples_leaf
        if hi <= lo:
            return None
        for f in range(x.shape[1]):
            vals = x[idx, f]
            order = np.argsort(vals, kind="stable")
            sv, sg, sh = vals[order], g[order], h[order]
            cg, ch = np.cumsum(sg), np.cumsum(sh)
            cuts = np.arange(lo, hi)
            valid = sv[cuts] != sv[cuts + 1]
            if not valid.any():
                continue
            cuts = cuts[valid]
            gains = (
                cg[cuts] ** 2 / (ch[cuts] + eps)
                + (cg[-1] - cg[cuts]) ** 2 / (ch[-1] - ch[cuts] + eps)
                - total
            )
            j = int(np.argmax(gains))
            if best is None or gains[j] > best[0] + 1e-12:
                thr = (sv[cuts[j]] + sv[cuts[j] + 1]) / 2.0
                best = (float(gains[j]), f, float(thr))
        return best

    tree.nodes.append(_TreeNode(value=leaf_value(np.arange(len(x)))))
    open_leaves = [(0, np.arange(len(x)))]
    while len(open_leaves) < num_leaves:
        candidates = []
        for slot, (node_id, idx) in enumerate(open_leaves):
            if len(idx) < 2 * min_samples_leaf:
                continue
            split = best_split(idx)
            if split is not None and split[0] > 1e-12:
                candidates.append((split[0], slot, split[1], split[2]))
        if not candidates:
            break
        _, slot, f, thr = max(candidates, key=lambda c: (c[0], -c[1]))
        node_id, idx = open_leaves.pop(slot)
        mask = x[idx, f] <= thr
        left_idx, right_idx = idx[mask], idx[~mask]
        left_id, right_id = len(tree.nodes), len(tree.nodes) + 1
        tree.nodes.append(_TreeNode(value=leaf_value(left_idx)))
        tree.nodes.append(_TreeNode(value=leaf_value(right_idx)))
        n = tree.nodes[node_id]
        n.feature, n.threshold, n.left, n.right, n.is_leaf = f, thr, left_id, right_id, False
        open_leaves.append((left_id, left_idx))
        open_leaves.append((right_id, right_idx))
    return tree


def _lambda_gradients(
    scores: np.ndarray, labels: np.ndarray, groups: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    grad = np.zeros(len(scores))
    hess = np.zeros(len(scores))
    for gid in np.unique(groups):
        idx = np.flatnonzero(groups == gid)
        if len(idx) < 2:
            continue
        order = idx[np.lexsort((idx, -scores[idx]))]
        ranks = np.empty(len(idx), dtype=int)
        pos_of = {int(item): p for p, item in enumerate(idx)}
        for pos, item in enumerate(order):
            ranks[pos_of[int(item)]] = pos
        lab = labels[idx]
        ideal = _dcg(sorted(lab.astype(int), reverse=True), k)
        if ideal == 0:
            continue
        gains = 2.0**lab - 1.0
        disc = np.where(ranks < k, 1.0 / np.log2(ranks + 2.0), 0.0)
        # swapping i and j changes DCG by (gain_i - gain_j)(disc_i - disc_j)
        delta = np.abs(
            np.subtract.outer(gains, gains) * np.subtract.outer(disc, disc)
        ) / ideal
        s = scores[idx]
        rho = 1.0 / (1.0 + np.exp(np.clip(np.subtract.outer(s, s), -50.0, 50.0)))
        better = np.greater.outer(lab, lab)
        lam = np.where(better, rho * delta, 0.0)
        w = np.where(better, rho * (1.0 - rho) * delta, 0.0)
        grad[idx] += lam.sum(axis=1) - lam.sum(axis=0)
        hess[idx] += w.sum(axis=1) + w.sum(axis=0)
    return grad, hess


def train_lambdamart(
    data: Sequence[LabeledExample], params: Optional[TrainParams] = None
) -> GBDTModel:
    """Boosted regression trees fit to lambdarank pairwise gradients."""
    params = params or TrainParams()
    x = np.array([ex.features for ex in data], dtype=float)
    labels = np.array([ex.relevance for ex in data], dtype=float)
    groups = np.array([ex.group for ex in data], dtype=int)
    meta = {
        "learning_rate": params.learning_rate,
        "num_leaves": params.num_leaves,
        "min_samples_leaf": params.min_samples_leaf,
        "iterations": params.iterations,
        "ndcg_k": params.ndcg_k,
    }
    if len(data) < 2 or labels.min() == labels.max():
        return GBDTModel([], params.learning_rate, meta, degenerate=True)
    scores = np.zeros(len(x))
    trees: list[RegressionTree] = []
    for _ in range(params.iterations):
        grad, hess = _lambda_gradients(scores, labels, groups, params.ndcg_k)
        if not np.any(grad):
            break
        tree = _fit_tree(x, grad, hess, params.num_leaves, params.min_samples_leaf)
        trees.append(tree)
        scores += params.learning_rate * tree.predict(x)
    return GBDTModel(trees, params.learning_rate, meta)


# ---------------------------------------------------------------------------
# Scoring and pair pre-filtering
# ---------------------------------------------------------------------------

def score_rules(
    rules: Iterable[RewriteRule], model: GBDTModel, seed: int = DEFAULT_SEED
) -> list[tuple[RewriteRule, float]]:
    """Rules with model scores, descending; ties broken canonically."""
    rules = list(rules)
    if not rules:
        return []
    feats = np.array([extract_features(r, seed) for r in rules])
    scores = model.score(feats)
    paired = list(zip(rules, scores))
    paired.sort(key=lambda p: (-p[1], rule_line(p[0])))
    return [(r, float(s)) for r, s in paired]


def rank_template_pairs(
    pairs: Sequence[tuple[PlanTemplate, PlanTemplate]],
    model: GBDTModel,
    k: int,
    seed: int = DEFAULT_SEED,
) -> list[tuple[PlanTemplate, PlanTemplate]]:
    """Top-k template pairs by model score of the constraint-free proxy rule."""
    if k <= 0:
        return []
    proxies = [make_rule(src, dest) for src, dest in pairs]
    if not proxies:
        return []
    feats = np.array([extract_features(r, seed) for r in proxies])
    scores = model.score(feats)
    order = sorted(
        range(len(pairs)), key=lambda i: (-scores[i], rule_line(proxies[i]))
    )
    return [pairs[i] for i in order[:k]]
