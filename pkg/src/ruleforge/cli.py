"""Command-line surface tying the pipeline together.

Subcommands: enumerate, verify, dedup, train, rank, rewrite, compose-study,
selfcheck.  A JSON config file supplies defaults; flags override individual
keys.  Reports are JSON-lines on stdout or at --report.

Exit codes: 0 success, 1 usage/config error, 2 verification refutation in
strict mode, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .dedup import RtpBase, pair_key, partition_dedup, rtp_check
from .enumerator import composability_study, enumerate_rules
from .plan import (
    ConstraintKind,
    PlanError,
    RewriteRule,
    checksum,
    make_rule,
    parse_template,
    rule_line,
    serialize_template,
)
from .ranker import (
    GBDTModel,
    LabeledExample,
    TrainParams,
    extract_features,
    ndcg_at_k,
    rank_template_pairs,
    score_rules,
    train_lambdamart,
)
from .repo import RepositoryError, RuleRepository, load_rules
from .rewriter import SchemaAnnotations, rewrite_fixpoint
from .semantics import (
    SemanticsError,
    VerifierBound,
    check_equivalence,
    check_minimality,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REFUTED = 2
EXIT_INTERNAL = 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    max_nodes: int = 2
    size_metric: str = "nodes"
    max_rows: int = 2
    domain_size: int = 2
    max_relations: int = 3
    relation_arity: int = 2
    max_constraints: int = 1
    partition_size: int = 16
    seed: int = 42
    learning_rate: float = 0.1
    num_leaves: int = 62
    min_samples_leaf: int = 20
    iterations: int = 100
    ndcg_k: int = 10
    top_k: Optional[int] = None
    workers: int = 1
    standardize: bool = True
    rtp: bool = False
    strict: bool = False

    def bound(self) -> VerifierBound:
        return VerifierBound(
            max_rows=self.max_rows,
            domain_size=self.domain_size,
            max_relations=self.max_relations,
            relation_arity=self.relation_arity,
        )

    def train_params(self) -> TrainParams:
        return TrainParams(
            learning_rate=self.learning_rate,
            num_leaves=self.num_leaves,
            min_samples_leaf=self.min_samples_leaf,
            iterations=self.iterations,
            ndcg_k=self.ndcg_k,
        )

    def validate(self) -> None:
        positive = (
            self.max_nodes, self.max_rows, self.domain_size, self.max_relations,
            self.relation_arity, self.partition_size, self.num_leaves,
            self.min_samples_leaf, self.iterations, self.ndcg_k, self.workers,
        )
        if any(v < 1 for v in positive):
            raise UsageError("all size/bound parameters must be positive")
        if self.size_metric not in ("nodes", "surface"):
            raise UsageError("size_metric must be 'nodes' or 'surface'")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.top_k is not None and self.top_k < 0:
            raise UsageError("top_k must be >= 0")

    @classmethod
    def from_sources(cls, config_path: Optional[str], overrides: dict) -> "RunConfig":
        data: dict = {}
        if config_path:
            try:
                data = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config: {exc}") from exc
            unknown = set(data) - set(cls.__dataclass_fields__)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.validate()
        return cfg


class Report:
    """JSON-lines sink: stdout by default, or a file."""

    def __init__(self, path: Optional[str]):
        self._fh = open(path, "w", encoding="utf-8") if path else sys.stdout

    def emit(self, **payload) -> None:
        self._fh.write(json.dumps(payload, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not sys.stdout:
            self._fh.close()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_enumerate(cfg: RunConfig, out_path: str, model_path: Optional[str], report: Report) -> int:
    pair_scorer = None
    if model_path:
        model = GBDTModel.from_json(Path(model_path).read_text(encoding="utf-8"))

        def pair_scorer(src, dest):
            return float(model.score(extract_features(make_rule(src, dest), cfg.seed))[0])

    if cfg.top_k == 0 and pair_scorer is not None:
        report.emit(event="warning", message="top_k=0 keeps no pairs; repository is empty")
        RuleRepository().save(out_path)
        report.emit(event="stats", rules_emitted=0)
        return EXIT_OK

    bases: dict[str, RtpBase] = {}
    statuses: dict[str, str] = {}
    cache: dict[str, bool] = {}

    def rtp_filter(rule: RewriteRule) -> bool:
        key = pair_key(rule)
        base = bases.setdefault(key, RtpBase(key))
        status = rtp_check(rule, base, cfg.bound(), cache)
        statuses[checksum(rule)] = status
        return status == "EQ"

    rules, stats = enumerate_rules(
        cfg.max_nodes,
        size_metric=cfg.size_metric,
        bound=cfg.bound(),
        use_standardization=cfg.standardize,
        max_constraints=cfg.max_constraints,
        pair_scorer=pair_scorer,
        top_k=cfg.top_k if pair_scorer is not None else None,
        rtp_filter=rtp_filter if cfg.rtp else None,
    )
    repo = RuleRepository()
    for rule in rules:
        repo.add(
            rule,
            {
                "stage": "enumerate",
                "bound": cfg.bound().__dict__,
                "rtp_status": statuses.get(checksum(rule), "unchecked"),
            },
        )
    repo.save(out_path)
    report.emit(event="stats", **stats.as_dict())
    return EXIT_OK


def cmd_verify(cfg: RunConfig, rule_path: str, minimality: bool, report: Report) -> int:
    rules = load_rules(rule_path)
    refuted = False
    for rule in rules:
        line = rule_line(rule)
        try:
            verdict = check_equivalence(rule, cfg.bound())
        except SemanticsError as exc:
            report.emit(event="verdict", rule=line, status="error", error=str(exc))
            refuted = True
            continue
        payload = {
            "rule": line,
            "status": verdict.status,
            "models_checked": verdict.models_checked,
        }
        if not verdict.equivalent:
            refuted = True
            payload["counterexample"] = verdict.counterexample.render()
        elif minimality and rule.constraints:
            # attribute-membership facts are structural, not extra conditions
            candidates = [
                c for c in rule.sorted_constraints()
                if c.kind is not ConstraintKind.SUB_ATTRS
            ]
            if candidates:
                payload["minimal"] = check_minimality(
                    rule, cfg.bound(), constraints=candidates
                )
        report.emit(event="verdict", **payload)
    report.emit(event="summary", rules=len(rules), refuted=refuted)
    return EXIT_REFUTED if (refuted and cfg.strict) else EXIT_OK


def cmd_dedup(cfg: RunConfig, rule_path: str, out_path: str, report: Report) -> int:
    repo = RuleRepository.load(rule_path)
    result = partition_dedup(repo.rules(), cfg.partition_size, cfg.bound())
    out = RuleRepository()
    for rule in result.kept:
        prov = dict(repo.records.get(checksum(rule), None).provenance if checksum(rule) in repo.records else {})
        prov["stage"] = "dedup-kept"
        out.add(rule, prov)
    out.save(out_path)
    survivors = [rule_line(r) for r in result.kept]
    for rule, stage in result.removed:
        report.emit(
            event="removed", rule=rule_line(rule), stage=stage, survivors=survivors
        )
    report.emit(event="summary", kept=len(result.kept), removed=len(result.removed))
    return EXIT_OK


def _load_dataset(path: str) -> list[LabeledExample]:
    examples = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            rule = _parse_rule(entry["rule"])
            examples.append(
                LabeledExample(
                    extract_features(rule),
                    int(entry["relevance"]),
                    int(entry.get("group", 0)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{path}:{n}: {exc}") from exc
    return examples


def _parse_rule(text: str) -> RewriteRule:
    from .plan import parse_rule_line

    return parse_rule_line(text)


def cmd_train(cfg: RunConfig, data_path: str, model_path: str, report: Report) -> int:
    data = _load_dataset(data_path)
    model = train_lambdamart(data, cfg.train_params())
    Path(model_path).write_text(model.to_json(), encoding="utf-8")
    import numpy as np

    labels = np.array([ex.relevance for ex in data])
    if len(data):
        scores = model.score(np.array([ex.features for ex in data]))
        order = np.lexsort((np.arange(len(data)), -scores))
        ndcg = ndcg_at_k(list(labels[order]), cfg.ndcg_k)
    else:
        ndcg = ndcg_at_k([0], cfg.ndcg_k)
    report.emit(
        event="trained",
        examples=len(data),
        trees=len(model.trees),
        degenerate=model.degenerate or ndcg.degenerate,
        train_ndcg=float(ndcg),
        ndcg_k=cfg.ndcg_k,
    )
    return EXIT_OK


def cmd_rank(cfg: RunConfig, rule_path: str, model_path: str, top: Optional[int], report: Report) -> int:
    model = GBDTModel.from_json(Path(model_path).read_text(encoding="utf-8"))
    scored = score_rules(load_rules(rule_path), model, cfg.seed)
    if top is not None:
        scored = scored[:top]
    for rank, (rule, score) in enumerate(scored, 1):
        report.emit(event="ranked", rank=rank, score=score, rule=rule_line(rule))
    return EXIT_OK


def cmd_rewrite(
    cfg: RunConfig, plan_path: str, rule_path: str, schema_path: Optional[str], report: Report
) -> int:
    text = Path(plan_path).read_text(encoding="utf-8")
    lines = [l for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")]
    if not lines:
        raise UsageError("plan file is empty")
    plan = parse_template(lines[0])
    rules = load_rules(rule_path)
    schema = None
    if schema_path:
        schema = SchemaAnnotations.parse(Path(schema_path).read_text(encoding="utf-8"))
    result = rewrite_fixpoint(plan, rules, schema)
    for p in result.plans:
        report.emit(event="minimal_plan", plan=serialize_template(p), nodes=p.node_count())
    for key, (parent, rule) in sorted(result.derivations.items()):
        report.emit(event="derivation", plan=key, parent=parent, rule=rule)
    report.emit(
        event="summary",
        input_nodes=plan.node_count(),
        minimal_nodes=result.plans[0].node_count(),
        visited=result.visited,
        steps=result.steps,
        budget_hit=result.budget_hit,
    )
    return EXIT_OK


def cmd_compose_study(
    direct_path: str, first_path: str, second_path: str, report: Report
) -> int:
    fraction, details = composability_study(
        load_rules(direct_path), load_rules(first_path), load_rules(second_path)
    )
    report.emit(event="composability", fraction=fraction, **details)
    return EXIT_OK


def cmd_selfcheck(cfg: RunConfig, rule_path: str, report: Report) -> int:
    repo = RuleRepository.load(rule_path)
    failures = repo.self_check(cfg.bound())
    for key, status in failures:
        report.emit(event="selfcheck_failure", checksum=key, status=status)
    report.emit(event="summary", rules=len(repo), failures=len(failures))
    return EXIT_REFUTED if (failures and cfg.strict) else EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_CONFIG_FLAGS: dict[str, type] = {
    "max_nodes": int,
    "size_metric": str,
    "max_rows": int,
    "domain_size": int,
    "max_relations": int,
    "relation_arity": int,
    "max_constraints": int,
    "partition_size": int,
    "seed": int,
    "learning_rate": float,
    "num_leaves": int,
    "min_samples_leaf": int,
    "iterations": int,
    "ndcg_k": int,
    "top_k": int,
    "workers": int,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--report", help="write the JSON-lines report here instead of stdout")
    p.add_argument("--strict", action="store_true", default=None,
                   help="exit 2 on any verification refutation")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ruleforge", description="Query-rewrite-rule discovery toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="discover rules and persist a repository")
    _add_common(p)
    p.add_argument("--out", required=True, help="output rule file")
    p.add_argument("--model", help="ranker model for top-k pair filtering")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--rtp", action="store_true", help="online redundancy filtering")

    p = sub.add_parser("verify", help="verify every rule in a file")
    _add_common(p)
    p.add_argument("rules")
    p.add_argument("--minimality", action="store_true")

    p = sub.add_parser("dedup", help="remove redundant rules from a file")
    _add_common(p)
    p.add_argument("rules")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the ranking model")
    _add_common(p)
    p.add_argument("data", help="JSON-lines: {rule, relevance, group?}")
    p.add_argument("--out", required=True, help="model file")

    p = sub.add_parser("rank", help="score rules with a trained model")
    _add_common(p)
    p.add_argument("rules")
    p.add_argument("--model", required=True)
    p.add_argument("--top", type=int)

    p = sub.add_parser("rewrite", help="rewrite a plan to fixpoint")
    _add_common(p)
    p.add_argument("plan", help="file whose first line is the plan DSL")
    p.add_argument("--rules", required=True)
    p.add_argument("--schema", help="schema facts file (unique/notnull/ref lines)")

    p = sub.add_parser("compose-study", help="two-stage composability fraction")
    _add_common(p)
    p.add_argument("direct")
    p.add_argument("first")
    p.add_argument("second")

    p = sub.add_parser("selfcheck", help="re-verify a persisted repository")
    _add_common(p)
    p.add_argument("rules")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    report = None
    try:
        overrides = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
        overrides["strict"] = getattr(args, "strict", None)
        if getattr(args, "no_standardize", False):
            overrides["standardize"] = False
        if getattr(args, "rtp", False):
            overrides["rtp"] = True
        cfg = RunConfig.from_sources(getattr(args, "config", None), overrides)
        report = Report(getattr(args, "report", None))
        if args.command == "enumerate":
            return cmd_enumerate(cfg, args.out, args.model, report)
        if args.command == "verify":
            return cmd_verify(cfg, args.rules, args.minimality, report)
        if args.command == "dedup":
            return cmd_dedup(cfg, args.rules, args.out, report)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.out, report)
        if args.command == "rank":
            return cmd_rank(cfg, args.rules, args.model, args.top, report)
        if args.command == "rewrite":
            return cmd_rewrite(cfg, args.plan, args.rules, args.schema, report)
        if args.command == "compose-study":
            return cmd_compose_study(args.direct, args.first, args.second, report)
        if args.command == "selfcheck":
            return cmd_selfcheck(cfg, args.rules, report)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, RepositoryError, PlanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # invariant violation
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        if report is not None:
            report.close()


if __name__ == "__main__":
    sys.exit(main())
