"""Rule repository: canonical rule file plus a JSONL provenance sidecar.

The rule file holds one canonical rule line per rule, sorted, and the
sidecar holds one JSON object per rule keyed by checksum with pipeline
provenance (stage, verification model count, redundancy-check status, rank
score when scored).  Plain text keeps the repository diffable and greppable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .plan import RewriteRule, checksum, parse_rule_line, rule_line
from .semantics import SemanticsError, VerifierBound, check_equivalence


class RepositoryError(ValueError):
    pass


@dataclass
class RuleRecord:
    rule: RewriteRule
    provenance: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return checksum(self.rule)


@dataclass
class RuleRepository:
    records: dict[str, RuleRecord] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def add(self, rule: RewriteRule, provenance: Optional[dict] = None) -> bool:
        """Insert a rule; returns False when its checksum is already stored."""
        rec = RuleRecord(rule, dict(provenance or {}))
        if rec.key in self.records:
            return False
        self.records[rec.key] = rec
        return True

    def add_all(self, rules: Iterable[RewriteRule], provenance: Optional[dict] = None) -> int:
        return sum(1 for r in rules if self.add(r, provenance))

    def rules(self) -> list[RewriteRule]:
        return sorted((rec.rule for rec in self.records.values()), key=rule_line)

    def __contains__(self, key: str) -> bool:
        return key in self.records

    # -- persistence --------------------------------------------------------

    def save(self, rule_path: str | Path) -> Path:
        """Write the rule file and its ``.provenance.jsonl`` sidecar.

        Output is fully determined by content: rules sorted by canonical
        line, sidecar in the same order with sorted keys.
        """
        rule_path = Path(rule_path)
        ordered = sorted(self.records.values(), key=lambda rec: rule_line(rec.rule))
        rule_path.write_text(
            "".join(rule_line(rec.rule) + "\n" for rec in ordered), encoding="utf-8"
        )
        sidecar = self.sidecar_path(rule_path)
        with sidecar.open("w", encoding="utf-8") as fh:
            for rec in ordered:
                fh.write(
                    json.dumps(
                        {"checksum": rec.key, "rule": rule_line(rec.rule), **rec.provenance},
                        sort_keys=True,
                    )
                    + "\n"
                )
        return rule_path

    @staticmethod
    def sidecar_path(rule_path: str | Path) -> Path:
        rule_path = Path(rule_path)
        return rule_path.with_name(rule_path.name + ".provenance.jsonl")

    @classmethod
    def load(cls, rule_path: str | Path) -> "RuleRepository":
        rule_path = Path(rule_path)
        repo = cls()
        provenance: dict[str, dict] = {}
        sidecar = cls.sidecar_path(rule_path)
        if sidecar.exists():
            for line in sidecar.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                key = entry.pop("checksum", None)
                entry.pop("rule", None)
                if key:
                    provenance[key] = entry
        for n, line in enumerate(rule_path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                rule = parse_rule_line(line)
            except ValueError as exc:
                raise RepositoryError(f"{rule_path}:{n}: {exc}") from exc
            key = checksum(rule)
            if key in repo.records:
                raise RepositoryError(f"{rule_path}:{n}: duplicate checksum {key}")
            repo.records[key] = RuleRecord(rule, provenance.get(key, {}))
        return repo

    # -- integrity ----------------------------------------------------------

    def self_check(self, bound: VerifierBound = VerifierBound()) -> list[tuple[str, str]]:
        """Re-verify every stored rule; returns (checksum, status) failures."""
        failures: list[tuple[str, str]] = []
        for key, rec in sorted(self.records.items()):
            try:
                verdict = check_equivalence(rec.rule, bound)
            except SemanticsError as exc:
                failures.append((key, f"error: {exc}"))
                continue
            if not verdict.equivalent:
                failures.append((key, verdict.status))
        return failures


def load_rules(rule_path: str | Path) -> list[RewriteRule]:
    """Just the rules from a rule file, in canonical order."""
    return RuleRepository.load(rule_path).rules()
