"""Rule repository persistence and the command-line interface."""

import json

import pytest

from ruleforge.cli import main
from ruleforge.plan import checksum, parse_rule_line
from ruleforge.repo import RepositoryError, RuleRepository, load_rules

RULES = [
    "Dedup(t0) | t0 | Unique(t0,a0)",
    "Dedup(Dedup(t0)) | Dedup(t0)",
]


def _events(path):
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


class TestRepository:
    def test_save_load_roundtrip_is_byte_identical(self, tmp_path):
        repo = RuleRepository()
        repo.add_all((parse_rule_line(r) for r in RULES), {"stage": "test"})
        path = tmp_path / "rules.txt"
        repo.save(path)
        first = path.read_bytes()
        side_first = repo.sidecar_path(path).read_bytes()
        again = RuleRepository.load(path)
        again.save(path)
        assert path.read_bytes() == first
        assert repo.sidecar_path(path).read_bytes() == side_first
        assert {checksum(r) for r in again.rules()} == {
            checksum(parse_rule_line(r)) for r in RULES
        }

    def test_sidecar_carries_provenance(self, tmp_path):
        repo = RuleRepository()
        repo.add(parse_rule_line(RULES[0]), {"stage": "enumerate", "rtp_status": "EQ"})
        path = tmp_path / "rules.txt"
        repo.save(path)
        entries = _events(repo.sidecar_path(path))
        assert entries[0]["stage"] == "enumerate"
        assert entries[0]["checksum"] == checksum(parse_rule_line(RULES[0]))

    def test_duplicate_checksum_rejected_on_load(self, tmp_path):
        path = tmp_path / "rules.txt"
        path.write_text(
            "Dedup(t0) | t0 | Unique(t0,a0)\nDedup(t9) | t9 | Unique(t9,a3)\n"
        )
        with pytest.raises(RepositoryError) as err:
            RuleRepository.load(path)
        assert "2" in str(err.value)  # offending line number

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "rules.txt"
        path.write_text("# header\n\nDedup(Dedup(t0)) | Dedup(t0)\n")
        assert len(load_rules(path)) == 1

    def test_self_check_reports_refuted_rules(self, tmp_path):
        repo = RuleRepository()
        repo.add(parse_rule_line("Dedup(t0) | t0"), {})
        failures = repo.self_check()
        assert len(failures) == 1
        assert failures[0][1] == "NotEquivalent"


@pytest.fixture()
def rule_file(tmp_path):
    path = tmp_path / "rules.txt"
    path.write_text("\n".join(RULES) + "\n")
    return path


class TestCli:
    def test_usage_error_exit_code(self, capsys):
        assert main(["verify", "/nonexistent/rules.txt"]) == 1
        assert main(["bogus-command"]) == 1

    def test_verify_reports_verdicts(self, rule_file, tmp_path):
        report = tmp_path / "report.jsonl"
        code = main(["verify", str(rule_file), "--minimality", "--report", str(report)])
        assert code == 0
        events = _events(report)
        verdicts = [e for e in events if e["event"] == "verdict"]
        assert len(verdicts) == 2
        assert all(v["status"] == "EquivalentBounded" for v in verdicts)
        assert any(v.get("minimal") is True for v in verdicts)

    def test_verify_strict_exit_on_refutation(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("Dedup(t0) | t0\n")
        assert main(["verify", str(bad)]) == 0
        assert main(["verify", str(bad), "--strict"]) == 2

    def test_enumerate_rerun_is_byte_identical(self, tmp_path):
        out = tmp_path / "repo.txt"
        report = tmp_path / "r.jsonl"
        assert main(["enumerate", "--out", str(out), "--max-nodes", "2",
                     "--report", str(report)]) == 0
        first = out.read_bytes()
        assert main(["enumerate", "--out", str(out), "--max-nodes", "2",
                     "--report", str(report)]) == 0
        assert out.read_bytes() == first
        assert len(load_rules(out)) > 0

    def test_dedup_command(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text(
            "Dedup(t0) | t0 | Unique(t0,a0)\n"
            "Dedup(t0) | t0 | Unique(t0,a0);NotNull(t0,a0)\n"
        )
        out = tmp_path / "out.txt"
        report = tmp_path / "r.jsonl"
        assert main(["dedup", str(src), "--out", str(out), "--report", str(report)]) == 0
        kept = load_rules(out)
        assert len(kept) == 1
        removed = [e for e in _events(report) if e["event"] == "removed"]
        assert len(removed) == 1 and removed[0]["survivors"]

    def test_train_rank_pipeline(self, tmp_path):
        data = tmp_path / "data.jsonl"
        rows = []
        for i in range(30):
            rows.append(json.dumps({"rule": RULES[0], "relevance": 1, "group": i % 3}))
            rows.append(json.dumps({"rule": RULES[1], "relevance": 0, "group": i % 3}))
        data.write_text("\n".join(rows) + "\n")
        model = tmp_path / "model.json"
        report = tmp_path / "train.jsonl"
        assert main(["train", str(data), "--out", str(model),
                     "--iterations", "5", "--min-samples-leaf", "2",
                     "--report", str(report)]) == 0
        trained = [e for e in _events(report) if e["event"] == "trained"][0]
        assert trained["examples"] == 60

        rules = tmp_path / "rules.txt"
        rules.write_text("\n".join(RULES) + "\n")
        rank_report = tmp_path / "rank.jsonl"
        assert main(["rank", str(rules), "--model", str(model), "--top", "1",
                     "--report", str(rank_report)]) == 0
        ranked = [e for e in _events(rank_report) if e["event"] == "ranked"]
        assert len(ranked) == 1 and ranked[0]["rank"] == 1

    def test_rewrite_with_schema_facts(self, rule_file, tmp_path):
        plan = tmp_path / "plan.txt"
        plan.write_text("Dedup(Dedup(t0))\n")
        schema = tmp_path / "schema.txt"
        schema.write_text("unique t0 a0\n")
        report = tmp_path / "r.jsonl"
        assert main(["rewrite", str(plan), "--rules", str(rule_file),
                     "--schema", str(schema), "--report", str(report)]) == 0
        events = _events(report)
        minimal = [e for e in events if e["event"] == "minimal_plan"]
        assert minimal == [{"event": "minimal_plan", "plan": "t0", "nodes": 1}]
        summary = [e for e in events if e["event"] == "summary"][0]
        assert summary["input_nodes"] == 3 and summary["minimal_nodes"] == 1

    def test_selfcheck_clean_repo(self, rule_file, tmp_path):
        repo_path = tmp_path / "repo.txt"
        repo = RuleRepository()
        for r in RULES:
            repo.add(parse_rule_line(r), {"stage": "test"})
        repo.save(repo_path)
        report = tmp_path / "r.jsonl"
        assert main(["selfcheck", str(repo_path), "--report", str(report)]) == 0
        summary = [e for e in _events(report) if e["event"] == "summary"][0]
        assert summary["failures"] == 0

    def test_config_file_and_unknown_key(self, tmp_path, rule_file):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"max_rows": 1}))
        assert main(["verify", str(rule_file), "--config", str(cfg)]) == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"not_a_setting": 1}))
        assert main(["verify", str(rule_file), "--config", str(bad)]) == 1

    def test_compose_study_command(self, tmp_path):
        direct = tmp_path / "direct.txt"
        direct.write_text("Proj{a1}(Proj{a0}(t0)) | Proj*{a1}(t0) | Unique(t0,a1)\n")
        first = tmp_path / "first.txt"
        first.write_text("Proj{a1}(Proj{a0}(t0)) | Proj{a1}(t0)\n")
        second = tmp_path / "second.txt"
        second.write_text("Proj{a0}(t0) | Proj*{a0}(t0) | Unique(t0,a0)\n")
        report = tmp_path / "r.jsonl"
        assert main(["compose-study", str(direct), str(first), str(second),
                     "--report", str(report)]) == 0
        event = [e for e in _events(report) if e["event"] == "composability"][0]
        assert event["fraction"] == 1.0
