"""End-to-end CLI coverage on the shipped fixture corpus.

One module-scoped chain runs every subcommand in dependency order; the
tests below make read-only assertions against its stdout and artifacts.
Error-path tests use their own scratch directories.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import pytest
from click.testing import CliRunner

from conftest import CONFIG, PIPELINE, run_cli
from tomtrace.cli import main
from tomtrace.qagen import REVIEW_COLUMNS, QuestionState, load_questions
from tomtrace.tkg import check_invariants, load_kg

HEX64 = set("0123456789abcdef")


def _mark_all_pass(path: Path) -> None:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    verdict_col = header.index("verdict")
    for row in body:
        row[verdict_col] = "pass"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(body)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Full pipeline plus review round-trip, ft emission, stats, re-renders."""
    out = tmp_path_factory.mktemp("cli") / "out"
    results = dict(zip(PIPELINE, run_cli(out, *PIPELINE)))
    results["review-export"] = run_cli(out, "review-export")[0]
    _mark_all_pass(out / "review.csv")
    results["review-import"] = run_cli(out, f"review-import {out / 'review.csv'}")[0]
    results["review-export-triples"] = run_cli(out, "review-export --kind triples")[0]
    results["emit-ft"] = run_cli(out, "emit-ft")[0]
    results["stats"] = run_cli(out, "stats")[0]
    results["report-markdown"] = run_cli(out, "report --layout markdown")[0]
    results["report-csv"] = run_cli(out, "report --layout csv")[0]
    return out, results


def _jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# --- happy-path stage assertions ---------------------------------------------------


def test_ingest_reports_corpus_shape(chain):
    out, results = chain
    assert results["ingest"].stdout == "ingested 1 book(s): 2 plots, 2 conversations\n"
    assert (out / "corpus" / "king-lear.jsonl").is_file()


def test_extract_counts_and_record_shape(chain):
    out, results = chain
    assert results["extract"].stdout == "extracted 17 triples (0 rejected)\n"
    records = _jsonl(out / "triples" / "king-lear.jsonl")
    assert len(records) == 17
    assert (out / "triples" / "king-lear.rejects.jsonl").read_text(encoding="utf-8") == ""
    for rec in records:
        assert set(rec) == {
            "book_id", "character", "plot_index", "id",
            "subject", "predicate", "dimension", "target", "object",
        }
        assert rec["book_id"] == "king-lear"


def test_build_kg_summary_matches_saved_graph(chain):
    out, results = chain
    assert results["build-kg"].stdout == "king-lear: 16 edges, 2 supersede links, 1 retirements\n"
    kg = load_kg(out / "kg" / "king-lear.kg.jsonl")
    assert (len(kg.edges), len(kg.supersede_links), len(kg.retirements)) == (16, 2, 1)
    check_invariants(kg)


def test_changelog_accounts_for_every_edge(chain):
    out, _ = chain
    log = _jsonl(out / "kg" / "king-lear.changelog.jsonl")
    added = [edge_id for entry in log for edge_id in entry["added"]]
    assert len(added) == 16
    assert sum(len(entry["contradicted"]) + len(entry["refined"]) for entry in log) == 2
    assert sum(len(entry["retired"]) for entry in log) == 1
    kg = load_kg(out / "kg" / "king-lear.kg.jsonl")
    assert sorted(added) == sorted(kg.edges)


def test_genqa_emits_balanced_question_set(chain):
    out, results = chain
    assert results["genqa"].stdout == "generated 20 questions\n"
    questions = load_questions(out / "questions.jsonl")
    assert len(questions) == 20
    assert len({q.id for q in questions}) == 20
    assert Counter(q.dimension.label for q in questions) == {
        "Belief": 5, "Desire": 5, "Emotion": 5, "Intention": 5,
    }


def test_verify_reports_first_pass_rate(chain):
    out, results = chain
    assert results["verify"].stdout == (
        "verified 20/20 questions; first-pass rate 0.95 (19/20)\n"
    )
    verdicts = _jsonl(out / "verdicts.jsonl")
    assert len(verdicts) == 21
    assert sum(1 for v in verdicts if not v["passed"]) == 1
    counts = Counter(v["question_id"] for v in verdicts)
    assert sorted(counts.values()) == [1] * 19 + [2]
    assert {v["stage"] for v in verdicts} == {"llm"}


def test_eval_prints_the_stored_report(chain):
    out, results = chain
    text = results["eval"].stdout
    assert text == (out / "report.txt").read_text(encoding="utf-8")
    assert "Context: current\n" in text
    assert "Context: current+prev\n" in text
    rows = [line.split() for line in text.splitlines()]
    base = ["replay-gpt", "80.00", "80.00", "100.00", "80.00", "85.00"]
    triple = ["w", "Triple", "100.00", "80.00", "100.00", "80.00", "90.00"]
    assert rows.count(base) == 2
    assert rows.count(triple) == 2
    assert len(_jsonl(out / "predictions.jsonl")) == 80  # 20 questions x 4 conditions


def test_report_rescores_predictions_to_the_same_table(chain):
    _, results = chain
    assert results["report"].stdout == results["eval"].stdout


def test_report_markdown_layout(chain):
    out, results = chain
    text = (out / "report.md").read_text(encoding="utf-8")
    assert results["report-markdown"].stdout == text
    assert "### Context: current\n" in text
    assert "### Context: current+prev\n" in text
    assert "| Models | Belief | Desire | Emotion | Intention | Avg |" in text
    assert "| replay-gpt | 80.00 | 80.00 | 100.00 | 80.00 | 85.00 |" in text
    assert "| w Triple | 100.00 | 80.00 | 100.00 | 80.00 | 90.00 |" in text


def test_report_csv_layout(chain):
    out, results = chain
    expected = (
        "model,context,condition,belief,desire,emotion,intention,avg\n"
        "replay-gpt,current,base,80.00,80.00,100.00,80.00,85.00\n"
        "replay-gpt,current,w Triple,100.00,80.00,100.00,80.00,90.00\n"
        "replay-gpt,current+prev,base,80.00,80.00,100.00,80.00,85.00\n"
        "replay-gpt,current+prev,w Triple,100.00,80.00,100.00,80.00,90.00\n"
    )
    assert (out / "report.csv").read_text(encoding="utf-8") == expected
    assert results["report-csv"].stdout == expected


def test_review_round_trip_promotes_questions(chain):
    out, results = chain
    assert results["review-export"].stdout == (
        f"exported 20 question(s) to {out / 'review.csv'}\n"
    )
    with open(out / "review.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REVIEW_COLUMNS
    assert len(rows) == 21
    assert results["review-import"].stdout == (
        "applied 20 verdict(s), skipped 0 blank row(s)\n"
    )
    questions = load_questions(out / "questions.jsonl")
    assert all(q.state is QuestionState.HUMAN_VERIFIED for q in questions)


def test_triples_review_export_samples_per_config(chain):
    out, results = chain
    # 17 extracted triples at the configured 40% rate round to 7
    assert results["review-export-triples"].stdout == (
        f"exported 7 triple(s) to {out / 'triples_review.csv'}\n"
    )
    with open(out / "triples_review.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 8
    extracted = {rec["id"] for rec in _jsonl(out / "triples" / "king-lear.jsonl")}
    sampled = {row[0] for row in rows[1:]}
    assert sampled < extracted


def test_emit_ft_writes_all_variant_files(chain):
    out, results = chain
    ft = out / "ft"
    lines = results["emit-ft"].stdout.splitlines()
    assert lines == [
        f"{ft / 'train_with_triples.jsonl'}: 20 example(s)",
        f"{ft / 'train_without_triples.jsonl'}: 20 example(s)",
        f"{ft / 'ood_test_with_triples.jsonl'}: 0 example(s)",
        f"{ft / 'ood_test_without_triples.jsonl'}: 0 example(s)",
    ]
    with_triples = _jsonl(ft / "train_with_triples.jsonl")
    without = _jsonl(ft / "train_without_triples.jsonl")
    assert len(with_triples) == len(without) == 20
    for rec_with, rec_without in zip(with_triples, without):
        assert set(rec_with) == set(rec_without) == {"input", "output"}
        assert rec_with["input"] == rec_without["input"]
        assert rec_with["output"].startswith("Relevant mental state triples:\n")
        assert rec_without["output"].startswith("Answer:\n{answer: ")
    manifest = json.loads((ft / "split_manifest.json").read_text(encoding="utf-8"))
    assert manifest == {"king-lear": "train"}


def test_stats_table_and_json(chain):
    out, results = chain
    lines = results["stats"].stdout.splitlines()
    assert lines[1].split() == ["King", "Lear", "2", "2", "2.50"]
    assert lines[2].split() == ["TOTAL", "2", "2", "2.50"]
    assert lines[3] == "questions: 20 (correct 20, distractors 60)"
    payload = json.loads((out / "stats.json").read_text(encoding="utf-8"))
    assert payload["corpus"]["total_plots"] == 2
    assert payload["corpus"]["total_conversations"] == 2
    assert payload["corpus"]["avg_speakers"] == "2.50"
    assert payload["corpus"]["books"][0]["title"] == "King Lear"
    assert payload["questions"]["questions"] == 20
    assert payload["questions"]["distractors"] == 60
    assert payload["questions"]["per_dimension"] == {
        "Belief": 5, "Desire": 5, "Emotion": 5, "Intention": 5,
    }
    assert payload["questions"]["per_book"] == {"king-lear": 20}


def test_every_command_writes_a_manifest(chain):
    out, _ = chain
    expected = {
        "ingest", "extract", "build-kg", "genqa", "verify", "eval",
        "report", "review-export", "review-import", "emit-ft", "stats",
    }
    found = {p.stem for p in (out / "manifests").glob("*.json")}
    assert found == expected
    for name in sorted(expected):
        manifest = json.loads((out / "manifests" / f"{name}.json").read_text(encoding="utf-8"))
        assert set(manifest) == {
            "command", "config_sha256", "inputs", "outputs",
            "package_version", "python_version",
        }
        assert manifest["command"] == name
        for digest in list(manifest["inputs"].values()) + list(manifest["outputs"].values()):
            assert len(digest) == 64 and set(digest) <= HEX64


def test_manifests_carry_no_absolute_paths(chain):
    out, _ = chain
    for path in (out / "manifests").glob("*.json"):
        assert str(out) not in path.read_text(encoding="utf-8")


def test_duplicate_import_collects_row_errors(chain):
    out, _ = chain
    result = run_cli(out, f"review-import {out / 'review.csv'}", expect=1)[0]
    assert "applied 0 verdict(s), skipped 0 blank row(s)" in result.stdout
    assert result.stderr.count("row error:") == 20
    questions = load_questions(out / "questions.jsonl")
    assert all(q.state is QuestionState.HUMAN_VERIFIED for q in questions)


# --- error paths -------------------------------------------------------------------


def test_eval_without_corpus_exits_one(tmp_path):
    result = run_cli(tmp_path / "out", "eval", expect=1)[0]
    assert result.stderr.startswith("error:")
    assert "run ingest" in result.stderr


def test_report_without_predictions_exits_one(tmp_path):
    result = run_cli(tmp_path / "out", "report", expect=1)[0]
    assert "run eval" in result.stderr


def test_unknown_config_key_exits_one(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nbogus_top: true\n", encoding="utf-8")
    result = CliRunner().invoke(main, ["-c", str(bad), "stats"])
    assert result.exit_code == 1
    assert "bogus_top" in result.stderr


def test_replay_miss_exits_two(tmp_path):
    out = tmp_path / "out"
    run_cli(out, "ingest")
    empty_script = tmp_path / "empty.jsonl"
    empty_script.write_text("", encoding="utf-8")
    result = run_cli(out, f"extract --replay {empty_script}", expect=2)[0]
    assert result.stderr.startswith("backend error:")


def test_version_flag():
    result = CliRunner().invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "version" in result.stdout
