"""Fine-tune data emission: training examples and book-level OOD splits.

Both output variants share the same input prompt (current plot, no triple
block). The completion either lists the character's active triples before
the answer object, or answers directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import Corpus
from .errors import IoError, MissingKg, UnknownBook, UnverifiedQuestion
from .evalharness import (
    ContextMode,
    EvalCondition,
    TRIPLE_BLOCK_HEADER,
    assemble_context,
)
from .qagen import QuestionState, TomQuestion
from .tkg import TemporalKG, state_at
from .triples import render_triple
from .util import normalize_name

logger = logging.getLogger(__name__)


class Split(Enum):
    TRAIN = "train"
    OOD_TEST = "ood_test"


@dataclass
class TrainingExample:
    input: str
    output: str
    with_triples: bool
    question_id: str
    split: Split = Split.TRAIN


@dataclass
class SplitSpec:
    ood_book_titles: frozenset[str]


def emit_example(
    question: TomQuestion,
    kg: TemporalKG | None,
    with_triples: bool,
    *,
    corpus: Corpus,
    waive_verification: bool = False,
    split: Split = Split.TRAIN,
) -> TrainingExample:
    """One supervised example for a human-verified question."""
    if question.state is not QuestionState.HUMAN_VERIFIED and not waive_verification:
        raise UnverifiedQuestion(f"{question.id} is {question.state.value}, not human_verified")
    condition = EvalCondition(ContextMode.CURRENT_PLOT, triples_enabled=False)
    prompt = assemble_context(question, corpus, kg, condition)
    answer_obj = "{answer: %s}" % question.correct
    if with_triples:
        if kg is None:
            raise MissingKg(f"{question.id}: triples requested but no graph given")
        triples = state_at(kg, question.character, question.plot_index)
        lines = "\n".join(render_triple(t) for t in triples)
        parts = [TRIPLE_BLOCK_HEADER]
        if lines:
            parts.append(lines)
        parts.append("Answer:")
        parts.append(answer_obj)
        output = "\n".join(parts)
    else:
        output = f"Answer:\n{answer_obj}"
    return TrainingExample(
        input=prompt.text,
        output=output,
        with_triples=with_triples,
        question_id=question.id,
        split=split,
    )


@dataclass
class SplitResult:
    train: list[TomQuestion] = field(default_factory=list)
    ood: list[TomQuestion] = field(default_factory=list)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)


def split_ood(corpus: Corpus, questions: list[TomQuestion], spec: SplitSpec) -> SplitResult:
    """Partition questions by book membership; splits are disjoint by construction."""
    titles_by_id = {book.id: normalize_name(book.title) for book in corpus.books}
    known_titles = set(titles_by_id.values())
    ood_titles = {normalize_name(t) for t in spec.ood_book_titles}
    missing = ood_titles - known_titles
    if missing:
        raise UnknownBook(f"split names books not in corpus: {sorted(missing)}")
    result = SplitResult(counts={"train": {}, "ood_test": {}})
    for question in questions:
        title = titles_by_id.get(question.book_id)
        if title is None:
            raise UnknownBook(f"question {question.id} references unknown book {question.book_id!r}")
        bucket, key = (result.ood, "ood_test") if title in ood_titles else (result.train, "train")
        bucket.append(question)
        dim = question.dimension.label
        result.counts[key][dim] = result.counts[key].get(dim, 0) + 1
    return result


def write_training_file(examples: list[TrainingExample], path: Path | str) -> int:
    """Write {input, output} JSONL sorted by question id; returns the count."""
    ordered = sorted(examples, key=lambda e: e.question_id)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for example in ordered:
                fh.write(json.dumps({"input": example.input, "output": example.output}, ensure_ascii=False))
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return len(ordered)


def write_split_manifest(corpus: Corpus, spec: SplitSpec, path: Path | str) -> Path:
    """Record which books feed which split."""
    ood_titles = {normalize_name(t) for t in spec.ood_book_titles}
    manifest = {
        book.id: ("ood_test" if normalize_name(book.title) in ood_titles else "train")
        for book in sorted(corpus.books, key=lambda b: b.id)
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
