"""Answer vocabulary, per-type answer counts and soft labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_ANNOTATORS = 10


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AnswerVocabulary:
    answers: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        answers = tuple(self.answers)
        if len(set(answers)) != len(answers):
            raise ValueError("answer strings must be unique")
        if len(answers) < 2:
            raise ValueError(f"vocabulary needs at least 2 answers, got {len(answers)}")
        object.__setattr__(self, "answers", answers)
        object.__setattr__(self, "index", {a: i for i, a in enumerate(answers)})

    def __len__(self) -> int:
        return len(self.answers)

    def index_of(self, answer: str) -> int:
        try:
            return self.index[answer]
        except KeyError:
            raise KeyError(f"unknown answer {answer!r}") from None


def build_vocab(raw_answers: Iterable[str]) -> AnswerVocabulary:
    """Deduplicate ``raw_answers`` keeping first-seen order."""
    seen = list(dict.fromkeys(raw_answers))
    if not seen:
        raise ValueError("empty vocabulary")
    return AnswerVocabulary(tuple(seen))


@dataclass(frozen=True)
class SoftLabel:
    """Annotator vote counts for one instance; ``scores`` is counts / 10."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 1:
            raise ValueError("counts must be a vector")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.equal(np.mod(counts, 1), 0)):
                raise ValueError("annotator counts must be integers")
            counts = counts.astype(np.int64)
        if np.any(counts < 0) or np.any(counts > NUM_ANNOTATORS):
            raise ValueError(f"annotator counts must lie in [0, {NUM_ANNOTATORS}]")
        if counts.sum() > NUM_ANNOTATORS:
            raise ValueError(f"at most {NUM_ANNOTATORS} votes per instance, got {counts.sum()}")
        if counts.sum() == 0:
            raise ValueError("instance has no annotator votes")
        object.__setattr__(self, "counts", _frozen(counts.astype(np.int64)))

    @property
    def scores(self) -> np.ndarray:
        return self.counts / float(NUM_ANNOTATORS)

    def __len__(self) -> int:
        return len(self.counts)

    def majority(self) -> int:
        """Index of the most-voted answer, lowest index on ties."""
        return int(np.argmax(self.counts))


def soft_label_from_counts(annotator_counts: Sequence[int]) -> SoftLabel:
    return SoftLabel(np.asarray(annotator_counts))


@dataclass(frozen=True)
class TypeCountTable:
    """``counts[j, i]`` is the number of votes for answer i under question type j."""

    types: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self) -> None:
        types = tuple(self.types)
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != len(types):
            raise ValueError(
                f"counts shape {counts.shape} does not match {len(types)} types"
            )
        if len(set(types)) != len(types):
            raise ValueError("question types must be unique")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        empty = np.flatnonzero(counts.sum(axis=1) == 0)
        if empty.size:
            raise ValueError(f"question type(s) {[types[j] for j in empty]} have no answers")
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "counts", _frozen(counts.astype(np.int64)))

    @property
    def num_types(self) -> int:
        return len(self.types)

    @property
    def num_answers(self) -> int:
        return self.counts.shape[1]

    def answer_set(self, j: int) -> np.ndarray:
        """Sorted indices of answers observed under type ``j``."""
        self._check_type(j)
        return np.flatnonzero(self.counts[j] > 0)

    def in_type(self) -> np.ndarray:
        """Boolean [types x answers] membership matrix."""
        return self.counts > 0

    def frequency_order(self, j: int) -> np.ndarray:
        """In-type answers of ``j`` from most to least frequent (index breaks ties)."""
        members = self.answer_set(j)
        order = np.lexsort((members, -self.counts[j, members]))
        return members[order]

    def _check_type(self, j: int) -> None:
        if not 0 <= j < self.num_types:
            raise IndexError(f"unknown question type id {j}")

    def to_json(self, vocab: AnswerVocabulary | None = None) -> dict:
        out: dict = {"types": list(self.types), "counts": self.counts.tolist()}
        if vocab is not None:
            if len(vocab) != self.num_answers:
                raise ValueError("vocabulary size does not match count table")
            out["answers"] = list(vocab.answers)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> TypeCountTable:
        return cls(tuple(obj["types"]), np.asarray(obj["counts"], dtype=np.int64))


def count_answers(
    dataset: Iterable[tuple[int, SoftLabel]],
    types: Sequence[str],
    num_answers: int | None = None,
) -> TypeCountTable:
    """Sum annotator votes per (question type, answer) over ``dataset``."""
    counts = None
    n = 0
    for type_id, label in dataset:
        if counts is None:
            width = len(label) if num_answers is None else num_answers
            counts = np.zeros((len(types), width), dtype=np.int64)
        if not 0 <= type_id < len(types):
            raise ValueError(f"unknown question type id {type_id}")
        if len(label) != counts.shape[1]:
            raise ValueError("label length does not match vocabulary")
        counts[type_id] += label.counts
        n += 1
    if n == 0:
        raise ValueError("no instances")
    return TypeCountTable(tuple(types), counts)


def save_tables(path: str | Path, vocab: AnswerVocabulary, table: TypeCountTable) -> None:
    Path(path).write_text(json.dumps(table.to_json(vocab), indent=1) + "\n")


def load_tables(path: str | Path) -> tuple[AnswerVocabulary | None, TypeCountTable]:
    obj = json.loads(Path(path).read_text())
    vocab = AnswerVocabulary(tuple(obj["answers"])) if "answers" in obj else None
    table = TypeCountTable.from_json(obj)
    if vocab is not None and len(vocab) != table.num_answers:
        raise ValueError("vocabulary size does not match count table")
    return vocab, table


def save_vocab(path: str | Path, vocab: AnswerVocabulary, types: Sequence[str]) -> None:
    obj = {"answers": list(vocab.answers), "types": list(types)}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_vocab(path: str | Path) -> tuple[AnswerVocabulary, tuple[str, ...]]:
    obj = json.loads(Path(path).read_text())
    return AnswerVocabulary(tuple(obj["answers"])), tuple(obj["types"])
