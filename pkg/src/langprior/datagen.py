"""Synthetic question-type / answer data with a train-test prior shift.

Each instance has a question type, a question feature (one-hot type plus
Gaussian noise), a visual feature (one-hot "cue" answer plus noise) and ten
annotator votes. Within a type, train answers follow a Zipf law over the
type's answer set; the test split uses the same answers with the Zipf ranks
reversed, permuted, or unchanged. The cue shows the true answer with
probability ``1 - visual_noise`` and a uniformly random vocabulary answer
otherwise, so a model can trade visual evidence against the per-type prior.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from langprior.vocab import (
    NUM_ANNOTATORS,
    AnswerVocabulary,
    SoftLabel,
    TypeCountTable,
    build_vocab,
)

FEATURE_NOISE = 0.05
SHIFT_MODES = ("none", "reversed", "permuted")


@dataclass(frozen=True)
class SyntheticConfig:
    num_types: int = 4
    answers_per_type: int = 6
    shared_vocab: bool = False
    train_size: int = 20000
    test_size: int = 5000
    skew: float = 1.5
    shift_mode: str = "reversed"
    q_dim: int = 8
    v_dim: int = 24
    visual_noise: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    @property
    def num_answers(self) -> int:
        if self.shared_vocab:
            return self.answers_per_type
        return self.num_types * self.answers_per_type

    def validate(self) -> None:
        if self.num_types < 1:
            raise ValueError("num_types must be positive")
        if self.answers_per_type < 2:
            raise ValueError("answers_per_type must be at least 2")
        if self.train_size <= 0 or self.test_size <= 0:
            raise ValueError("split sizes must be positive")
        if self.skew < 0:
            raise ValueError("skew must be non-negative")
        if self.shift_mode not in SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {SHIFT_MODES}, got {self.shift_mode!r}")
        if self.q_dim < self.num_types:
            raise ValueError(f"q_dim ({self.q_dim}) must be >= num_types ({self.num_types})")
        if self.v_dim < self.num_answers:
            raise ValueError(f"v_dim ({self.v_dim}) must be >= number of answers ({self.num_answers})")
        if not 0.0 <= self.visual_noise <= 1.0:
            raise ValueError("visual_noise must lie in [0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> SyntheticConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass(frozen=True)
class Instance:
    type_id: int
    q_feat: np.ndarray
    v_feat: np.ndarray
    label: SoftLabel


@dataclass
class Dataset:
    """Column-oriented instances: ``counts[k]`` are the votes of instance k."""

    type_ids: np.ndarray
    q: np.ndarray
    v: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.type_ids = np.asarray(self.type_ids, dtype=np.int64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.type_ids)
        if not (self.q.shape[0] == self.v.shape[0] == self.counts.shape[0] == n):
            raise ValueError("dataset columns have different lengths")
        if self.q.ndim != 2 or self.v.ndim != 2 or self.counts.ndim != 2:
            raise ValueError("features and counts must be 2-D")

    def __len__(self) -> int:
        return len(self.type_ids)

    def __getitem__(self, k: int) -> Instance:
        return Instance(int(self.type_ids[k]), self.q[k], self.v[k], SoftLabel(self.counts[k]))

    def __iter__(self) -> Iterator[Instance]:
        return (self[k] for k in range(len(self)))

    @property
    def num_answers(self) -> int:
        return self.counts.shape[1]

    @property
    def scores(self) -> np.ndarray:
        return self.counts / float(NUM_ANNOTATORS)

    def majority(self) -> np.ndarray:
        return np.argmax(self.counts, axis=1)

    def labelled(self) -> Iterator[tuple[int, SoftLabel]]:
        for k in range(len(self)):
            yield int(self.type_ids[k]), SoftLabel(self.counts[k])

    def subset(self, idx) -> Dataset:
        return Dataset(self.type_ids[idx], self.q[idx], self.v[idx], self.counts[idx])

    def count_table(self, types: Sequence[str]) -> TypeCountTable:
        """Vote totals per (type, answer); equal to ``count_answers`` on the instances."""
        if len(self) == 0:
            raise ValueError("no instances")
        if self.type_ids.min() < 0 or self.type_ids.max() >= len(types):
            raise ValueError("unknown question type id")
        counts = np.zeros((len(types), self.num_answers), dtype=np.int64)
        np.add.at(counts, self.type_ids, self.counts)
        return TypeCountTable(tuple(types), counts)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for k in range(len(self)):
                rec = {
                    "type": int(self.type_ids[k]),
                    "q": self.q[k].tolist(),
                    "v": self.v[k].tolist(),
                    "counts": self.counts[k].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> Dataset:
        t, q, v, c = [], [], [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    t.append(rec["type"])
                    q.append(rec["q"])
                    v.append(rec["v"])
                    c.append(rec["counts"])
                except (KeyError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
        if not t:
            raise ValueError(f"{path}: no instances")
        return cls(np.array(t), np.array(q), np.array(v), np.array(c))


@dataclass
class SyntheticData:
    train: Dataset
    test: Dataset
    vocab: AnswerVocabulary
    types: tuple[str, ...]
    train_priors: np.ndarray
    test_priors: np.ndarray


def answer_sets(config: SyntheticConfig) -> list[np.ndarray]:
    k = config.answers_per_type
    if config.shared_vocab:
        return [np.arange(k) for _ in range(config.num_types)]
    return [np.arange(j * k, (j + 1) * k) for j in range(config.num_types)]


def zipf_weights(k: int, skew: float) -> np.ndarray:
    """Normalized Zipf probabilities for ranks 1..k."""
    w = np.arange(1, k + 1, dtype=np.float64) ** -skew
    return w / w.sum()


def type_priors(config: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-type answer distributions ``(train, test)``, each [types x answers]."""
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    k = config.answers_per_type
    base = zipf_weights(k, config.skew)
    train = np.zeros((config.num_types, config.num_answers))
    test = np.zeros_like(train)
    for j, members in enumerate(answer_sets(config)):
        ranked = members[rng.permutation(k)]  # ranked[r] gets the r-th largest weight
        train[j, ranked] = base
        if config.shift_mode == "none":
            test[j, ranked] = base
        elif config.shift_mode == "reversed":
            test[j, ranked] = base[::-1]
        else:
            test[j, ranked] = base[rng.permutation(k)]
    return train, test


def _votes(true_answer: int, members: np.ndarray, label_noise: float, rng) -> np.ndarray:
    major = int(round(NUM_ANNOTATORS * (1.0 - label_noise)))
    votes = {true_answer: major}
    others = members[members != true_answer]
    for _ in range(NUM_ANNOTATORS - major):
        a = int(rng.choice(others)) if others.size else true_answer
        votes[a] = votes.get(a, 0) + 1
    return votes


def _sample_split(config, priors, n, rng) -> Dataset:
    na = config.num_answers
    sets = answer_sets(config)
    type_ids = rng.integers(0, config.num_types, size=n)
    cdf = np.cumsum(priors, axis=1)
    u = rng.random(n)
    answers = np.minimum((u[:, None] > cdf[type_ids]).sum(axis=1), na - 1)
    noisy = rng.random(n) < config.visual_noise
    random_cue = rng.integers(0, na, size=n)
    cue = np.where(noisy, random_cue, answers)

    q = rng.normal(0.0, FEATURE_NOISE, size=(n, config.q_dim))
    q[np.arange(n), type_ids] += 1.0
    v = rng.normal(0.0, FEATURE_NOISE, size=(n, config.v_dim))
    v[np.arange(n), cue] += 1.0

    counts = np.zeros((n, na), dtype=np.int64)
    if config.label_noise == 0.0:
        counts[np.arange(n), answers] = NUM_ANNOTATORS
    else:
        for k in range(n):
            for a, c in _votes(int(answers[k]), sets[type_ids[k]], config.label_noise, rng).items():
                counts[k, a] = c
    return Dataset(type_ids, q, v, counts)


def generate(config: SyntheticConfig) -> SyntheticData:
    config.validate()
    train_p, test_p = type_priors(config)
    if config.shared_vocab:
        names = [f"a{i}" for i in range(config.num_answers)]
    else:
        k = config.answers_per_type
        names = [f"t{j}_a{i}" for j in range(config.num_types) for i in range(k)]
    vocab = build_vocab(names)
    types = tuple(f"type{j}" for j in range(config.num_types))
    rng = np.random.default_rng([config.seed, 2])
    train = _sample_split(config, train_p, config.train_size, rng)
    test = _sample_split(config, test_p, config.test_size, rng)
    return SyntheticData(train, test, vocab, types, train_p, test_p)


@dataclass
class StatsReport:
    distribution: np.ndarray  # [types x answers], rows sum to 1 where populated
    type_counts: np.ndarray
    out_of_type: np.ndarray  # per-type count of answers outside the reference set
    out_of_type_rate: np.ndarray
    overall_out_of_type_rate: float

    def to_json(self) -> dict:
        return {
            "type_counts": self.type_counts.tolist(),
            "out_of_type_rate": self.out_of_type_rate.tolist(),
            "overall_out_of_type_rate": self.overall_out_of_type_rate,
            "distribution": self.distribution.tolist(),
        }


def dataset_stats(
    dataset: Dataset,
    reference: TypeCountTable,
    predictions: np.ndarray | None = None,
) -> StatsReport:
    """Per-type answer distribution and the share of out-of-type answers.

    Uses the majority vote of each instance, or ``predictions`` when given
    (then the rate is the out-of-type *prediction* rate).
    """
    if dataset.num_answers != reference.num_answers:
        raise ValueError(
            f"vocabulary mismatch: dataset has {dataset.num_answers} answers, "
            f"reference has {reference.num_answers}"
        )
    if len(dataset) and dataset.type_ids.max() >= reference.num_types:
        raise ValueError("dataset has question types missing from the reference")
    answers = dataset.majority() if predictions is None else np.asarray(predictions)
    if answers.shape != (len(dataset),):
        raise ValueError("predictions must have one entry per instance")
    nt, na = reference.num_types, reference.num_answers
    hist = np.zeros((nt, na))
    np.add.at(hist, (dataset.type_ids, answers), 1.0)
    type_counts = hist.sum(axis=1)
    outside = ~reference.in_type()
    out = (hist * outside).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(type_counts[:, None] > 0, hist / type_counts[:, None], 0.0)
        rate = np.where(type_counts > 0, out / type_counts, 0.0)
    overall = float(out.sum() / type_counts.sum()) if type_counts.sum() else 0.0
    return StatsReport(dist, type_counts.astype(np.int64), out.astype(np.int64), rate, overall)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise total-variation distance between distributions."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
