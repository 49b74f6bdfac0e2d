"""Per-(question type, answer) loss re-scaling weights.

The raw weight of an in-type answer is the ratio of the votes for *other*
answers of the type to the votes for the answer itself, so sparse answers are
up-weighted and dominant ones down-weighted. Raw weights go through a
softplus and are capped at ``WEIGHT_CAP``. Answers never seen under a type
keep weight exactly 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from langprior.vocab import TypeCountTable

WEIGHT_CAP = 100.0
_LINEAR_ABOVE = 50.0  # softplus(x) == x to double precision past this point


def compute_raw_weight(table: TypeCountTable, j: int, i: int) -> float:
    row = table.counts[j]
    n_i = int(row[i])
    if n_i == 0:
        return 1.0
    return (int(row.sum()) - n_i) / n_i


def smooth_weight(raw: float) -> float:
    if raw < 0:
        raise ValueError(f"raw weight must be non-negative, got {raw}")
    soft = raw if raw > _LINEAR_ABOVE else math.log1p(math.exp(raw))
    return min(WEIGHT_CAP, soft)


@dataclass(frozen=True)
class WeightTable:
    mu: np.ndarray
    raw: np.ndarray
    in_type: np.ndarray

    def row(self, j: int) -> np.ndarray:
        return self.mu[j]

    def for_types(self, type_ids: np.ndarray) -> np.ndarray:
        """Gather one weight row per instance."""
        return self.mu[np.asarray(type_ids)]

    def write_csv(
        self,
        path: str | Path,
        types: Sequence[str] | None = None,
        answers: Sequence[str] | None = None,
    ) -> None:
        nt, na = self.mu.shape
        types = list(types) if types is not None else [str(j) for j in range(nt)]
        answers = list(answers) if answers is not None else [str(i) for i in range(na)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["type", "answer", "in_type", "raw", "smoothed"])
            for j in range(nt):
                for i in range(na):
                    w.writerow([
                        types[j], answers[i], int(self.in_type[j, i]),
                        repr(float(self.raw[j, i])), repr(float(self.mu[j, i])),
                    ])


def build_weight_table(table: TypeCountTable) -> WeightTable:
    counts = table.counts.astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    in_type = table.in_type()
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(in_type, (totals - counts) / counts, 1.0)
    mu = np.ones_like(raw)
    for j, i in zip(*np.nonzero(in_type)):
        mu[j, i] = smooth_weight(float(raw[j, i]))
    for arr in (mu, raw, in_type):
        arr.setflags(write=False)
    return WeightTable(mu=mu, raw=raw, in_type=in_type)
