"""Per-AU confusion counts, F1 and accuracy, and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, n_au: int) -> "ConfusionCounts":
        z = lambda: np.zeros(n_au, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    @property
    def n_au(self) -> int:
        return self.tp.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def update(counts: ConfusionCounts, probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Add a batch (or one sample) of predictions; ``probs >= threshold`` is positive."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64)) >= threshold
    y = np.atleast_2d(np.asarray(labels)).astype(bool)
    if p.shape != y.shape or p.shape[1] != counts.n_au:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} must be (batch, {counts.n_au})")
    return ConfusionCounts(
        counts.tp + (p & y).sum(axis=0),
        counts.fp + (p & ~y).sum(axis=0),
        counts.tn + (~p & ~y).sum(axis=0),
        counts.fn + (~p & y).sum(axis=0),
    )


def f1(counts: ConfusionCounts) -> np.ndarray:
    """2tp / (2tp + fp + fn) per AU, 0 where the denominator vanishes."""
    num = 2 * counts.tp
    den = num + counts.fp + counts.fn
    out = np.zeros(counts.n_au, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def accuracy(counts: ConfusionCounts) -> np.ndarray:
    total = counts.total
    if (total == 0).any():
        raise ValueError("accuracy is undefined with no evaluated samples")
    return (counts.tp + counts.tn) / total


@dataclass
class Report:
    au_names: list[str]
    f1: list[float]
    accuracy: list[float]
    n_samples: int
    extra: dict = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "per_au": {name: {"f1": round(f, 6), "accuracy": round(a, 6)}
                       for name, f, a in zip(self.au_names, self.f1, self.accuracy)},
            "avg": {"f1": round(self.mean_f1, 6), "accuracy": round(self.mean_accuracy, 6)},
            **self.extra,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, delimiter: str = "\t") -> str:
        """Percentages in the AU-index / Avg. column layout."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["metric", *self.au_names, "Avg."])
        w.writerow(["F1", *(f"{100 * v:.1f}" for v in self.f1), f"{100 * self.mean_f1:.1f}"])
        w.writerow(["Accuracy", *(f"{100 * v:.1f}" for v in self.accuracy),
                    f"{100 * self.mean_accuracy:.1f}"])
        return buf.getvalue()


def report(counts: ConfusionCounts, au_names: Sequence[str] | None = None, **extra) -> Report:
    names = list(au_names) if au_names is not None else [f"AU{i + 1}" for i in range(counts.n_au)]
    n = int(counts.total[0]) if counts.n_au else 0
    acc = accuracy(counts) if n else np.zeros(counts.n_au)
    return Report(names, [float(v) for v in f1(counts)], [float(v) for v in acc], n, dict(extra))
