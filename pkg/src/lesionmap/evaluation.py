"""Accuracy, confusion matrix, per-class one-vs-rest AUC, and report tables.

AUC is the Mann-Whitney statistic: the probability that a positive sample
outscores a negative one, counting ties as half a win. The implementation
uses average ranks; the O(n^2) pair count is its test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateClassError


@dataclass
class EvalReport:
    """Mirrors one row of the performance table: accuracy plus per-class AUC."""

    accuracy: float
    per_class_auc: list[float | None]
    confusion: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("cannot compute accuracy of an empty sample")
    return float(np.mean(predictions == labels))


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], k: int) -> np.ndarray:
    """cell[t][p] counts samples with true class t predicted as p."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} indices must lie in [0, {k}), got [{arr.min()}, {arr.max()}]")
    matrix = np.zeros((k, k), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_one_vs_rest(scores: Sequence[float], labels: Sequence[int], c: int) -> float:
    """Mann-Whitney AUC of class c's scores against all other classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    positive = labels == c
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(
            f"AUC for class {c} undefined: {n_pos} positives, {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(score_matrix: np.ndarray, labels: Sequence[int]) -> EvalReport:
    """Build the report from per-sample class scores; degenerate AUCs are absent."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if score_matrix.ndim != 2 or score_matrix.shape[0] != len(labels):
        raise ValueError(f"score matrix {score_matrix.shape} does not match {len(labels)} labels")
    k = score_matrix.shape[1]
    predictions = score_matrix.argmax(axis=1)
    aucs: list[float | None] = []
    for c in range(k):
        try:
            aucs.append(auc_one_vs_rest(score_matrix[:, c], labels, c))
        except DegenerateClassError:
            aucs.append(None)
    return EvalReport(
        accuracy=accuracy(predictions, labels),
        per_class_auc=aucs,
        confusion=confusion_matrix(predictions, labels, k),
    )


# ---------------------------------------------------------------------------
# rendering


def format_row_values(report: EvalReport) -> list[str]:
    """Accuracy as a two-decimal percentage, then each AUC with two decimals."""
    cells = [f"{report.accuracy * 100.0:.2f}"]
    cells += ["-" if a is None else f"{a:.2f}" for a in report.per_class_auc]
    return cells


def report_csv(rows: Sequence[tuple[str, EvalReport]], class_names: Sequence[str]) -> str:
    lines = ["model,accuracy," + ",".join(class_names)]
    for name, rep in rows:
        lines.append(name + "," + ",".join(format_row_values(rep)))
    return "\n".join(lines) + "\n"


def report_text(rows: Sequence[tuple[str, EvalReport]], class_names: Sequence[str]) -> str:
    header = ["Model", "Accuracy (%)", *class_names]
    table = [header]
    for name, rep in rows:
        table.append([name, *format_row_values(rep)])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    rendered = []
    for row in table:
        rendered.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(rendered) + "\n"
