"""Agreement and analysis metrics.

Quadratic weighted kappa, repeated-trial consistency, per-confidence-bucket
kappa, cross-set generalizability matrices and Welch two-sample t-tests.
All functions are pure and reentrant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special

DEFAULT_BUCKET_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def round_half_away(x: float) -> int:
    """Round halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class RatingPair:
    """Two aligned integer rating lists over a shared score range."""

    a: tuple[int, ...]
    b: tuple[int, ...]
    score_range: tuple[int, int]

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise ValueError(f"length mismatch: {len(self.a)} vs {len(self.b)}")
        if len(self.a) < 1:
            raise ValueError("ratings must be nonempty")
        lo, hi = self.score_range
        if hi <= lo:
            raise ValueError(f"score range [{lo},{hi}] must span at least two classes")
        for name, values in (("a", self.a), ("b", self.b)):
            for v in values:
                if not lo <= v <= hi:
                    raise ValueError(f"rating {v} in {name} outside [{lo},{hi}]")

    @classmethod
    def of(cls, a: Sequence[float], b: Sequence[float],
           score_range: tuple[int, int]) -> "RatingPair":
        """Build a pair, rounding real-valued ratings (e.g. averaged trials)."""
        return cls(tuple(round_half_away(float(x)) for x in a),
                   tuple(round_half_away(float(x)) for x in b),
                   score_range)


def qwk(pair: RatingPair) -> float:
    """Quadratic weighted kappa: 1 - sum(w*O)/sum(w*E).

    O is the normalized joint histogram, E the outer product of the marginals,
    w[i,j] = (i-j)^2/(N-1)^2. A vanishing denominator can only happen when both
    raters are constant on the same class, which is perfect agreement: 1.0.
    """
    lo, hi = pair.score_range
    n_classes = hi - lo + 1
    a = np.asarray(pair.a) - lo
    b = np.asarray(pair.b) - lo
    observed = np.zeros((n_classes, n_classes))
    np.add.at(observed, (a, b), 1.0)
    observed /= len(pair.a)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(n_classes)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    denominator = float((weights * expected).sum())
    if denominator == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denominator


def consistency(trials: Sequence[Sequence[float]]) -> tuple[float, list[float]]:
    """Share of items scored identically across all trials, plus per-item means."""
    if len(trials) < 2:
        raise ValueError("need at least two trials")
    length = len(trials[0])
    if any(len(t) != length for t in trials):
        raise ValueError("trials have mismatched lengths")
    if length == 0:
        raise ValueError("trials are empty")
    unchanged = sum(
        1 for i in range(length) if all(t[i] == trials[0][i] for t in trials)
    )
    finals = [sum(t[i] for t in trials) / len(trials) for i in range(length)]
    return unchanged / length, finals


@dataclass(frozen=True)
class BucketReport:
    """Per-confidence-bucket sample counts and kappa values.

    ``qwks[i]`` is None when bucket i holds fewer than two samples.
    """

    edges: tuple[float, ...]
    counts: tuple[int, ...]
    qwks: tuple[Optional[float], ...]

    def to_json(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts),
                "qwk": list(self.qwks)}


def bucket_qwk(predictions: Sequence[tuple[float, float]], truth: Sequence[int],
               edges: Sequence[float] = DEFAULT_BUCKET_EDGES,
               score_range: tuple[int, int] = (0, 1)) -> BucketReport:
    """Assign each (score, confidence) sample to a half-open bucket and score it.

    Buckets are [e_i, e_{i+1}) with the final bucket closed at 1.0.
    """
    if not predictions:
        raise ValueError("empty predictions")
    if len(predictions) != len(truth):
        raise ValueError("predictions and truth must align")
    edges = tuple(float(e) for e in edges)
    if list(edges) != sorted(edges) or len(set(edges)) != len(edges):
        raise ValueError("edges must be strictly ascending")
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError("edges must cover [0, 1]")
    n_buckets = len(edges) - 1
    members: list[list[int]] = [[] for _ in range(n_buckets)]
    for i, (_, conf) in enumerate(predictions):
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0,1]")
        slot = n_buckets - 1
        for j in range(n_buckets):
            if edges[j] <= conf < edges[j + 1]:
                slot = j
                break
        members[slot].append(i)
    counts, qwks = [], []
    for idx in members:
        counts.append(len(idx))
        if len(idx) < 2:
            qwks.append(None)
            continue
        pair = RatingPair.of([predictions[i][0] for i in idx],
                             [truth[i] for i in idx], score_range)
        qwks.append(qwk(pair))
    return BucketReport(edges=edges, counts=tuple(counts), qwks=tuple(qwks))


@dataclass(frozen=True)
class TTestResult:
    diff_of_means: float
    t_statistic: float
    p_value: float
    dof: float

    def to_json(self) -> dict:
        return {"diff_of_means": self.diff_of_means, "t_statistic": self.t_statistic,
                "p_value": self.p_value, "dof": self.dof}


def welch_t_test(group_a: Sequence[float], group_b: Sequence[float]) -> TTestResult:
    """Two-sided unequal-variance t-test with Welch-Satterthwaite dof."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two observations")
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if var_a == 0.0 and var_b == 0.0:
        raise ValueError("both groups have zero variance")
    sa, sb = var_a / a.size, var_b / b.size
    se = math.sqrt(sa + sb)
    diff = float(a.mean() - b.mean())
    t = diff / se
    dof = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    # two-sided p through the regularized incomplete beta form of the t CDF
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))) if t != 0.0 else 1.0
    return TTestResult(diff_of_means=diff, t_statistic=t, p_value=p, dof=dof)


@dataclass(frozen=True)
class CrossEvalMatrix:
    """Train-set rows by test-set columns; diagonal cells are None."""

    set_ids: tuple[str, ...]
    values: tuple[tuple[Optional[float], ...], ...]

    def cell(self, train_set: str, test_set: str) -> Optional[float]:
        return self.values[self.set_ids.index(train_set)][self.set_ids.index(test_set)]

    def to_json(self) -> dict:
        return {"set_ids": list(self.set_ids),
                "values": [list(row) for row in self.values]}

    def render_text(self) -> str:
        header = ["train\\test"] + [str(s) for s in self.set_ids]
        rows = [header]
        for sid, row in zip(self.set_ids, self.values):
            rows.append([str(sid)] + ["-" if v is None else f"{v:.4f}" for v in row])
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)


def crosseval_matrix(cells: dict[tuple[str, str], RatingPair]) -> CrossEvalMatrix:
    """Assemble per-cell kappas; diagonal entries in the input are ignored."""
    ids = sorted({k[0] for k in cells} | {k[1] for k in cells})
    values = []
    for train_set in ids:
        row: list[Optional[float]] = []
        for test_set in ids:
            if train_set == test_set:
                row.append(None)
            else:
                pair = cells.get((train_set, test_set))
                row.append(qwk(pair) if pair is not None else None)
        values.append(tuple(row))
    return CrossEvalMatrix(set_ids=tuple(ids), values=tuple(values))


@dataclass(frozen=True)
class MetricRecord:
    """One named metric observation, the unit of the machine-readable report."""

    metric: str
    value: object
    labels: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metric": self.metric, "value": self.value, **self.labels}


def write_metric_records(path: str | Path, records: Iterable[MetricRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def render_metric_table(records: Iterable[MetricRecord]) -> str:
    """Plain-text two-column table of metric names (with labels) and values."""
    rows = []
    for rec in records:
        label = rec.metric
        if rec.labels:
            inner = ",".join(f"{k}={v}" for k, v in sorted(rec.labels.items()))
            label = f"{label}[{inner}]"
        value = rec.value
        if isinstance(value, float):
            value = f"{value:.4f}"
        rows.append((label, str(value)))
    if not rows:
        return "(no metrics)"
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)
