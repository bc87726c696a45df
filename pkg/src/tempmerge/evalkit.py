"""Recall@k / nDCG@k, per-specifier breakdowns and method comparison tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .timeparse import Specifier

METRICS = ("recall@5", "recall@20", "ndcg@5", "ndcg@20")


class EvalError(ValueError):
    pass


Qrels = Dict[str, frozenset]


def qrels_from_queries(queries) -> Qrels:
    return {q.query_id: frozenset(q.gold_passage_ids) for q in queries}


def write_qrels(path, qrels: Mapping[str, frozenset]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, rel in qrels.items():
            for pid in sorted(rel):
                fh.write(f"{qid} 0 {pid} 1\n")


def read_qrels(path) -> Qrels:
    """TREC qrels (``qid 0 pid rel``); rows with ``rel <= 0`` are ignored."""
    out: Dict[str, set] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EvalError(f"{path}:{n}: expected 4 qrels fields")
        if int(parts[3]) > 0:
            out.setdefault(parts[0], set()).add(parts[2])
    return {q: frozenset(v) for q, v in out.items()}


def _ranked(run) -> Dict[str, List[str]]:
    hits = getattr(run, "hits", run)
    out = {}
    for qid, lst in hits.items():
        out[qid] = [h if isinstance(h, str) else h.passage_id for h in lst]
    return out


def _check(ranked: Mapping[str, list], qrels: Mapping[str, frozenset]) -> None:
    missing = [q for q in ranked if q not in qrels or not qrels[q]]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise EvalError(f"{len(missing)} run queries lack qrels: {shown}")


def per_query_recall(run, qrels, k: int) -> Dict[str, float]:
    ranked = _ranked(run)
    _check(ranked, qrels)
    return {q: len(set(ids[:k]) & qrels[q]) / len(qrels[q]) for q, ids in ranked.items()}


def per_query_ndcg(run, qrels, k: int) -> Dict[str, float]:
    ranked = _ranked(run)
    _check(ranked, qrels)
    out = {}
    for q, ids in ranked.items():
        rel = qrels[q]
        dcg = sum(1.0 / math.log2(i + 2) for i, pid in enumerate(ids[:k]) if pid in rel)
        idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(rel))))
        out[q] = dcg / idcg
    return out


def _macro(values: Dict[str, float]) -> float:
    if not values:
        return float("nan")
    return float(np.mean([values[q] for q in sorted(values)]))


def recall_at_k(run, qrels, k: int) -> float:
    """Macro-averaged fraction of relevant passages found in the top ``k``."""
    return _macro(per_query_recall(run, qrels, k))


def ndcg_at_k(run, qrels, k: int) -> float:
    """Macro-averaged binary-relevance nDCG with a ``log2(rank + 1)`` discount."""
    return _macro(per_query_ndcg(run, qrels, k))


def evaluate_run(run, qrels, metrics: Sequence[str] = METRICS) -> Dict[str, float]:
    out = {}
    for m in metrics:
        name, k = m.split("@")
        fn = recall_at_k if name == "recall" else ndcg_at_k
        out[m] = fn(run, qrels, int(k))
    return out


def restrict(run, query_ids) -> Dict[str, list]:
    ranked = _ranked(run)
    return {q: ranked[q] for q in query_ids if q in ranked}


def per_specifier_report(run, queries, qrels, k: int = 20) -> Dict[Optional[Specifier], float]:
    """Recall@k within each specifier's queries; key ``None`` is the non-temporal group.

    Groups with no queries in the run are left out rather than reported as 0.
    """
    ranked = _ranked(run)
    groups: Dict[Optional[Specifier], List[str]] = {}
    for q in queries:
        if q.query_id in ranked:
            groups.setdefault(q.specifier, []).append(q.query_id)
    out = {}
    for s in list(Specifier) + [None]:
        ids = groups.get(s)
        if ids:
            out[s] = recall_at_k({q: ranked[q] for q in ids}, qrels, k)
    return out


def per_specifier_csv(report: Mapping[Optional[Specifier], float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["specifier", "recall_at_20"])
    for s, v in report.items():
        w.writerow(["non_temporal" if s is None else s.value, f"{v:.6f}"])
    return buf.getvalue()


@dataclass
class MetricsReport:
    """One method's metrics per dataset, plus an optional per-specifier Recall@20 vector."""
    datasets: Dict[str, Dict[str, float]]
    per_specifier: Dict[Optional[Specifier], float] = field(default_factory=dict)

    def average(self, metric: str) -> float:
        return float(np.mean([self.datasets[d][metric] for d in self.datasets]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        metrics = list(next(iter(self.datasets.values())))
        w.writerow(["dataset"] + metrics)
        for d, vals in self.datasets.items():
            w.writerow([d] + [f"{vals[m]:.6f}" for m in metrics])
        w.writerow(["average"] + [f"{self.average(m):.6f}" for m in metrics])
        return buf.getvalue()


@dataclass
class ComparisonTable:
    methods: List[str]
    columns: List[Tuple[str, str]]         # (dataset or "average", metric)
    values: List[List[float]]              # [method][column]
    best: List[int]                        # best method row per column

    def column(self, dataset: str, metric: str) -> List[float]:
        j = self.columns.index((dataset, metric))
        return [row[j] for row in self.values]

    def to_text(self) -> str:
        head = ["method"] + [f"{d}:{m}" for d, m in self.columns]
        rows = []
        for i, name in enumerate(self.methods):
            cells = []
            for j, v in enumerate(self.values[i]):
                cells.append(f"{100 * v:.2f}" + ("*" if self.best[j] == i else ""))
            rows.append([name] + cells)
        widths = [max(len(r[c]) for r in [head] + rows) for c in range(len(head))]
        lines = ["  ".join(c.ljust(widths[n]) if n == 0 else c.rjust(widths[n])
                           for n, c in enumerate(r)) for r in [head] + rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"{d}:{m}" for d, m in self.columns])
        for name, row in zip(self.methods, self.values):
            w.writerow([name] + [f"{v:.6f}" for v in row])
        return buf.getvalue()


def compare_methods(reports: Sequence[Tuple[str, MetricsReport]]) -> ComparisonTable:
    """Grid of methods x (dataset, metric) with an average-over-datasets block.

    The best value in each column is recorded (first method wins ties).
    """
    if not reports:
        raise EvalError("no reports to compare")
    datasets = list(reports[0][1].datasets)
    metrics = list(reports[0][1].datasets[datasets[0]])
    for name, r in reports:
        if list(r.datasets) != datasets or any(list(r.datasets[d]) != metrics for d in datasets):
            raise EvalError(f"report for {name!r} has a different dataset/metric layout")
    columns = [(d, m) for d in datasets for m in metrics] + [("average", m) for m in metrics]
    values = []
    for _, r in reports:
        row = [r.datasets[d][m] for d in datasets for m in metrics]
        row += [r.average(m) for m in metrics]
        values.append(row)
    arr = np.asarray(values)
    best = [int(np.argmax(arr[:, j])) for j in range(arr.shape[1])]
    return ComparisonTable([n for n, _ in reports], columns, values, best)


def curve_csv(rows: Sequence[Tuple[int, str, float]]) -> str:
    """Merge-count curve rows ``(merge_count, dataset, recall_at_20)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["merge_count", "dataset", "recall_at_20"])
    for n, d, v in rows:
        w.writerow([n, d, f"{v:.6f}"])
    return buf.getvalue()
