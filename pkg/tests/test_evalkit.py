import math

import numpy as np
import pytest

from tempmerge.corpuslab import QueryRecord
from tempmerge.evalkit import (EvalError, MetricsReport, compare_methods, curve_csv, evaluate_run,
                               ndcg_at_k, per_specifier_csv, per_specifier_report, qrels_from_queries,
                               read_qrels, recall_at_k, write_qrels)
from tempmerge.retrieval import RetrievalRun, ScoredHit
from tempmerge.timeparse import Specifier, TimeConstraint, TimePoint


def brute_recall(ranked, rel, k):
    found = 0
    for pid in rel:
        if pid in ranked[:k]:
            found += 1
    return found / len(rel)


def brute_ndcg(ranked, rel, k):
    dcg = 0.0
    for pos in range(1, min(k, len(ranked)) + 1):
        if ranked[pos - 1] in rel:
            dcg += 1 / math.log(pos + 1, 2)
    ideal = 0.0
    for pos in range(1, min(k, len(rel)) + 1):
        ideal += 1 / math.log(pos + 1, 2)
    return dcg / ideal


def random_instance(rng):
    n_q = int(rng.integers(1, 8))
    pool = [f"p{i}" for i in range(30)]
    ranked, qrels = {}, {}
    for qi in range(n_q):
        depth = int(rng.integers(0, 25))
        ranked[f"q{qi}"] = list(rng.permutation(pool)[:depth])
        qrels[f"q{qi}"] = frozenset(rng.permutation(pool)[: int(rng.integers(1, 5))])
    return ranked, qrels


def test_trivial_cases():
    qrels = {"q": frozenset({"a"})}
    assert recall_at_k({"q": ["a", "b"]}, qrels, 5) == 1.0
    assert recall_at_k({"q": ["b", "c"]}, qrels, 5) == 0.0
    assert ndcg_at_k({"q": ["a", "b"]}, qrels, 5) == 1.0


def test_rank_two_ndcg():
    assert abs(ndcg_at_k({"q": ["x", "a", "y"]}, {"q": frozenset({"a"})}, 5) - 1 / math.log2(3)) < 1e-12
    assert abs(1 / math.log2(3) - 0.63093) < 1e-5


def test_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ranked, qrels = random_instance(rng)
        for k in (1, 5, 20):
            r = np.mean([brute_recall(ranked[q], qrels[q], k) for q in sorted(ranked)])
            n = np.mean([brute_ndcg(ranked[q], qrels[q], k) for q in sorted(ranked)])
            assert recall_at_k(ranked, qrels, k) == r
            assert abs(ndcg_at_k(ranked, qrels, k) - n) < 1e-12


def test_monotone_in_k_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ranked, qrels = random_instance(rng)
        prev_r = prev_n = 0.0
        for k in range(1, 26):
            r, n = recall_at_k(ranked, qrels, k), ndcg_at_k(ranked, qrels, k)
            assert 0.0 <= r <= 1.0 and 0.0 <= n <= 1.0 + 1e-15
            assert r >= prev_r
            prev_r = r
            # nDCG is not monotone in k in general when several docs are relevant;
            # with one relevant doc it is
            if all(len(v) == 1 for v in qrels.values()):
                assert n >= prev_n - 1e-15
            prev_n = n


def test_missing_qrels_listed():
    with pytest.raises(EvalError, match="q9"):
        recall_at_k({"q1": ["a"], "q9": ["b"]}, {"q1": frozenset({"a"})}, 5)


def test_accepts_retrieval_runs(tmp_path):
    run = RetrievalRun({"q1": [ScoredHit("a", 2.0, 1), ScoredHit("b", 1.0, 2)]}, "single", 2)
    qrels = {"q1": frozenset({"b"})}
    direct = evaluate_run(run, qrels)
    run.write(tmp_path / "r.trec")
    write_qrels(tmp_path / "q.txt", qrels)
    again = evaluate_run(RetrievalRun.read(tmp_path / "r.trec"), read_qrels(tmp_path / "q.txt"))
    assert direct == again
    assert direct["recall@5"] == 1.0 and direct["ndcg@5"] == 1 / math.log2(3)


def test_qrels_format(tmp_path):
    (tmp_path / "q.txt").write_text("q1 0 a 1\nq1 0 b 0\nq2 0 c 2\n")
    assert read_qrels(tmp_path / "q.txt") == {"q1": frozenset({"a"}), "q2": frozenset({"c"})}
    (tmp_path / "bad.txt").write_text("q1 a 1\n")
    with pytest.raises(EvalError):
        read_qrels(tmp_path / "bad.txt")


def _query(i, spec):
    if spec is None:
        return QueryRecord(f"q{i}", "t", None, None, (f"g{i}",), "test")
    if spec.decade:
        c = TimeConstraint(spec, TimePoint(1990))
    elif spec.two_point:
        c = TimeConstraint(spec, TimePoint(1990), TimePoint(1995))
    else:
        c = TimeConstraint(spec, TimePoint(1990))
    return QueryRecord(f"q{i}", "t", spec, c, (f"g{i}",), "test")


def test_per_specifier_report():
    rng = np.random.default_rng(2)
    specs = list(Specifier) + [None]
    queries = [_query(i, specs[i % 8]) for i in range(80)]
    qrels = qrels_from_queries(queries)
    ranked = {}
    for q in queries:
        hit = q.specifier is Specifier.AFTER or rng.random() < 0.4
        ranked[q.query_id] = [f"g{q.query_id[1:]}"] if hit else ["zz"]
    rep = per_specifier_report(ranked, queries, qrels)
    assert len([s for s in rep if s is not None]) == 7 and None in rep
    assert rep[Specifier.AFTER] == 1.0
    temporal = [q for q in queries if q.temporal]
    sizes = {s: sum(q.specifier is s for q in temporal) for s in Specifier}
    weighted = sum(rep[s] * sizes[s] for s in Specifier) / len(temporal)
    overall = recall_at_k({q.query_id: ranked[q.query_id] for q in temporal}, qrels, 20)
    assert abs(weighted - overall) < 1e-12
    only_in = per_specifier_report({q.query_id: ranked[q.query_id] for q in queries
                                    if q.specifier is Specifier.IN}, queries, qrels)
    assert list(only_in) == [Specifier.IN]
    csv_rows = per_specifier_csv(rep).splitlines()
    assert csv_rows[0] == "specifier,recall_at_20" and csv_rows[-1].startswith("non_temporal,")


def report(vals):
    metrics = ("recall@5", "recall@20")
    return MetricsReport({d: dict(zip(metrics, v)) for d, v in vals.items()})


def test_compare_single_method():
    r = report({"temporal": (0.2, 0.5), "non_temporal": (0.6, 0.9)})
    t = compare_methods([("Base", r)])
    assert t.methods == ["Base"]
    assert t.column("temporal", "recall@20") == [0.5]
    assert t.column("average", "recall@5") == [pytest.approx(0.4, abs=1e-12)]


def test_compare_dominating_method():
    a = report({"temporal": (0.2, 0.5), "non_temporal": (0.6, 0.9)})
    b = report({"temporal": (0.3, 0.6), "non_temporal": (0.7, 0.95)})
    t = compare_methods([("A", a), ("B", b)])
    assert t.best == [1] * len(t.columns)
    assert t.to_text().count("*") == len(t.columns)
    for (d, m), j in zip(t.columns, range(len(t.columns))):
        if d == "average":
            for row, rep in zip(t.values, (a, b)):
                assert abs(row[j] - np.mean([rep.datasets[x][m] for x in rep.datasets])) < 1e-12


def test_compare_ragged_error():
    a = report({"temporal": (0.2, 0.5)})
    b = report({"non_temporal": (0.2, 0.5)})
    with pytest.raises(EvalError):
        compare_methods([("A", a), ("B", b)])
    with pytest.raises(EvalError):
        compare_methods([])


def test_csv_outputs():
    r = report({"temporal": (0.2, 0.5), "non_temporal": (0.6, 0.9)})
    lines = r.to_csv().splitlines()
    assert lines[0] == "dataset,recall@5,recall@20" and lines[-1] == "average,0.400000,0.700000"
    assert curve_csv([(1, "temporal", 0.25)]).splitlines() == ["merge_count,dataset,recall_at_20",
                                                               "1,temporal,0.250000"]
