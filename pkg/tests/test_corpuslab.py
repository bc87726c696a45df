import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempmerge.corpuslab import (AUGMENTED_COUNTS, FREQUENCY_ORDER, ORIGINAL_COUNTS, AugmentationError,
                                 CorpusConfig, GenerationError, QueryRecord, SpecifierGroup,
                                 augment_split, balance_augment, build_world, chunk_document,
                                 generate_corpus, partition, read_corpus, sample_by_specifier,
                                 specifier_counts, write_corpus)
from tempmerge.timeparse import Specifier, TimeConstraint, TimePoint

from test_timeparse import oracle


def fact_table(world):
    """passage id -> (entity, fact) for every timeline fact."""
    return {f.passage_id: (e, f) for e in world.entities for f in e.facts}


# -- chunking --------------------------------------------------------------------------

def test_chunk_examples():
    words = [f"w{i}" for i in range(250)]
    chunks = chunk_document(" ".join(words), 100)
    assert [c.word_count for c in chunks] == [100, 100, 50]
    text = " ".join(words[:100])
    one = chunk_document(text, 100)
    assert len(one) == 1 and one[0].text == text
    assert chunk_document("", 100) == []
    assert chunk_document("  \n\t ", 100) == []
    with pytest.raises(ValueError):
        chunk_document("a b", 0)


def test_chunk_reassembly_random_documents():
    rng = np.random.default_rng(11)
    alphabet = np.array(list("abcdefghéø \n\t"))
    for _ in range(1000):
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 400))))
        size = int(rng.integers(1, 60))
        chunks = chunk_document(text, size)
        assert " ".join(c.text for c in chunks).split() == text.split()
        assert all(c.word_count == size for c in chunks[:-1])
        assert all(1 <= c.word_count <= size for c in chunks)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="xyz", min_size=1, max_size=5), max_size=80), st.integers(1, 30))
def test_chunk_word_counts(words, size):
    chunks = chunk_document(" ".join(words), size)
    assert sum(c.word_count for c in chunks) == len(words)


# -- generation --------------------------------------------------------------------------

def test_determinism(tmp_path, small_config):
    for name in ("a", "b"):
        p, q = generate_corpus(small_config)
        write_corpus(tmp_path / name, p, q)
    for f in ("passages.jsonl", "queries.jsonl"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_default_counts(default_world):
    test = [q for q in default_world.queries if q.split == "test"]
    counts = specifier_counts(test)
    for s in Specifier:
        assert counts[s.value]["test"] == 300
    assert sum(q.temporal for q in test) == 2100
    assert counts["non_temporal"]["test"] == 600
    assert 1500 <= len(default_world.passages) <= 2500


def test_passage_invariants(default_world):
    ids = [p.passage_id for p in default_world.passages]
    assert len(set(ids)) == len(ids)
    for p in default_world.passages:
        assert 1 <= p.word_count <= 100
        assert p.word_count == len(p.text.split())


def test_timelines_disjoint(default_world):
    for e in default_world.entities:
        spans = [(f.start.first_month, f.end.last_month) for f in e.facts]
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert a0 <= a1 < b0 <= b1


def test_gold_soundness_against_brute_force(default_world):
    facts = fact_table(default_world)
    queries = (default_world.queries + augment_split(default_world, "train")
               + augment_split(default_world, "dev"))
    for q in queries:
        if not q.temporal:
            continue
        (gold,) = q.gold_passage_ids
        ent, fact = facts[gold]
        assert ent.name in q.text
        satisfied = [f.passage_id for f in ent.facts if oracle(q.constraint, f.interval)]
        assert satisfied == [gold], q.query_id


def test_case_study_shaped_example(default_world):
    # a from/to query inside one fact's interval resolves to that fact alone
    facts = fact_table(default_world)
    q = next(q for q in default_world.queries if q.specifier is Specifier.FROM_TO)
    ent, fact = facts[q.gold_passage_ids[0]]
    assert fact.start.first_month <= q.constraint.t2.last_month
    assert q.constraint.t1.first_month <= fact.end.last_month
    assert str(fact.start.year) in next(p.text for p in default_world.passages
                                        if p.passage_id == fact.passage_id)


def test_nontemporal_gold_holds_attribute(default_world):
    pidx = default_world.passage_index()
    by_name = {e.name: e for e in default_world.entities}
    for q in default_world.queries:
        if q.temporal:
            continue
        ent = next(e for n, e in by_name.items() if n in q.text)
        text = pidx[q.gold_passage_ids[0]].text
        assert any(v in text for v in ent.attributes.values())


def test_no_duplicate_query_texts(default_world):
    queries = ([q for q in default_world.queries if q.split == "test"]
               + augment_split(default_world, "train") + augment_split(default_world, "dev"))
    texts = [q.text for q in queries]
    assert len(set(texts)) == len(texts)


def test_narrow_year_range_fails():
    with pytest.raises(GenerationError, match="year_range"):
        build_world(CorpusConfig(year_range=(1990, 2000), facts_per_entity=20))


def test_invalid_config():
    with pytest.raises(ValueError):
        CorpusConfig(entity_count=0)
    with pytest.raises(ValueError):
        CorpusConfig(year_range=(2000, 1990))


def test_query_record_validation():
    c = TimeConstraint(Specifier.IN, TimePoint(1990))
    with pytest.raises(ValueError):
        QueryRecord("q", "t", Specifier.IN, None, ("p",), "test")
    with pytest.raises(ValueError):
        QueryRecord("q", "t", Specifier.AFTER, c, ("p",), "test")
    with pytest.raises(ValueError):
        QueryRecord("q", "t", None, None, (), "test")
    with pytest.raises(ValueError):
        QueryRecord("q", "t", None, None, ("p",), "holdout")


# -- grouping and augmentation ----------------------------------------------------------

def _q(i, spec):
    c = None if spec is None else TimeConstraint(spec, TimePoint(1990, None) if not spec.decade else TimePoint(1990),
                                                 TimePoint(1995) if spec.two_point else None)
    return QueryRecord(f"q{i}", f"text {i}", spec, c, ("p1",), "train")


def test_sample_by_specifier():
    qs = [_q(0, Specifier.IN), _q(1, Specifier.AFTER), _q(2, Specifier.IN), _q(3, Specifier.AFTER),
          _q(4, Specifier.IN)]
    g = sample_by_specifier(qs, Specifier.AFTER)
    assert [q.query_id for q in g.queries] == ["q1", "q3"]
    assert len(sample_by_specifier([], Specifier.IN)) == 0


def test_partition_is_exact(default_world):
    for split in ("train", "dev", "test"):
        qs = augment_split(default_world, split) if split != "test" else \
            [q for q in default_world.queries if q.split == "test"]
        groups, rest = partition(qs)
        ids = [q.query_id for g in groups.values() for q in g.queries] + [q.query_id for q in rest]
        assert sorted(ids) == sorted(q.query_id for q in qs)
        assert sum(len(g) for g in groups.values()) + len(rest) == len(qs)


def test_group_rejects_foreign_member():
    with pytest.raises(ValueError):
        SpecifierGroup(Specifier.IN, (_q(0, Specifier.AFTER),))


def test_only_rare_specifiers_grow(small_world):
    qs = [q for q in small_world.queries if q.split == "train"]
    groups, _ = partition(qs)
    grown = balance_augment([groups[s] for s in Specifier], small_world.config.augment_targets(),
                            seed=1, world=small_world)
    grew = {g.specifier for g in grown if len(g) > len(groups[g.specifier])}
    assert grew == {Specifier.AFTER, Specifier.BEFORE, Specifier.IN_EARLY, Specifier.IN_LATE}
    for g in grown:
        if g.specifier not in grew:
            assert g is groups[g.specifier]


def test_group_above_target_passes_through(small_world):
    groups, _ = partition([q for q in small_world.queries if q.split == "train"])
    g = groups[Specifier.FROM_TO]
    (out,) = balance_augment([g], 1, seed=0, world=small_world)
    assert out is g


def test_augmented_gold_rechecked(small_world):
    facts = fact_table(small_world)
    aug = [q for q in augment_split(small_world, "train") if "-aug-" in q.query_id]
    assert aug
    for q in aug:
        ent, fact = facts[q.gold_passage_ids[0]]
        assert [f.passage_id for f in ent.facts if oracle(q.constraint, f.interval)] == [fact.passage_id]
    after = [q for q in aug if q.specifier is Specifier.AFTER]
    for q in after:
        ent, fact = facts[q.gold_passage_ids[0]]
        assert fact is ent.facts[-1]


def test_augmentation_deterministic(small_world):
    a = augment_split(small_world, "train", seed=5)
    b = augment_split(small_world, "train", seed=5)
    assert [q.to_json() for q in a] == [q.to_json() for q in b]


def test_augmentation_error_names_specifier():
    w = build_world(CorpusConfig(entity_count=3, facts_per_entity=3, queries_per_specifier=1,
                                 nontemporal_query_count=1, train_scale=1e-6, seed=2))
    groups, _ = partition([q for q in w.queries if q.split == "train"])
    with pytest.raises(AugmentationError, match="in_early"):
        balance_augment([groups[Specifier.IN_EARLY]], 10_000, seed=0, world=w)


def test_frequency_order_mirrors_counts():
    assert FREQUENCY_ORDER[:2] == (Specifier.FROM_TO, Specifier.IN)
    assert ORIGINAL_COUNTS[Specifier.FROM_TO][0] == 11676 and ORIGINAL_COUNTS[Specifier.IN][0] == 5759
    sizes = [AUGMENTED_COUNTS[s][0] for s in FREQUENCY_ORDER]
    assert sizes == sorted(sizes, reverse=True)
    for s in (Specifier.FROM_TO, Specifier.IN, Specifier.BETWEEN):
        assert AUGMENTED_COUNTS[s] == ORIGINAL_COUNTS[s]


def test_augment_targets_honoured(small_world):
    targets = small_world.config.augment_targets("train")
    counts = specifier_counts(augment_split(small_world, "train"))
    for s in Specifier:
        assert counts[s.value]["train"] >= targets[s]


# -- serialization ------------------------------------------------------------------------

def test_corpus_round_trip(tmp_path, small_world):
    write_corpus(tmp_path, small_world.passages, small_world.queries)
    p, q = read_corpus(tmp_path)
    assert p == small_world.passages
    assert q == small_world.queries
    raw = (tmp_path / "passages.jsonl").read_bytes()
    assert b"\r\n" not in raw
    first = json.loads(raw.splitlines()[0])
    assert set(first) == {"passage_id", "doc_id", "text"}
    qfirst = json.loads((tmp_path / "queries.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert set(qfirst) == {"query_id", "text", "specifier", "constraint", "gold_passage_ids", "split"}


def test_read_rejects_dangling_gold(tmp_path, small_world):
    write_corpus(tmp_path, small_world.passages[1:], small_world.queries)
    with pytest.raises(ValueError, match="gold"):
        read_corpus(tmp_path)
