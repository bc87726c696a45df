import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempmerge.timeparse import (Specifier, TimeConstraint, TimePoint, constraint_satisfied,
                                 parse_query)


# month-set oracle: a point or interval is the explicit set of (year, month) pairs it covers

def months(t1, t2=None):
    t2 = t2 or t1
    lo = (t1.year, t1.month or 1)
    hi = (t2.year, t2.month or 12)
    out = set()
    y, m = lo
    while (y, m) <= hi:
        out.add((y, m))
        y, m = (y, m + 1) if m < 12 else (y + 1, 1)
    return out


def oracle(c, fact):
    f = months(*fact)
    s = c.specifier
    if s in (Specifier.IN, Specifier.FROM_TO, Specifier.BETWEEN):
        return bool(f & months(c.t1, c.t2))
    if s is Specifier.AFTER:
        return max(f) > max(months(c.t1))
    if s is Specifier.BEFORE:
        return min(f) < min(months(c.t1))
    years = range(c.t1.year, c.t1.year + 5) if s is Specifier.IN_EARLY else range(c.t1.year + 5, c.t1.year + 10)
    return any(y in years for y, _ in f)


def test_case_study_query():
    spec, c = parse_query("Which position did Charles Clarke hold from May 1997 to May 2001?")
    assert spec is Specifier.FROM_TO
    assert c == TimeConstraint(Specifier.FROM_TO, TimePoint(1997, 5), TimePoint(2001, 5))


def test_decade_query():
    spec, c = parse_query("What school did X attend in early 1990s?")
    assert spec is Specifier.IN_EARLY and c.t1 == TimePoint(1990)


@pytest.mark.parametrize("text", [
    "What is the capital of France?",
    "Who was the mayor in the past?",
    "What happened last year?",
    "Where did she live in early times?",
])
def test_non_temporal_text(text):
    assert parse_query(text) is None


@pytest.mark.parametrize("text, spec", [
    ("Who led the team between 1990 and 2000?", Specifier.BETWEEN),
    ("Who led the team from 1990 to 2000 in 1995?", Specifier.FROM_TO),
    ("Where did Ana live in late 1980s?", Specifier.IN_LATE),
    ("Where did Ana live in the early 1980s", Specifier.IN_EARLY),
    ("Where did Ana live IN 1984?", Specifier.IN),
    ("Where did Ana live after Sept 1984?", Specifier.AFTER),
    ("Where did Ana live before december 1984?", Specifier.BEFORE),
])
def test_precedence_and_case(text, spec):
    assert parse_query(text)[0] is spec


def test_reversed_interval_is_absent():
    assert parse_query("from 2001 to 1997") is None


def test_month_abbreviation():
    _, c = parse_query("after Sept 1984")
    assert c.t1 == TimePoint(1984, 9)


def test_constraint_examples():
    fact = (TimePoint(1997), TimePoint(2010))
    c = TimeConstraint(Specifier.FROM_TO, TimePoint(1997, 5), TimePoint(2001, 5))
    assert constraint_satisfied(c, fact)
    assert not constraint_satisfied(TimeConstraint(Specifier.AFTER, TimePoint(2003)),
                                    (TimePoint(2001), TimePoint(2003)))
    assert constraint_satisfied(TimeConstraint(Specifier.AFTER, TimePoint(2003, 11)),
                                (TimePoint(2001), TimePoint(2003)))
    assert not constraint_satisfied(TimeConstraint(Specifier.BEFORE, TimePoint(2001)),
                                    (TimePoint(2001), TimePoint(2003)))


def test_between_against_month_oracle():
    rng = np.random.default_rng(0)
    c = TimeConstraint(Specifier.BETWEEN, TimePoint(1990), TimePoint(2000))
    for _ in range(200):
        a, b = sorted(rng.integers(1970, 2020, 2))
        ma, mb = (None, None) if rng.random() < 0.5 else (int(rng.integers(1, 13)), int(rng.integers(1, 13)))
        fact = (TimePoint(int(a), ma), TimePoint(int(b), mb))
        if months(*fact) == set():
            continue
        assert constraint_satisfied(c, fact) == oracle(c, fact)


def test_invalid_constraints():
    with pytest.raises(ValueError):
        TimeConstraint(Specifier.FROM_TO, TimePoint(1990))
    with pytest.raises(ValueError):
        TimeConstraint(Specifier.IN, TimePoint(1990), TimePoint(1991))
    with pytest.raises(ValueError):
        TimeConstraint(Specifier.BETWEEN, TimePoint(2000), TimePoint(1990))
    with pytest.raises(ValueError):
        TimeConstraint(Specifier.IN_EARLY, TimePoint(1995))
    with pytest.raises(ValueError):
        TimePoint(1990, 13)


def test_specifier_names():
    assert len(Specifier) == 7
    assert Specifier.parse("in early") is Specifier.IN_EARLY
    assert Specifier.parse("FROM_TO") is Specifier.FROM_TO
    with pytest.raises(ValueError):
        Specifier.parse("during")


def test_json_round_trip():
    c = TimeConstraint(Specifier.FROM_TO, TimePoint(1997, 5), TimePoint(2001))
    assert TimeConstraint.from_json(c.to_json()) == c


# -- property tests ------------------------------------------------------------------

months_opt = st.one_of(st.none(), st.integers(1, 12))


@st.composite
def constraints(draw):
    spec = draw(st.sampled_from(list(Specifier)))
    if spec.decade:
        return TimeConstraint(spec, TimePoint(draw(st.integers(188, 201)) * 10))
    y1 = draw(st.integers(1880, 2020))
    t1 = TimePoint(y1, draw(months_opt))
    if not spec.two_point:
        return TimeConstraint(spec, t1)
    y2 = draw(st.integers(y1 + 1, 2021))
    return TimeConstraint(spec, t1, TimePoint(y2, draw(months_opt)))


@st.composite
def facts(draw):
    a = draw(st.integers(1870, 2025))
    b = draw(st.integers(a + 1, 2030))
    return TimePoint(a, draw(months_opt)), TimePoint(b, draw(months_opt))


@settings(max_examples=300, deadline=None)
@given(constraints(), facts())
def test_satisfaction_matches_month_oracle(c, fact):
    assert constraint_satisfied(c, fact) == oracle(c, fact)


@settings(max_examples=300, deadline=None)
@given(constraints(), st.sampled_from(["Which team did {x} play for {p}?", "Where did {x} live {p}",
                                       "{p}, who employed {x}?"]))
def test_phrase_round_trip(c, template):
    text = template.format(x="Ana Lind", p=c.phrase())
    assert parse_query(text) == (c.specifier, c)


@settings(max_examples=300, deadline=None)
@given(constraints(), facts(), st.integers(0, 30), st.integers(0, 30))
def test_widening_is_monotone(c, fact, left, right):
    wider = (TimePoint(fact[0].year - left, fact[0].month), TimePoint(fact[1].year + right, fact[1].month))
    if constraint_satisfied(c, fact):
        assert constraint_satisfied(c, wider)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdefghij 0123456789", max_size=40))
def test_parser_never_raises(text):
    for prefix in ("", "in ", "after ", "from 1990 to "):
        parse_query(prefix + text)


def test_each_text_has_at_most_one_reading():
    # combined phrasings still resolve deterministically to the highest-precedence form
    for a, b in itertools.permutations(["in 1990", "after 1991", "between 1980 and 1985",
                                        "in late 1970s"], 2):
        res = parse_query(f"{a} or {b}")
        assert res is not None
        again = parse_query(f"{a} or {b}")
        assert res == again
