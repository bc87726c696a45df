"""Explicit time-specifier parsing and constraint evaluation.

Seven specifier forms are recognised::

    from <t1> to <t2>        between <t1> and <t2>
    in early <decade>s       in late <decade>s
    in <t>                   after <t>              before <t>

where ``<t>`` is a four-digit year optionally preceded by a month name
("May 1997").  Two-point forms take precedence over decade forms, which take
precedence over one-point forms, so each text maps to at most one specifier.

All interval arithmetic is done on a month grid: a bare year covers
January..December of that year.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Tuple


class Specifier(enum.Enum):
    FROM_TO = "from_to"
    IN = "in"
    BETWEEN = "between"
    AFTER = "after"
    BEFORE = "before"
    IN_EARLY = "in_early"
    IN_LATE = "in_late"

    @property
    def two_point(self) -> bool:
        return self in (Specifier.FROM_TO, Specifier.BETWEEN)

    @property
    def decade(self) -> bool:
        return self in (Specifier.IN_EARLY, Specifier.IN_LATE)

    @classmethod
    def parse(cls, name: str) -> "Specifier":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        for s in cls:
            if key in (s.value, s.name.lower()):
                return s
        raise ValueError(f"unknown specifier {name!r}")


MONTHS = (
    "january", "february", "march", "april", "may", "june",
    "july", "august", "september", "october", "november", "december",
)
_MONTH_INDEX = {m: i + 1 for i, m in enumerate(MONTHS)}
_MONTH_INDEX.update({m[:3]: i + 1 for i, m in enumerate(MONTHS)})
_MONTH_INDEX["sept"] = 9


@dataclass(frozen=True, order=False)
class TimePoint:
    year: int
    month: Optional[int] = None

    def __post_init__(self):
        if self.month is not None and not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")

    @property
    def first_month(self) -> int:
        """Absolute month index of the earliest month covered."""
        return self.year * 12 + ((self.month or 1) - 1)

    @property
    def last_month(self) -> int:
        return self.year * 12 + ((self.month or 12) - 1)

    def __str__(self) -> str:
        if self.month is None:
            return str(self.year)
        return f"{MONTHS[self.month - 1].capitalize()} {self.year}"

    def to_json(self) -> dict:
        return {"year": self.year, "month": self.month}

    @classmethod
    def from_json(cls, obj: dict) -> "TimePoint":
        return cls(int(obj["year"]), None if obj.get("month") is None else int(obj["month"]))


@dataclass(frozen=True)
class TimeConstraint:
    specifier: Specifier
    t1: TimePoint
    t2: Optional[TimePoint] = None

    def __post_init__(self):
        if self.specifier.two_point != (self.t2 is not None):
            raise ValueError(f"{self.specifier.value} constraint needs "
                             f"{'two' if self.specifier.two_point else 'one'} time point(s)")
        if self.t2 is not None and self.t1.first_month > self.t2.first_month:
            raise ValueError(f"reversed interval: {self.t1} > {self.t2}")
        if self.specifier.decade and (self.t1.year % 10 or self.t1.month is not None):
            raise ValueError(f"decade constraint needs a bare multiple-of-ten year, got {self.t1}")

    def window(self) -> Tuple[Optional[int], Optional[int]]:
        """Month window ``[lo, hi]`` a fact must intersect; ``None`` is unbounded."""
        s = self.specifier
        if s is Specifier.IN:
            return self.t1.first_month, self.t1.last_month
        if s.two_point:
            return self.t1.first_month, self.t2.last_month
        if s is Specifier.AFTER:
            return self.t1.last_month + 1, None
        if s is Specifier.BEFORE:
            return None, self.t1.first_month - 1
        start = self.t1.year if s is Specifier.IN_EARLY else self.t1.year + 5
        return start * 12, (start + 4) * 12 + 11

    def phrase(self) -> str:
        """Render the canonical surface form, e.g. ``"from May 1997 to 2001"``."""
        s = self.specifier
        if s is Specifier.FROM_TO:
            return f"from {self.t1} to {self.t2}"
        if s is Specifier.BETWEEN:
            return f"between {self.t1} and {self.t2}"
        if s is Specifier.IN_EARLY:
            return f"in early {self.t1.year}s"
        if s is Specifier.IN_LATE:
            return f"in late {self.t1.year}s"
        return f"{s.value} {self.t1}"

    def to_json(self) -> dict:
        return {
            "specifier": self.specifier.value,
            "t1": self.t1.to_json(),
            "t2": None if self.t2 is None else self.t2.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TimeConstraint":
        t2 = obj.get("t2")
        return cls(Specifier.parse(obj["specifier"]), TimePoint.from_json(obj["t1"]),
                   None if t2 is None else TimePoint.from_json(t2))


_MONTH_ALT = "|".join(sorted(_MONTH_INDEX, key=len, reverse=True))
_TIME = rf"(?:({_MONTH_ALT})\.?\s+)?(\d{{4}})(?![\w])"

# precedence order: two-point, decade, one-point
_PATTERNS = (
    (Specifier.FROM_TO, re.compile(rf"\bfrom\s+{_TIME}\s+(?:to|until|till)\s+{_TIME}", re.I)),
    (Specifier.BETWEEN, re.compile(rf"\bbetween\s+{_TIME}\s+and\s+{_TIME}", re.I)),
    (Specifier.IN_EARLY, re.compile(r"\bin\s+(?:the\s+)?early\s+(\d{3}0)'?s\b", re.I)),
    (Specifier.IN_LATE, re.compile(r"\bin\s+(?:the\s+)?late\s+(\d{3}0)'?s\b", re.I)),
    (Specifier.IN, re.compile(rf"\bin\s+{_TIME}", re.I)),
    (Specifier.AFTER, re.compile(rf"\bafter\s+{_TIME}", re.I)),
    (Specifier.BEFORE, re.compile(rf"\bbefore\s+{_TIME}", re.I)),
)


def _point(month: Optional[str], year: str) -> TimePoint:
    return TimePoint(int(year), None if month is None else _MONTH_INDEX[month.lower()])


def parse_query(text: str) -> Optional[Tuple[Specifier, TimeConstraint]]:
    """Return ``(specifier, constraint)`` for the first matching form, else ``None``.

    Relative or implicit expressions ("in the past", "last year") and malformed
    intervals (end before start) yield ``None``.
    """
    for spec, pattern in _PATTERNS:
        m = pattern.search(text)
        if m is None:
            continue
        g = m.groups()
        try:
            if spec.two_point:
                c = TimeConstraint(spec, _point(g[0], g[1]), _point(g[2], g[3]))
            elif spec.decade:
                c = TimeConstraint(spec, TimePoint(int(g[0])))
            else:
                c = TimeConstraint(spec, _point(g[0], g[1]))
        except ValueError:
            return None
        return spec, c
    return None


def constraint_satisfied(c: TimeConstraint, fact: Tuple[TimePoint, TimePoint]) -> bool:
    """Overlap test between a query constraint and a fact interval.

    ``after t`` requires the fact to end strictly after ``t``; ``before t``
    requires it to start strictly before ``t``.  Every other form succeeds
    when the query window intersects the fact.
    """
    start, end = fact
    f_lo, f_hi = start.first_month, end.last_month
    if f_lo > f_hi:
        raise ValueError(f"fact starts after it ends: {start} > {end}")
    lo, hi = c.window()
    if lo is not None and f_hi < lo:
        return False
    if hi is not None and f_lo > hi:
        return False
    return True
