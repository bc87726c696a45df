"""Synthetic temporal-QA world: entities with disjoint career timelines.

Each entity owns one career relation (positions held, teams played for,
employers, residences) realised as ``facts_per_entity`` non-overlapping
year intervals, a short biography carrying time-invariant attributes, and a
few distractor notes that mention years without stating any fact.  One
document per fact, so every temporal query has exactly one gold passage.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .timeparse import Specifier, TimeConstraint, TimePoint, constraint_satisfied

SPLITS = ("train", "dev", "test")

# Query counts per specifier (train, dev) before and after augmentation.
ORIGINAL_COUNTS = {
    Specifier.FROM_TO: (11676, 2486),
    Specifier.IN: (5759, 1233),
    Specifier.BETWEEN: (4888, 1054),
    Specifier.AFTER: (903, 201),
    Specifier.BEFORE: (973, 181),
    Specifier.IN_EARLY: (309, 82),
    Specifier.IN_LATE: (473, 91),
}
AUGMENTED_COUNTS = {
    Specifier.FROM_TO: (11676, 2486),
    Specifier.IN: (5759, 1233),
    Specifier.BETWEEN: (4888, 1054),
    Specifier.AFTER: (2741, 587),
    Specifier.BEFORE: (2867, 609),
    Specifier.IN_EARLY: (1885, 438),
    Specifier.IN_LATE: (2392, 474),
}
# order of Table-1 frequency, most to least frequent
FREQUENCY_ORDER = tuple(sorted(AUGMENTED_COUNTS, key=lambda s: -AUGMENTED_COUNTS[s][0]))


class GenerationError(ValueError):
    pass


class AugmentationError(GenerationError):
    pass


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    text: str
    word_count: int

    def to_json(self) -> dict:
        return {"passage_id": self.passage_id, "doc_id": self.doc_id, "text": self.text}

    @classmethod
    def from_json(cls, obj: dict) -> "Passage":
        return cls(obj["passage_id"], obj["doc_id"], obj["text"], len(obj["text"].split()))


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    specifier: Optional[Specifier]
    constraint: Optional[TimeConstraint]
    gold_passage_ids: Tuple[str, ...]
    split: str

    def __post_init__(self):
        if (self.specifier is None) != (self.constraint is None):
            raise ValueError(f"{self.query_id}: specifier and constraint must be both set or both absent")
        if self.constraint is not None and self.constraint.specifier is not self.specifier:
            raise ValueError(f"{self.query_id}: constraint specifier mismatch")
        if not self.gold_passage_ids:
            raise ValueError(f"{self.query_id}: empty gold set")
        if self.split not in SPLITS:
            raise ValueError(f"{self.query_id}: unknown split {self.split!r}")

    @property
    def temporal(self) -> bool:
        return self.specifier is not None

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "specifier": None if self.specifier is None else self.specifier.value,
            "constraint": None if self.constraint is None else self.constraint.to_json(),
            "gold_passage_ids": list(self.gold_passage_ids),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QueryRecord":
        spec = obj.get("specifier")
        con = obj.get("constraint")
        return cls(
            obj["query_id"], obj["text"],
            None if spec is None else Specifier.parse(spec),
            None if con is None else TimeConstraint.from_json(con),
            tuple(obj["gold_passage_ids"]), obj["split"],
        )


@dataclass
class CorpusConfig:
    entity_count: int = 80
    facts_per_entity: int = 20
    year_range: Tuple[int, int] = (1880, 2020)
    queries_per_specifier: int = 300
    nontemporal_query_count: int = 600
    chunk_size: int = 100
    seed: int = 7
    # train/dev sizes as a fraction of the original per-specifier counts
    train_scale: float = 0.1
    distractors_per_entity: int = 3
    month_probability: float = 0.3

    def __post_init__(self):
        self.year_range = tuple(int(y) for y in self.year_range)
        for name in ("entity_count", "facts_per_entity", "queries_per_specifier",
                     "nontemporal_query_count", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.year_range[0] >= self.year_range[1]:
            raise ValueError(f"year_range must satisfy min < max, got {self.year_range}")

    def split_counts(self, counts: Mapping = ORIGINAL_COUNTS) -> Dict[Specifier, Dict[str, int]]:
        out = {}
        for s, (tr, dv) in counts.items():
            out[s] = {"train": max(1, int(tr * self.train_scale + 0.5)),
                      "dev": max(1, int(dv * self.train_scale + 0.5)),
                      "test": self.queries_per_specifier}
        return out

    def augment_targets(self, split: str = "train") -> Dict[Specifier, int]:
        return {s: c[split] for s, c in self.split_counts(AUGMENTED_COUNTS).items()}


@dataclass(frozen=True)
class SpecifierGroup:
    specifier: Specifier
    queries: Tuple[QueryRecord, ...]

    def __post_init__(self):
        for q in self.queries:
            if q.specifier is not self.specifier:
                raise ValueError(f"{q.query_id} carries {q.specifier}, not {self.specifier}")

    def __len__(self) -> int:
        return len(self.queries)


# -- chunking ----------------------------------------------------------------

def chunk_document(text: str, chunk_size: int = 100, doc_id: str = "doc",
                   id_prefix: Optional[str] = None) -> List[Passage]:
    """Greedy split into runs of ``chunk_size`` whitespace-delimited words."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    words = text.split()
    prefix = doc_id if id_prefix is None else id_prefix
    out = []
    for i, start in enumerate(range(0, len(words), chunk_size)):
        piece = words[start: start + chunk_size]
        out.append(Passage(f"{prefix}-c{i}", doc_id, " ".join(piece), len(piece)))
    return out


# -- world vocabulary ----------------------------------------------------------

FIRST_NAMES = (
    "Charles", "Maria", "Henrik", "Amara", "Tomas", "Leila", "Victor", "Ingrid", "Rafael", "Noor",
    "Edwin", "Sofia", "Kenji", "Greta", "Oscar", "Helena", "Dmitri", "Alma", "Julian", "Freya",
    "Mateo", "Irene", "Anton", "Clara", "Felix", "Yara", "Bruno", "Elise", "Hugo", "Nadia",
    "Lucas", "Vera", "Samuel", "Agnes", "Pavel", "Lena", "Omar", "Thea", "Marcus", "Ruth",
)
LAST_NAMES = (
    "Clarke", "Lindqvist", "Okafor", "Moreau", "Castillo", "Haddad", "Novak", "Brennan", "Sato",
    "Kowalski", "Ferreira", "Albrecht", "Dunmore", "Petrov", "Whitcombe", "Ishikawa", "Larsen",
    "Mbeki", "Rossi", "Vance", "Quintero", "Halloran", "Varga", "Esposito", "Thorne", "Adeyemi",
    "Bergstrom", "Calder", "Demir", "Fairweather", "Grant", "Holm", "Ibarra", "Jansen", "Keller",
    "Laurent", "Mercer", "Nakamura", "Olsen", "Pryce",
)
CITIES = (
    "Norwich", "Lisbon", "Kraków", "Osaka", "Valparaíso", "Tromsø", "Lagos", "Marseille", "Bergen",
    "Toledo", "Cork", "Antwerp", "Leeds", "Turin", "Dakar", "Hobart", "Quebec", "Tbilisi", "Porto",
    "Gdansk", "Bremen", "Halifax", "Cusco", "Sapporo", "Aarhus", "Split", "Galway", "Lyon",
)
COUNTRIES = (
    "British", "Portuguese", "Polish", "Japanese", "Chilean", "Norwegian", "Nigerian", "French",
    "Spanish", "Irish", "Belgian", "Italian", "Senegalese", "Australian", "Canadian", "Georgian",
)
OCCUPATIONS = (
    "lawyer", "economist", "engineer", "historian", "physician", "journalist", "architect",
    "diplomat", "chemist", "teacher", "novelist", "banker", "surveyor", "pharmacist",
)
SCHOOL_STEMS = ("Ashford", "Kingsley", "Marlow", "Redcliffe", "Stanmore", "Wexley", "Brookfield",
                "Castleton", "Elmhurst", "Fernbank", "Hollis", "Linton")
SCHOOL_KINDS = ("School", "College", "University", "Academy")

ROLE_TITLES = ("Minister", "Secretary", "Director", "Chair", "Governor", "Commissioner",
               "Deputy Minister", "Chief Adviser", "Member", "Head", "Treasurer", "Speaker")
ROLE_DOMAINS = ("Finance", "Parliament", "Trade", "Health", "Education", "Defence", "Transport",
                "Culture", "Energy", "Justice", "Agriculture", "Labour", "Housing", "Fisheries")
TEAM_MASCOTS = ("Rovers", "United", "Athletic", "Wanderers", "Rangers", "Albion", "City",
                "Harriers", "Lions", "Mariners", "Falcons", "Dynamo")
ORG_KINDS = ("Bank", "Railway Company", "Shipping Line", "Press", "Insurance Group", "Mining Company",
             "Trading House", "Observatory", "Museum", "Foundation", "Institute", "Gazette")

RELATIONS = {
    "position": {
        "fact": ("{name} held the position of {value} from {s} until {e}.",
                 "{name} served as {value} from {s} to {e}.",
                 "From {s} until {e}, {name} was {value}."),
        "query": ("Which position did {name} hold {when}?",
                  "What position did {name} hold {when}?"),
    },
    "team": {
        "fact": ("{name} played for {value} from {s} until {e}.",
                 "{name} was a player of {value} from {s} to {e}.",
                 "From {s} until {e}, {name} played for {value}."),
        "query": ("Which team did {name} play for {when}?",
                  "What team did {name} play for {when}?"),
    },
    "employer": {
        "fact": ("{name} worked for {value} from {s} until {e}.",
                 "{name} was employed by {value} from {s} to {e}.",
                 "From {s} until {e}, {name} worked for {value}."),
        "query": ("Which organization did {name} work for {when}?",
                  "Who employed {name} {when}?"),
    },
    "residence": {
        "fact": ("{name} lived in {value} from {s} until {e}.",
                 "{name} resided in {value} from {s} to {e}.",
                 "From {s} until {e}, {name} lived in {value}."),
        "query": ("Where did {name} live {when}?",
                  "In which city did {name} live {when}?"),
    },
}
FACT_FILLERS = (
    "The appointment was reported widely at the time.",
    "Colleagues described the period as demanding.",
    "Records from this period are kept in the national archive.",
    "{first} later recalled this time with mixed feelings.",
    "The move surprised several observers.",
    "It was one of several roles in a long career.",
    "Little else is documented about this stage.",
)

ATTRIBUTES = {
    "birthplace": ("{name} was born in {value}.",
                   ("Where was {name} born?", "In which city was {name} born?",
                    "What is the birthplace of {name}?")),
    "nationality": ("{name} holds {value} nationality.",
                    ("What is the nationality of {name}?", "What nationality does {name} hold?",
                     "Which nationality is {name}?")),
    "school": ("{name} studied at {value}.",
               ("Which school did {name} attend?", "Where did {name} study?",
                "Which institution did {name} study at?")),
    "spouse": ("{name} is married to {value}.",
               ("Who is {name} married to?", "Who is the spouse of {name}?",
                "Whom did {name} marry?")),
    "occupation": ("By profession, {name} is a {value}.",
                   ("What is the profession of {name}?", "What does {name} do by profession?",
                    "What is the occupation of {name}?")),
}
BIO_FILLERS = (
    "{first} is known for a quiet public manner.",
    "Friends describe {first} as patient and curious.",
    "{first} enjoys walking and reading history.",
    "Several portraits of {first} hang in regional galleries.",
    "{first} rarely gives interviews.",
    "A biography of {first} appeared some years ago.",
    "{first} keeps a large private library.",
    "Local newspapers have profiled {first} on occasion.",
)
DISTRACTOR_EVENTS = (
    "In {y}, {name} gave a long interview to a regional newspaper.",
    "In {y}, {name} visited {city} for a conference.",
    "{name} received an honorary award in {y}.",
    "A portrait of {name} was painted in {y}.",
    "In {y}, {name} published a short memoir.",
    "{name} attended a public ceremony in {y}.",
    "In {y}, {name} donated books to a library in {city}.",
)


@dataclass
class Fact:
    value: str
    start: TimePoint
    end: TimePoint
    passage_id: str = ""

    @property
    def interval(self) -> Tuple[TimePoint, TimePoint]:
        return self.start, self.end


@dataclass
class Entity:
    index: int
    name: str
    relation: str
    facts: List[Fact]
    attributes: Dict[str, str]
    attribute_passages: Dict[str, str] = field(default_factory=dict)

    @property
    def first(self) -> str:
        return self.name.split()[0]


@dataclass
class World:
    config: CorpusConfig
    entities: List[Entity]
    passages: List[Passage]
    queries: List[QueryRecord]

    def passage_index(self) -> Dict[str, Passage]:
        return {p.passage_id: p for p in self.passages}


# -- generation ----------------------------------------------------------------

def _timeline(rng: np.random.Generator, n: int, lo: int, hi: int) -> List[Tuple[int, int]]:
    years = np.arange(lo, hi + 1)
    if len(years) < 2 * n:
        raise GenerationError(
            f"year_range {lo}..{hi} holds {len(years)} years; {n} disjoint facts need >= {2 * n}")
    cuts = np.sort(rng.choice(years, size=2 * n, replace=False))
    return [(int(cuts[2 * i]), int(cuts[2 * i + 1])) for i in range(n)]


def _role_values(rng, relation: str, n: int) -> List[str]:
    if relation == "position":
        pool = [f"{t} of {d}" for t in ROLE_TITLES for d in ROLE_DOMAINS]
    elif relation == "team":
        pool = [f"{c} {m}" for c in CITIES for m in TEAM_MASCOTS]
    elif relation == "employer":
        pool = [f"the {c} {k}" for c in CITIES for k in ORG_KINDS]
    else:
        pool = list(CITIES)
    idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
    return [pool[i] for i in idx]


def _make_entities(cfg: CorpusConfig, rng: np.random.Generator) -> List[Entity]:
    pairs = [(f, l) for f in FIRST_NAMES for l in LAST_NAMES]
    if cfg.entity_count > len(pairs):
        raise GenerationError(f"entity_count {cfg.entity_count} exceeds {len(pairs)} available names")
    chosen = rng.choice(len(pairs), size=cfg.entity_count, replace=False)
    relations = list(RELATIONS)
    entities = []
    for i, pi in enumerate(chosen):
        name = " ".join(pairs[pi])
        relation = relations[int(rng.integers(len(relations)))]
        spans = _timeline(rng, cfg.facts_per_entity, *cfg.year_range)
        values = _role_values(rng, relation, cfg.facts_per_entity)
        facts = [Fact(v, TimePoint(s), TimePoint(e)) for v, (s, e) in zip(values, spans)]
        spouse = f"{FIRST_NAMES[int(rng.integers(len(FIRST_NAMES)))]} {LAST_NAMES[int(rng.integers(len(LAST_NAMES)))]}"
        attrs = {
            "birthplace": CITIES[int(rng.integers(len(CITIES)))],
            "nationality": COUNTRIES[int(rng.integers(len(COUNTRIES)))],
            "school": f"{SCHOOL_STEMS[int(rng.integers(len(SCHOOL_STEMS)))]} "
                      f"{SCHOOL_KINDS[int(rng.integers(len(SCHOOL_KINDS)))]}",
            "spouse": spouse,
            "occupation": OCCUPATIONS[int(rng.integers(len(OCCUPATIONS)))],
        }
        entities.append(Entity(i, name, relation, facts, attrs))
    return entities


class _PassageWriter:
    def __init__(self, chunk_size: int):
        self.chunk_size = chunk_size
        self.passages: List[Passage] = []

    def add(self, doc_id: str, text: str) -> List[Passage]:
        chunks = chunk_document(text, self.chunk_size, doc_id)
        out = []
        for c in chunks:
            p = Passage(f"p{len(self.passages):06d}", doc_id, c.text, c.word_count)
            self.passages.append(p)
            out.append(p)
        return out


def _render_documents(cfg: CorpusConfig, entities: List[Entity], rng) -> List[Passage]:
    writer = _PassageWriter(cfg.chunk_size)
    for ent in entities:
        tmpl = RELATIONS[ent.relation]["fact"]
        for j, fact in enumerate(ent.facts):
            main = tmpl[int(rng.integers(len(tmpl)))].format(
                name=ent.name, value=fact.value, s=fact.start, e=fact.end)
            n_fill = int(rng.integers(1, 3))
            fills = [FACT_FILLERS[int(k)].format(first=ent.first)
                     for k in rng.choice(len(FACT_FILLERS), size=n_fill, replace=False)]
            fact.passage_id = writer.add(f"e{ent.index:04d}-fact{j:03d}", " ".join([main] + fills))[0].passage_id

        # biography: attribute sentences interleaved with filler; gold = chunk holding the value
        sentences: List[Tuple[Optional[str], str]] = []
        attr_order = list(ATTRIBUTES)
        rng.shuffle(attr_order)
        fillers = rng.permutation(len(BIO_FILLERS))
        for k, attr in enumerate(attr_order):
            sentences.append((attr, ATTRIBUTES[attr][0].format(name=ent.name, value=ent.attributes[attr])))
            sentences.append((None, BIO_FILLERS[int(fillers[k % len(fillers)])].format(first=ent.first)))
        text = " ".join(s for _, s in sentences)
        chunks = writer.add(f"e{ent.index:04d}-bio", text)
        offset = 0
        for attr, s in sentences:
            if attr is not None:
                value_words = len(s.split()) - 1  # the value ends the sentence
                ent.attribute_passages[attr] = chunks[min((offset + value_words) // cfg.chunk_size,
                                                          len(chunks) - 1)].passage_id
            offset += len(s.split())

        for j in range(cfg.distractors_per_entity):
            events = rng.choice(len(DISTRACTOR_EVENTS), size=2, replace=False)
            lines = []
            for ev in events:
                y = int(rng.integers(cfg.year_range[0], cfg.year_range[1] + 1))
                city = CITIES[int(rng.integers(len(CITIES)))]
                lines.append(DISTRACTOR_EVENTS[int(ev)].format(name=ent.name, y=y, city=city))
            writer.add(f"e{ent.index:04d}-note{j:02d}", " ".join(lines))
    return writer.passages


def _random_point(rng, year: int, month_p: float, lo_month: int = 1, hi_month: int = 12) -> TimePoint:
    if rng.random() < month_p:
        return TimePoint(year, int(rng.integers(lo_month, hi_month + 1)))
    return TimePoint(year)


def _propose(spec: Specifier, ent: Entity, rng, cfg: CorpusConfig) -> Optional[Tuple[TimeConstraint, Fact]]:
    facts = ent.facts
    mp = cfg.month_probability
    if spec is Specifier.IN:
        f = facts[int(rng.integers(len(facts)))]
        return TimeConstraint(spec, _random_point(rng, int(rng.integers(f.start.year, f.end.year + 1)), mp)), f
    if spec.two_point:
        f = facts[int(rng.integers(len(facts)))]
        a, b = sorted(int(y) for y in rng.choice(np.arange(f.start.year, f.end.year + 1), 2, replace=False))
        return TimeConstraint(spec, _random_point(rng, a, mp), _random_point(rng, b, mp)), f
    if spec is Specifier.AFTER:
        f = facts[-1]
        lo = facts[-2].end.year if len(facts) > 1 else f.start.year
        return TimeConstraint(spec, _random_point(rng, int(rng.integers(lo, f.end.year)), mp)), f
    if spec is Specifier.BEFORE:
        f = facts[0]
        hi = facts[1].start.year if len(facts) > 1 else f.end.year
        return TimeConstraint(spec, _random_point(rng, int(rng.integers(f.start.year + 1, hi + 1)), mp)), f
    # decade forms: any decade whose half intersects exactly one fact
    lo_dec = cfg.year_range[0] // 10 * 10
    options = []
    for d in range(lo_dec, cfg.year_range[1] + 1, 10):
        c = TimeConstraint(spec, TimePoint(d))
        hits = [f for f in facts if constraint_satisfied(c, f.interval)]
        if len(hits) == 1:
            options.append((c, hits[0]))
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def _temporal_query(spec: Specifier, entities: Sequence[Entity], rng, cfg: CorpusConfig,
                    taken: set, max_tries: int = 200) -> Optional[Tuple[str, TimeConstraint, Entity, Fact]]:
    for _ in range(max_tries):
        ent = entities[int(rng.integers(len(entities)))]
        proposal = _propose(spec, ent, rng, cfg)
        if proposal is None:
            continue
        c, gold = proposal
        hits = [f for f in ent.facts if constraint_satisfied(c, f.interval)]
        if hits != [gold]:
            continue
        tmpl = RELATIONS[ent.relation]["query"]
        text = tmpl[int(rng.integers(len(tmpl)))].format(name=ent.name, when=c.phrase())
        if text in taken:
            continue
        taken.add(text)
        return text, c, ent, gold
    return None


def build_world(config: CorpusConfig) -> World:
    """Deterministically generate entities, passages and all query splits."""
    rng = np.random.default_rng(config.seed)
    entities = _make_entities(config, rng)
    passages = _render_documents(config, entities, rng)

    queries: List[QueryRecord] = []
    taken: set = set()
    counts = config.split_counts(ORIGINAL_COUNTS)
    for split in SPLITS:
        for spec in Specifier:
            for i in range(counts[spec][split]):
                made = _temporal_query(spec, entities, rng, config, taken)
                if made is None:
                    raise GenerationError(f"cannot generate a unique {spec.value} query "
                                          f"({split} #{i}); enlarge the world")
                text, c, _, gold = made
                queries.append(QueryRecord(f"{split}-{spec.value}-{i:05d}", text, spec, c,
                                           (gold.passage_id,), split))

    # non-temporal: every (entity, attribute, template) combination at most once
    combos = [(e, a, t) for e in range(len(entities)) for a in ATTRIBUTES
              for t in range(len(ATTRIBUTES[a][1]))]
    order = rng.permutation(len(combos))
    n_test = config.nontemporal_query_count
    n_train, n_dev = (2 * n_test) // 3, max(1, n_test // 3)
    if n_test + n_train + n_dev > len(combos):
        raise GenerationError(f"{n_test + n_train + n_dev} non-temporal queries requested but only "
                              f"{len(combos)} distinct ones exist")
    cursor = 0
    for split, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        for i in range(n):
            e, a, t = combos[order[cursor]]
            cursor += 1
            ent = entities[e]
            text = ATTRIBUTES[a][1][t].format(name=ent.name)
            queries.append(QueryRecord(f"{split}-nt-{i:05d}", text, None, None,
                                       (ent.attribute_passages[a],), split))
    return World(config, entities, passages, queries)


def generate_corpus(config: CorpusConfig) -> Tuple[List[Passage], List[QueryRecord]]:
    world = build_world(config)
    return world.passages, world.queries


# -- grouping and augmentation -----------------------------------------------

def sample_by_specifier(queries: Iterable[QueryRecord], s: Specifier) -> SpecifierGroup:
    return SpecifierGroup(s, tuple(q for q in queries if q.specifier is s))


def partition(queries: Sequence[QueryRecord]) -> Tuple[Dict[Specifier, SpecifierGroup], List[QueryRecord]]:
    """Split into the seven specifier groups plus the non-temporal remainder."""
    groups = {s: sample_by_specifier(queries, s) for s in Specifier}
    return groups, [q for q in queries if q.specifier is None]


def balance_augment(groups: Sequence[SpecifierGroup], target: Union[int, Mapping[Specifier, int]],
                    seed: int, world: World, split: str = "train",
                    exclude: Iterable[str] = ()) -> List[SpecifierGroup]:
    """Top up small groups with fresh template instances over the world's timelines.

    New queries re-sample time values (and entities) for the group's
    specifier and re-resolve gold passages with the constraint oracle.  No
    generated text duplicates an existing query anywhere in the world, in
    ``groups`` or in ``exclude``.
    """
    taken = {q.text for q in world.queries}
    taken.update(exclude)
    taken.update(q.text for g in groups for q in g.queries)
    out = []
    for g in groups:
        want = target[g.specifier] if isinstance(target, Mapping) else int(target)
        if len(g) >= want:
            out.append(g)
            continue
        rng = np.random.default_rng([seed, list(Specifier).index(g.specifier)])
        extra = []
        for i in range(want - len(g)):
            made = _temporal_query(g.specifier, world.entities, rng, world.config, taken, max_tries=5000)
            if made is None:
                raise AugmentationError(
                    f"cannot augment specifier '{g.specifier.value}': no further unique queries "
                    f"from the entity timelines ({len(g) + i} of {want})")
            text, c, _, gold = made
            extra.append(QueryRecord(f"{split}-aug-{g.specifier.value}-{i:05d}", text, g.specifier, c,
                                     (gold.passage_id,), split))
        out.append(SpecifierGroup(g.specifier, g.queries + tuple(extra)))
    return out


def augment_split(world: World, split: str = "train", seed: Optional[int] = None) -> List[QueryRecord]:
    """Queries of ``split`` with the rare specifiers topped up to the augmented counts.

    Dev augmentation avoids every text of the train augmentation so the two
    splits never share a query.
    """
    seed = world.config.seed if seed is None else seed
    qs = [q for q in world.queries if q.split == split]
    groups, rest = partition(qs)
    targets = world.config.augment_targets(split)
    exclude = [q.text for q in augment_split(world, "train", seed)] if split == "dev" else []
    grown = balance_augment([groups[s] for s in Specifier], targets, seed, world, split, exclude)
    return [q for g in grown for q in g.queries] + rest


# -- serialization -------------------------------------------------------------

def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_corpus(directory, passages: Sequence[Passage], queries: Sequence[QueryRecord]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_jsonl(d / "passages.jsonl", (p.to_json() for p in passages))
    _write_jsonl(d / "queries.jsonl", (q.to_json() for q in queries))


def read_corpus(directory) -> Tuple[List[Passage], List[QueryRecord]]:
    d = Path(directory)
    passages = [Passage.from_json(o) for o in _read_jsonl(d / "passages.jsonl")]
    queries = [QueryRecord.from_json(o) for o in _read_jsonl(d / "queries.jsonl")]
    known = {p.passage_id for p in passages}
    for q in queries:
        missing = [g for g in q.gold_passage_ids if g not in known]
        if missing:
            raise ValueError(f"{q.query_id}: gold passages not in corpus: {missing}")
    return passages, queries


def specifier_counts(queries: Iterable[QueryRecord]) -> Dict[str, Dict[str, int]]:
    """``{row: {split: count}}`` with one row per specifier plus ``non_temporal``."""
    table: Dict[str, Dict[str, int]] = {}
    for q in queries:
        row = "non_temporal" if q.specifier is None else q.specifier.value
        table.setdefault(row, {s: 0 for s in SPLITS})[q.split] += 1
    return table
