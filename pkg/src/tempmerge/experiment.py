"""End-to-end desk-scale experiment: base model, baselines, specialists, merging.

The pipeline is:

1. generate the synthetic world and its augmented train/dev splits
2. build a base encoder (span-crop contrastive pretraining on passages, then
   a short supervised stage on non-temporal queries)
3. fine-tune the baselines on the pooled temporal training set (FT, FT+Reg,
   LoRA) and fit the query router
4. fine-tune one specialist per time specifier and merge them by averaging
5. evaluate everything on the temporal and non-temporal test queries
"""
from __future__ import annotations

import configparser
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .corpuslab import (FREQUENCY_ORDER, CorpusConfig, Passage, QueryRecord, World, augment_split,
                        build_world, partition)
from .encoder import EncoderParams, Vocab, encode_batch
from .evalkit import (METRICS, ComparisonTable, MetricsReport, compare_methods, evaluate_run,
                      per_specifier_report, qrels_from_queries)
from .mergekit import MergeReport, merge_report, merge_sequence, weight_change
from .retrieval import (Index, RetrievalRun, build_index, ensemble_search_many, make_run,
                        routed_search_many, search_many)
from .timeparse import Specifier
from .trainlab import (DevSet, RouterConfig, RouterParams, TrainConfig, TrainExample, TrainResult,
                       train, train_router)

log = logging.getLogger(__name__)

DATASETS = ("temporal", "non_temporal")
METHODS = ("Base", "FT", "FT+Reg", "LoRA", "Routing", "Ensembling", "TSM")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    dim: int = 32
    init_seed: int = 0
    init_scale: float = 1.0
    # base model
    crop_rounds: int = 10
    crop_min: float = 0.3
    crop_max: float = 0.7
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-2, epochs=3))
    supervised: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-2, epochs=10))
    # pooled baselines; FT+Reg reuses this with mode full_regularized
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-2))
    lora: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-2, mode="lora"))
    # single-specifier models
    specialist: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=5e-2, mode="full_regularized"))
    equalize_steps: bool = True
    router: RouterConfig = field(default_factory=RouterConfig)
    k_values: Tuple[int, ...] = (5, 20)

    @property
    def seed(self) -> int:
        return self.corpus.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, corpus=replace(self.corpus, seed=int(seed)))

    @property
    def metrics(self) -> Tuple[str, ...]:
        return tuple(f"{m}@{k}" for m in ("recall", "ndcg") for k in self.k_values)


# -- manifest ---------------------------------------------------------------------

_TRAIN_SECTIONS = ("pretrain", "supervised", "finetune", "lora", "specialist")


def _coerce(kind, raw: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def _section(cls, base, items: dict):
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in items.items():
        if k not in kinds:
            raise ValueError(f"unknown key {k!r} for {cls.__name__}")
        if k == "year_range":
            lo, hi = (int(x) for x in v.replace(",", " ").split())
            out[k] = (lo, hi)
        else:
            out[k] = _coerce(kinds[k], v)
    return replace(base, **out)


@dataclass
class Manifest:
    """Experiment manifest: paths plus an ``ExperimentConfig``."""
    experiment: ExperimentConfig
    corpus_dir: Path
    checkpoint_dir: Path
    run_dir: Path

    @classmethod
    def read(cls, path, seed_override: Optional[int] = None) -> "Manifest":
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"cannot read manifest {path}")
        root = path.parent
        paths = dict(cp["paths"]) if cp.has_section("paths") else {}

        def p(key, default):
            v = Path(paths.get(key, default))
            return v if v.is_absolute() else root / v

        exp = ExperimentConfig()
        if cp.has_section("corpus"):
            exp = replace(exp, corpus=_section(CorpusConfig, exp.corpus, dict(cp["corpus"])))
        for name in _TRAIN_SECTIONS:
            if cp.has_section(name):
                exp = replace(exp, **{name: _section(TrainConfig, getattr(exp, name), dict(cp[name]))})
        if cp.has_section("router"):
            exp = replace(exp, router=_section(RouterConfig, exp.router, dict(cp["router"])))
        if cp.has_section("experiment"):
            items = dict(cp["experiment"])
            if "k_values" in items:
                ks = tuple(int(x) for x in items.pop("k_values").replace(",", " ").split())
                if not ks or min(ks) < 1:
                    raise ValueError("k_values must be positive integers")
                exp = replace(exp, k_values=ks)
            plain = {f.name: f for f in fields(ExperimentConfig)}
            for k, v in items.items():
                if k not in plain or k in ("corpus", "router") + _TRAIN_SECTIONS:
                    raise ValueError(f"unknown key {k!r} in [experiment]")
                exp = replace(exp, **{k: _coerce(plain[k].type, v)})
        if seed_override is not None:
            exp = exp.with_seed(seed_override)
        return cls(exp, p("corpus_dir", "corpus"), p("checkpoint_dir", "checkpoints"),
                   p("run_dir", "runs"))


# -- data ---------------------------------------------------------------------------

def corpus_queries(world: World) -> List[QueryRecord]:
    """Test queries plus the augmented train and dev splits, in that order."""
    test = [q for q in world.queries if q.split == "test"]
    return test + augment_split(world, "train") + augment_split(world, "dev")


def build_vocab(passages: Sequence[Passage], queries: Sequence[QueryRecord]) -> Vocab:
    return Vocab.build([p.text for p in passages] + [q.text for q in queries])


class Lab:
    """Corpus, vocab and token caches shared by every training and evaluation step."""

    def __init__(self, passages: Sequence[Passage], queries: Sequence[QueryRecord],
                 vocab: Optional[Vocab] = None):
        self.passages = list(passages)
        self.queries = list(queries)
        self.vocab = vocab or build_vocab(self.passages, self.queries)
        self.pid_index = {p.passage_id: i for i, p in enumerate(self.passages)}
        self.passage_tokens = [tuple(self.vocab.encode(p.text)) for p in self.passages]
        self.qrels = qrels_from_queries(self.queries)
        self._qtok: Dict[str, Tuple[int, ...]] = {}

    @classmethod
    def from_world(cls, world: World) -> "Lab":
        return cls(world.passages, corpus_queries(world))

    def split(self, name: str, temporal: Optional[bool] = None) -> List[QueryRecord]:
        out = [q for q in self.queries if q.split == name]
        if temporal is not None:
            out = [q for q in out if q.temporal == temporal]
        return out

    def tokens(self, q: QueryRecord) -> Tuple[int, ...]:
        t = self._qtok.get(q.query_id)
        if t is None:
            t = self._qtok[q.query_id] = tuple(self.vocab.encode(q.text))
        return t

    def examples(self, queries: Sequence[QueryRecord]) -> List[TrainExample]:
        return [TrainExample(self.tokens(q), self.passage_tokens[self.pid_index[q.gold_passage_ids[0]]],
                             q.query_id) for q in queries]

    def devset(self, queries: Sequence[QueryRecord]) -> DevSet:
        gold = [frozenset(self.pid_index[g] for g in q.gold_passage_ids) for q in queries]
        return DevSet([self.tokens(q) for q in queries], gold, self.passage_tokens)

    def index(self, params: EncoderParams) -> Index:
        return build_index(params, self.passages, self.vocab.encode)

    def test_sets(self) -> Dict[str, List[QueryRecord]]:
        return {"temporal": self.split("test", True), "non_temporal": self.split("test", False)}


def crop_pairs(passage_tokens: Sequence[Sequence[int]], rounds: int, seed: int,
               lo: float = 0.3, hi: float = 0.7) -> List[TrainExample]:
    """Two random spans of the same passage form a positive pair."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(rounds):
        for toks in passage_tokens:
            n_tok = len(toks)

            def span():
                n = min(n_tok, max(2, int(n_tok * rng.uniform(lo, hi))))
                s = int(rng.integers(0, n_tok - n + 1))
                return tuple(toks[s:s + n])

            out.append(TrainExample(span(), span()))
    return out


def build_base(lab: Lab, cfg: ExperimentConfig) -> Tuple[EncoderParams, Dict[str, TrainResult]]:
    """Random init, span-crop pretraining, then supervised non-temporal training."""
    init = EncoderParams.init_random(len(lab.vocab), cfg.dim, seed=cfg.init_seed,
                                     vocab_hash=lab.vocab.hash, embed_scale=cfg.init_scale)
    pairs = crop_pairs(lab.passage_tokens, cfg.crop_rounds, cfg.init_seed + 1, cfg.crop_min, cfg.crop_max)
    pre = train(init, pairs, cfg.pretrain)
    sup = train(pre.params, lab.examples(lab.split("train", False)), cfg.supervised,
                dev=lab.devset(lab.split("dev", False)))
    return sup.params, {"pretrain": pre, "supervised": sup}


def specialist_epochs(sizes: Dict[Specifier, int], cfg: ExperimentConfig) -> Dict[Specifier, int]:
    """Epoch count per specialist.

    With ``equalize_steps`` small groups train for more epochs so every
    specialist takes about as many optimizer steps as the largest one does in
    the configured number of epochs.
    """
    base = cfg.specialist.epochs
    if not cfg.equalize_steps:
        return {s: base for s in sizes}
    top = max(sizes.values())
    return {s: max(base, int(round(base * top / n))) for s, n in sizes.items()}


def train_specialists(lab: Lab, base: EncoderParams, cfg: ExperimentConfig,
                      only: Optional[Sequence[Specifier]] = None) -> Dict[Specifier, TrainResult]:
    tr, _ = partition(lab.split("train"))
    dv, _ = partition(lab.split("dev"))
    epochs = specialist_epochs({s: len(tr[s]) for s in Specifier}, cfg)
    out = {}
    for s in FREQUENCY_ORDER:
        if only is not None and s not in only:
            continue
        c = replace(cfg.specialist, epochs=epochs[s])
        out[s] = train(base, lab.examples(tr[s].queries), c, dev=lab.devset(dv[s].queries))
        log.info("specialist %s: %d epochs, best step %d, dev top-1 %.3f", s.value, epochs[s],
                 out[s].best_step, out[s].best_dev_top1)
    return out


def train_pooled(lab: Lab, base: EncoderParams, config: TrainConfig) -> TrainResult:
    """Fine-tune on all temporal training queries with pooled temporal dev selection."""
    return train(base, lab.examples(lab.split("train", True)), config,
                 dev=lab.devset(lab.split("dev", True)))


def fit_router(lab: Lab, vanilla: EncoderParams, config: RouterConfig) -> Tuple[RouterParams, float]:
    toks = lambda qs: [lab.tokens(q) for q in qs]
    return train_router(toks(lab.split("train", True)), toks(lab.split("train", False)), vanilla, config,
                        dev=(toks(lab.split("dev", True)), toks(lab.split("dev", False))))


# -- evaluation ---------------------------------------------------------------------

@dataclass
class Evaluation:
    runs: Dict[str, RetrievalRun]                 # per dataset
    report: MetricsReport

    def recall20(self, dataset: str) -> float:
        return self.report.datasets[dataset]["recall@20"]

    def specifier(self, s: Optional[Specifier]) -> float:
        return self.report.per_specifier[s]


def _report(lab: Lab, runs: Dict[str, RetrievalRun], metrics) -> Evaluation:
    sets = lab.test_sets()
    datasets = {d: evaluate_run(runs[d], lab.qrels, metrics) for d in DATASETS}
    per = per_specifier_report(runs["temporal"], sets["temporal"], lab.qrels, 20)
    per.update(per_specifier_report(runs["non_temporal"], sets["non_temporal"], lab.qrels, 20))
    return Evaluation(runs, MetricsReport(datasets, per))


def evaluate_model(lab: Lab, params: EncoderParams, metrics=METRICS, index: Optional[Index] = None) -> Evaluation:
    index = index or lab.index(params)
    k = max(int(m.split("@")[1]) for m in metrics)
    runs = {}
    for d, qs in lab.test_sets().items():
        Q = encode_batch(params, [lab.tokens(q) for q in qs])
        runs[d] = make_run([q.query_id for q in qs], search_many(index, Q, k), "single", k)
    return _report(lab, runs, metrics)


def evaluate_ensemble(lab: Lab, models: Sequence[Tuple[EncoderParams, Index]], metrics=METRICS) -> Evaluation:
    k = max(int(m.split("@")[1]) for m in metrics)
    runs = {}
    for d, qs in lab.test_sets().items():
        hits = ensemble_search_many(models, [lab.tokens(q) for q in qs], k)
        runs[d] = make_run([q.query_id for q in qs], hits, "ensemble", k)
    return _report(lab, runs, metrics)


def evaluate_routed(lab: Lab, router, vanilla: Tuple[EncoderParams, Index],
                    tuned: Tuple[EncoderParams, Index], metrics=METRICS) -> Tuple[Evaluation, Dict[str, float]]:
    """Routed runs plus the fraction of each dataset sent to the tuned model."""
    k = max(int(m.split("@")[1]) for m in metrics)
    runs, frac = {}, {}
    for d, qs in lab.test_sets().items():
        hits, routes = routed_search_many(router, vanilla, tuned, [lab.tokens(q) for q in qs], k)
        runs[d] = make_run([q.query_id for q in qs], hits, "routed", k)
        frac[d] = float(np.mean([r == "tuned" for r in routes]))
    return _report(lab, runs, metrics), frac


# -- full experiment -------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    lab: Lab
    base: EncoderParams
    models: Dict[str, EncoderParams]                       # method -> params (single-model methods)
    specialists: Dict[Specifier, TrainResult]
    evaluations: Dict[str, Evaluation]                     # method -> evaluation
    specialist_evals: Dict[Specifier, Evaluation]
    curve: List[float]                                     # temporal Recall@20 after j merges
    curve_non_temporal: List[float]
    merge: MergeReport
    changes: Dict[str, float]                              # method -> total weight change
    router_dev_accuracy: float
    route_fraction: Dict[str, float]
    timings: Dict[str, float]

    @property
    def table(self) -> ComparisonTable:
        return compare_methods([(m, self.evaluations[m].report) for m in METHODS if m in self.evaluations])

    @property
    def curve_spearman(self) -> float:
        rho = spearmanr(np.arange(1, len(self.curve) + 1), self.curve).correlation
        return float(rho) if not math.isnan(rho) else 0.0

    def off_home_cells(self) -> Tuple[int, int]:
        """Count (group, specialist) pairs off the diagonal where TSM is at least as good."""
        tsm = self.evaluations["TSM"]
        ok = total = 0
        for s, ev in self.specialist_evals.items():
            for g in Specifier:
                if g is s:
                    continue
                total += 1
                ok += tsm.specifier(g) >= ev.specifier(g)
        return ok, total

    def curve_rows(self) -> List[Tuple[int, str, float]]:
        rows = [(j + 1, "temporal", v) for j, v in enumerate(self.curve)]
        rows += [(j + 1, "non_temporal", v) for j, v in enumerate(self.curve_non_temporal)]
        return rows

    def weight_rows(self) -> List[Tuple[str, float]]:
        return list(self.changes.items())


def run_experiment(cfg: ExperimentConfig, world: Optional[World] = None) -> ExperimentResult:
    timings = {}
    t0 = time.perf_counter()
    world = world or build_world(cfg.corpus)
    lab = Lab.from_world(world)
    timings["corpus"] = time.perf_counter() - t0
    metrics = cfg.metrics

    t = time.perf_counter()
    base, _ = build_base(lab, cfg)
    timings["base"] = time.perf_counter() - t

    t = time.perf_counter()
    ft = train_pooled(lab, base, cfg.finetune)
    ft_reg = train_pooled(lab, base, replace(cfg.finetune, mode="full_regularized"))
    lora = train_pooled(lab, base, cfg.lora)
    router, router_acc = fit_router(lab, base, cfg.router)
    timings["baselines"] = time.perf_counter() - t

    t = time.perf_counter()
    specialists = train_specialists(lab, base, cfg)
    order = [s for s in FREQUENCY_ORDER if s in specialists]
    seq = merge_sequence([specialists[s].params for s in order])
    tsm = seq[-1]
    timings["specialists"] = time.perf_counter() - t

    t = time.perf_counter()
    models = {"Base": base, "FT": ft.params, "FT+Reg": ft_reg.params, "LoRA": lora.merged(), "TSM": tsm}
    indexes = {m: lab.index(p) for m, p in models.items()}
    evals = {m: evaluate_model(lab, p, metrics, indexes[m]) for m, p in models.items()}
    spec_idx = {s: lab.index(specialists[s].params) for s in order}
    spec_evals = {s: evaluate_model(lab, specialists[s].params, metrics, spec_idx[s]) for s in order}
    evals["Ensembling"] = evaluate_ensemble(lab, [(specialists[s].params, spec_idx[s]) for s in order], metrics)
    evals["Routing"], route_fraction = evaluate_routed(lab, router, (base, indexes["Base"]),
                                                       (ft.params, indexes["FT"]), metrics)
    curve, curve_nt = [], []
    for j, m in enumerate(seq):
        ev = spec_evals[order[0]] if j == 0 else (evals["TSM"] if j == len(seq) - 1 else
                                                  evaluate_model(lab, m, metrics))
        curve.append(ev.recall20("temporal"))
        curve_nt.append(ev.recall20("non_temporal"))
    timings["evaluation"] = time.perf_counter() - t

    report = merge_report(base, {s.value: specialists[s].params for s in order}, tsm)
    report.assert_convex()
    changes = {m: weight_change(base, p)[0] for m, p in models.items() if m != "Base"}
    changes["Ensembling"] = report.mean_member_change
    report.extra.update({"ft": changes["FT"], "ft_reg": changes["FT+Reg"], "lora": changes["LoRA"]})
    timings["total"] = time.perf_counter() - t0
    return ExperimentResult(cfg, lab, base, models, specialists, evals, spec_evals, curve, curve_nt,
                            report, changes, router_acc, route_fraction, timings)


def summary(res: ExperimentResult) -> str:
    """Aligned text block with the comparison table, curve and weight changes."""
    lines = [f"seed {res.config.seed}: {len(res.lab.passages)} passages, "
             f"{len(res.lab.split('test'))} test queries, {res.timings['total']:.1f}s", ""]
    lines.append(res.table.to_text())
    lines.append("merge curve (temporal recall@20): " + " ".join(f"{v:.3f}" for v in res.curve)
                 + f"  spearman {res.curve_spearman:.3f}")
    ok, total = res.off_home_cells()
    lines.append(f"TSM >= specialist off-home cells: {ok}/{total}")
    lines.append("weight change: " + ", ".join(f"{m} {v:.2f}" for m, v in res.changes.items()))
    lines.append(f"router dev accuracy {res.router_dev_accuracy:.3f}; routed to tuned: "
                 + ", ".join(f"{d} {v:.2f}" for d, v in res.route_fraction.items()))
    return "\n".join(lines) + "\n"
