"""Exact dot-product search, ensembling and routed retrieval."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .encoder import EncoderError, EncoderParams, LoraAdapter, encode, encode_batch

STRATEGIES = ("single", "ensemble", "routed")


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredHit:
    passage_id: str
    score: float
    rank: int


@dataclass
class Index:
    passage_ids: List[str]
    matrix: np.ndarray      # [N, d]
    model_hash: str = ""
    # position of each row when passage ids are sorted ascending (tie-break key)
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.passage_ids) == 0:
            raise RetrievalError("empty index")
        if self.matrix.shape[0] != len(self.passage_ids):
            raise RetrievalError(f"{self.matrix.shape[0]} rows for {len(self.passage_ids)} passages")
        order = sorted(range(len(self.passage_ids)), key=self.passage_ids.__getitem__)
        self.id_rank = np.empty(len(order), dtype=np.int64)
        self.id_rank[order] = np.arange(len(order))

    def __len__(self) -> int:
        return len(self.passage_ids)

    def save(self, path) -> None:
        np.savez(path, passage_ids=np.asarray(self.passage_ids), matrix=self.matrix,
                 model_hash=np.asarray(self.model_hash))

    @classmethod
    def load(cls, path) -> "Index":
        with np.load(path) as z:
            return cls([str(x) for x in z["passage_ids"]], z["matrix"].copy(), str(z["model_hash"]))


def build_index(params: EncoderParams, passages: Sequence, token_fn,
                adapter: Optional[LoraAdapter] = None) -> Index:
    """Encode every passage in input order.

    ``token_fn`` maps a passage text to its token-id list (usually
    ``vocab.encode``).
    """
    if len(passages) == 0:
        raise RetrievalError("no passages to index")
    tokens = []
    for p in passages:
        toks = token_fn(p.text)
        if len(toks) == 0:
            raise RetrievalError(f"cannot encode passage {p.passage_id}: empty input")
        tokens.append(toks)
    try:
        matrix = encode_batch(params, tokens, adapter)
    except EncoderError as exc:
        raise RetrievalError(f"encoding failed: {exc}") from exc
    return Index([p.passage_id for p in passages], matrix, params.digest())


def rank_scores(scores: np.ndarray, passage_ids: Sequence[str], id_rank: np.ndarray,
                k: int) -> List[ScoredHit]:
    """Top-``k`` by descending score, ties broken by ascending passage id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    N = len(scores)
    k = min(k, N)
    if k < N:
        # everything scoring at least the k-th largest value is a candidate
        kth = np.partition(scores, N - k)[N - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(N)
    order = cand[np.lexsort((id_rank[cand], -scores[cand]))][:k]
    return [ScoredHit(passage_ids[i], float(scores[i]), r + 1) for r, i in enumerate(order)]


def search(index: Index, q_emb: np.ndarray, k: int) -> List[ScoredHit]:
    """Exact top-``k``; ``k`` larger than the index returns every passage."""
    scores = index.matrix @ np.asarray(q_emb, dtype=np.float64)
    return rank_scores(scores, index.passage_ids, index.id_rank, k)


def search_many(index: Index, Q: np.ndarray, k: int) -> List[List[ScoredHit]]:
    # per-query matrix-vector products keep scores bitwise equal to ``search``
    return [search(index, q, k) for q in np.asarray(Q)]


# -- ensembling ------------------------------------------------------------------

def minmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Map scores onto [0, 1]; a constant vector maps to 0.5 everywhere."""
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full_like(scores, 0.5, dtype=np.float64)
    return (scores - lo) / (hi - lo)


def ensemble_scores(score_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of per-model min-max normalized score vectors."""
    return np.mean([minmax_normalize(np.asarray(s, dtype=np.float64)) for s in score_vectors], axis=0)


def _check_same_passages(indexes: Sequence[Index]) -> None:
    ref = indexes[0].passage_ids
    for i, idx in enumerate(indexes[1:], 1):
        if idx.passage_ids != ref:
            raise RetrievalError(f"index {i} covers a different passage list")


def ensemble_search(models: Sequence[Tuple[EncoderParams, Index]], query_tokens: Sequence[int],
                    k: int) -> List[ScoredHit]:
    """Score all passages with every model, normalize per model, average, rank."""
    if len(models) < 2:
        raise RetrievalError("ensembling needs at least two models")
    _check_same_passages([ix for _, ix in models])
    vecs = [ix.matrix @ encode(p, None, query_tokens) for p, ix in models]
    ref = models[0][1]
    return rank_scores(ensemble_scores(vecs), ref.passage_ids, ref.id_rank, k)


def ensemble_search_many(models: Sequence[Tuple[EncoderParams, Index]],
                         query_tokens: Sequence[Sequence[int]], k: int) -> List[List[ScoredHit]]:
    if len(models) < 2:
        raise RetrievalError("ensembling needs at least two models")
    _check_same_passages([ix for _, ix in models])
    ref = models[0][1]
    embedded = [encode_batch(p, query_tokens) for p, _ in models]
    out = []
    for qi in range(len(query_tokens)):
        combined = ensemble_scores([ix.matrix @ E[qi] for E, (_, ix) in zip(embedded, models)])
        out.append(rank_scores(combined, ref.passage_ids, ref.id_rank, k))
    return out


# -- routing ---------------------------------------------------------------------

def routed_search(router, vanilla: Tuple[EncoderParams, Index], tuned: Tuple[EncoderParams, Index],
                  query_tokens: Sequence[int], k: int) -> Tuple[List[ScoredHit], str]:
    """Send temporal-classified queries to ``tuned``, the rest to ``vanilla``.

    ``router`` is anything with ``predict(X) -> labels`` (1 = temporal) over
    vanilla query embeddings.  Returns the hits and the route taken.
    """
    _check_same_passages([vanilla[1], tuned[1]])
    q_van = encode(vanilla[0], None, query_tokens)
    temporal = int(np.asarray(router.predict(q_van[None, :]))[0]) == 1
    if temporal:
        return search(tuned[1], encode(tuned[0], None, query_tokens), k), "tuned"
    return search(vanilla[1], q_van, k), "vanilla"


def routed_search_many(router, vanilla, tuned, query_tokens, k):
    _check_same_passages([vanilla[1], tuned[1]])
    Qv = encode_batch(vanilla[0], query_tokens)
    Qt = encode_batch(tuned[0], query_tokens)
    routes = np.asarray(router.predict(Qv)) == 1
    hits = []
    for i, is_t in enumerate(routes):
        if is_t:
            hits.append(search(tuned[1], Qt[i], k))
        else:
            hits.append(search(vanilla[1], Qv[i], k))
    return hits, ["tuned" if r else "vanilla" for r in routes]


# -- runs --------------------------------------------------------------------------

@dataclass
class RetrievalRun:
    hits: Dict[str, List[ScoredHit]]
    strategy: str = "single"
    k: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise RetrievalError(f"unknown strategy {self.strategy!r}")

    def ranked_ids(self, query_id: str) -> List[str]:
        return [h.passage_id for h in self.hits[query_id]]

    def to_trec(self) -> str:
        lines = []
        for qid, hits in self.hits.items():
            for h in hits:
                lines.append(f"{qid} Q0 {h.passage_id} {h.rank} {h.score!r} {self.strategy}")
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_trec(), encoding="utf-8", newline="\n")

    @classmethod
    def from_trec(cls, text: str) -> "RetrievalRun":
        hits: Dict[str, List[ScoredHit]] = {}
        strategy = None
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise RetrievalError(f"line {n}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, tag = parts
            strategy = strategy or tag
            hits.setdefault(qid, []).append(ScoredHit(pid, float(score), int(rank)))
        for qid in hits:
            hits[qid].sort(key=lambda h: h.rank)
        k = max((len(v) for v in hits.values()), default=0)
        return cls(hits, strategy or "single", k)

    @classmethod
    def read(cls, path) -> "RetrievalRun":
        return cls.from_trec(Path(path).read_text(encoding="utf-8"))


def make_run(query_ids: Sequence[str], hit_lists: Iterable[List[ScoredHit]], strategy: str,
             k: int) -> RetrievalRun:
    return RetrievalRun(dict(zip(query_ids, hit_lists)), strategy, k)
