# %% [markdown]
# # Synthetic corpus and the time-expression parser
#
# The corpus is a small world of fictional people whose careers are a sequence
# of dated facts. Passages describe the facts; queries ask about a role under a
# time constraint. This notebook builds the default world, looks at one query
# of each specifier and checks that the parser reads every query back.

# %%
from collections import Counter

import numpy as np

from tempmerge.corpuslab import CorpusConfig, build_world, specifier_counts
from tempmerge.experiment import corpus_queries
from tempmerge.timeparse import Specifier, parse_query

world = build_world(CorpusConfig())
queries = corpus_queries(world)
len(world.passages), len(queries)

# %% [markdown]
# Counts per specifier and split. Train and dev are augmented for the rarer
# specifiers so that each specialist sees a usable amount of data.

# %%
for name, row in specifier_counts(queries).items():
    print(f"{name:14s}", row)

# %% [markdown]
# One test query per specifier with its gold passage.

# %%
pidx = world.passage_index()
for s in Specifier:
    q = next(q for q in queries if q.specifier is s and q.split == "test")
    print(f"[{s.value}] {q.text}")
    print("    gold:", pidx[q.gold_passage_ids[0]].text[:110], "...")

# %% [markdown]
# The parser should recover specifier and constraint for every temporal query
# and return nothing for the non-temporal ones.

# %%
temporal = [q for q in queries if q.temporal]
hits = np.array([parse_query(q.text) == (q.specifier, q.constraint) for q in temporal])
misparsed = sum(parse_query(q.text) is not None for q in queries if not q.temporal)
print(f"round trip {hits.mean():.4f} over {hits.size} queries, {misparsed} non-temporal misparsed")

# %% [markdown]
# Passage length in tokens. Chunks are capped at the configured size.

# %%
lengths = np.array([len(p.text.split()) for p in world.passages])
print("min/median/max words:", lengths.min(), int(np.median(lengths)), lengths.max())
Counter(q.split for q in queries)
