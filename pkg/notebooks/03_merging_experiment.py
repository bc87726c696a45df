# %% [markdown]
# # Merging time-specialist retrievers
#
# Seven specialists are fine-tuned from one base model, one per time specifier,
# and averaged into a single merged model (TSM). Pooled fine-tuning is compared
# with the merge, with score ensembling and with a router that sends each query
# to either the base or the pooled model. Runtime is about 20 seconds per seed.

# %%
import numpy as np

from tempmerge.experiment import ExperimentConfig, run_experiment, summary
from tempmerge.timeparse import Specifier

res = run_experiment(ExperimentConfig())
print(summary(res))

# %% [markdown]
# Pooled fine-tuning gains on temporal queries and loses on non-temporal ones.
# The merge keeps most of the temporal gain and gives back much of the loss.

# %%
for m in ("Base", "FT", "TSM"):
    e = res.evaluations[m]
    print(f"{m:5s} temporal {e.recall20('temporal'):.3f}  non-temporal {e.recall20('non_temporal'):.3f}")

# %% [markdown]
# Merge curve: temporal Recall@20 as specialists are added in frequency order.

# %%
np.round(res.curve, 3), round(res.curve_spearman, 3)

# %% [markdown]
# Per-specifier Recall@20, specialists as rows, query groups as columns. The
# diagonal is each specialist at home.

# %%
groups = list(Specifier)
grid = np.array([[ev.specifier(g) for g in groups] for ev in res.specialist_evals.values()])
tsm_row = np.array([res.evaluations["TSM"].specifier(g) for g in groups])
print("            " + " ".join(f"{g.value[:8]:>8s}" for g in groups))
for s, row in zip(res.specialist_evals, grid):
    print(f"{s.value:11s} " + " ".join(f"{v:8.3f}" for v in row))
print(f"{'TSM':11s} " + " ".join(f"{v:8.3f}" for v in tsm_row))
res.off_home_cells()

# %% [markdown]
# Weight change from the base model. Averaging cannot move further than the
# mean specialist, by the triangle inequality.

# %%
res.changes
