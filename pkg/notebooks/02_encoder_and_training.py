# %% [markdown]
# # Encoder, contrastive loss and gradient checks
#
# The encoder mean-pools token embeddings and applies one affine map. Scores
# are dot products, so a score splits exactly into per-token contributions.
# Training minimizes a contrastive loss with in-batch negatives.

# %%
import numpy as np

from tempmerge.encoder import EncoderParams, encode, similarity, token_contributions
from tempmerge.trainlab import info_nce_loss

params = EncoderParams.init_random(vocab_size=20, dim=6, seed=0)
q, p = [1, 4, 7], [2, 4, 9, 11]
s = similarity(encode(params, None, q), encode(params, None, p))
contrib = token_contributions(params, q, p)
s, contrib

# %% [markdown]
# When every candidate has the same score the loss is log of the number of
# candidates: one positive plus five negatives gives ln 6.

# %%
rng = np.random.default_rng(1)
a, b = rng.standard_normal(6), rng.standard_normal(6)
info_nce_loss(a, b, [b] * 5, 1.0), np.log(6)

# %% [markdown]
# Analytic gradients against central differences, for the three training
# modes and the router. The helper lives with the tests.

# %%
import sys
sys.path.insert(0, "../tests")
from fdcheck import encoder_gradient_error, router_gradient_error

errs = {m: max(encoder_gradient_error(s, m) for s in range(10)) for m in ("full", "lora", "full_regularized")}
errs["router"] = max(router_gradient_error(s) for s in range(10))
print(errs)
