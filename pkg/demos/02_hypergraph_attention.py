# %% [markdown]
# # Hypergraph attention over agent groups
#
# A grouping becomes a hypergraph with one hyperedge per group.  Nodes
# attend over the hyperedges they belong to, so messages never cross
# group boundaries.

# %%
import numpy as np

from hypergroup import hypergraph as hgx
from hypergroup import tensor as T
from hypergroup.spectral import Grouping

rng = np.random.default_rng(1)
grouping = Grouping(np.array([0, 0, 1, 1, 1, 2]), 3, np.array([0.6, 0.4, 0.9]))
hg = hgx.build_hypergraph(grouping)
print("incidence:\n", hg.incidence)
print("edge weights:", hg.edge_weights)

# %%
params = hgx.HgcnLayerParams.init(rng, 3, 4, 5)
x = rng.normal(size=(6, 3))
out, alpha = hgx.hgcn_layer(T.Tensor(x), hg, params, return_attention=True)
print("attention rows sum to", alpha.data.sum(axis=1))

# %% [markdown]
# In a partition every node sits in one hyperedge, so its attention weight
# is exactly one and the layer reduces to a graph convolution over cliques.

# %%
gcn = hgx.gcn_layer_variant(T.Tensor(x), hg, params)
print("max |hgcn - gcn| = %.2e" % np.abs(out.data - gcn.data).max())

# %% [markdown]
# Overlapping hyperedges are where attention matters.  Agent 2 belongs to
# two edges here and splits its weight between them.

# %%
overlap = hgx.Hypergraph(np.array([[1, 0], [1, 0], [1, 1], [0, 1], [0, 1]], float), np.ones(2))
alpha = hgx.attention_coeffs(T.Tensor(rng.normal(size=(5, 3))), overlap, params).data
print(np.round(alpha, 3))

# %% [markdown]
# Perturbing group 0 leaves every other group's output unchanged, bit for bit.

# %%
x2 = x.copy()
x2[:2] += 10.0
other = hgx.hgcn_layer(T.Tensor(x2), hg, params).data
print("rows 2..5 identical:", np.array_equal(other[2:], out.data[2:]))

# %% [markdown]
# Message counts: a balanced k-grouping of n agents sends sum |g|(|g|-1)
# messages instead of n(n-1).

# %%
for n, k in [(5, 1), (10, 5), (20, 5)]:
    msgs = hgx.message_count(hgx.build_hypergraph(hgx.balanced_grouping(n, k)))
    print(f"n={n:>2} k={k}: {msgs:>3} vs {n * (n - 1):>3}")
