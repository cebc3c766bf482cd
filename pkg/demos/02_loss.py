# %% [markdown]
# # The pairwise loss by hand
#
# Every guide/extractor pair in a batch is a binary question: do these two
# images share a label?  The cosine similarity, divided by a learnable
# temperature, is the logit.

# %%
import math

import torch

from famsec.sec import pair_labels, sec_loss, similarity_matrix

labels = torch.tensor([1, 1, 0, 0])
print(pair_labels(labels))

# %% one pair with zero similarity is a coin flip whatever the temperature
print(float(sec_loss(torch.zeros(1, 1, dtype=torch.float64), torch.ones(1, 1, dtype=torch.float64), 0.5)), math.log(2))

# %% aligned embeddings: the loss falls as tau shrinks (cross-label pairs sit at cos 0, not -1)
torch.manual_seed(0)
g = torch.nn.functional.one_hot(labels, 2).double() + 0.01 * torch.randn(4, 2, dtype=torch.float64)
p = similarity_matrix(g, g)
for tau in (1.0, 0.3, 0.07):
    print(f"tau={tau}: loss={float(sec_loss(p, pair_labels(labels), tau)):.4f}")

# %% swapping the same rows and columns leaves the loss alone
perm = torch.tensor([2, 0, 3, 1])
l = pair_labels(labels)
print(float(sec_loss(p, l, 0.07)) - float(sec_loss(p[perm][:, perm], l[perm][:, perm], 0.07)))
