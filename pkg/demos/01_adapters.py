# %% [markdown]
# # Adapters on a frozen encoder
#
# Build the toy encoder, wrap the last two blocks' attention projections
# with rank-2 adapters and check the two facts everything else rests on:
# a fresh adapter changes nothing, and merging a trained one changes nothing
# either.

# %%
import numpy as np
import torch

from famsec.lora import FamConfig, adapter_sites, inject, merged_copy, trainable_parameter_count
from famsec.vit import TOY_SPEC, EncoderPair, build_encoder, embed, parameter_checksum

pair = EncoderPair.from_encoder(build_encoder(TOY_SPEC, seed=0))
registry = inject(pair.extractor, FamConfig(rank=2, adapted_block_count=2))
print(f"{len(registry)} adapted projections, {trainable_parameter_count(registry)} trainable scalars")
for site in list(adapter_sites(pair.extractor))[:3]:
    print(" ", site)

# %% B starts at zero, so the extractor is the guide
x = np.random.default_rng(0).random((16, 32, 32, 3)).astype(np.float32)
print("max |guide - extractor| =", np.abs(embed(pair.guide, x) - embed(pair.extractor, x)).max())

# %% pretend training moved the adapters, then fold them into the base weights
with torch.no_grad():
    for f in registry.values():
        f.up.normal_(0, 0.05)
live = embed(pair.extractor, x)
merged = embed(merged_copy(pair.extractor), x)
print("max relative merge error =", (np.linalg.norm(live - merged, axis=1) / np.linalg.norm(live, axis=1)).max())

# %% the guide still shares the untouched base weights
print("base weights unchanged:", parameter_checksum(pair.extractor) == parameter_checksum(pair.guide))
