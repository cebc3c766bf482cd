# %% [markdown]
# # Component ablation and a t-SNE look
#
# Short runs (200 steps) of the four component cells, then a t-SNE of the
# trained extractor next to the untrained one.  The full-length ablation
# lives in the acceptance tests.

# %%
import os
import tempfile

from famsec.config import DataConfig, RunConfig
from famsec.data import load_images, load_manifest, make_desk_corpus
from famsec.harness import build_pair, run_experiment, run_sweep, tsne_groups, tsne_plot
from famsec.lora import FamConfig
from famsec.sec import TrainConfig
from famsec.vit import TOY_SPEC, embed

work = tempfile.mkdtemp(prefix="famsec-ablate-")
root = os.path.join(work, "data")
make_desk_corpus(root, train_count=200, test_count=100, seed=0)
manifest = load_manifest(root)
train_set, test_set = load_images(manifest, "train", size=32), load_images(manifest, "test", size=32)
cfg = RunConfig(encoder=TOY_SPEC, fam=FamConfig(rank=2, dropout_p=0.25, adapted_block_count=2),
                train=TrainConfig(steps=200, batch_size=32, lr=1e-3), data=DataConfig(root=root))

# %%
sweep = run_sweep("components", ["none", "fam", "sec", "fam+sec"], cfg, os.path.join(work, "ablate"),
                  train_set, test_set)
for cell in sweep.cells:
    print(f"{cell.value:8s} A={cell.report.accuracy('synthA'):.3f} B={cell.report.accuracy('synthB'):.3f}")

# %% embeddings of seen (A) and unseen (B) test images before and after training
result = run_experiment(cfg, None, train_set, test_set)
by_source = test_set.by_source()
images, groups = tsne_groups(by_source["synthA"], by_source["synthB"], per_group=50)
after = tsne_plot(embed(result.pair.extractor, images), groups, out_dir=os.path.join(work, "tsne"))
before = tsne_plot(embed(build_pair(cfg).extractor, images), groups)
print(f"real/fake silhouette: untrained {before.silhouette:.3f}, trained {after.silhouette:.3f}")
print("plot:", os.path.join(work, "tsne", "tsne.png"))
