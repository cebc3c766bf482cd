"""Train/evaluate pipeline, accuracy reports, ablation sweeps, t-SNE and sample-size curves.

Every output lands in a run directory::

    <run>/config.json  losses.csv  report.csv  report.json  bank.emb  checkpoints/
    <sweep>/sweep.csv  cells/<axis>=<value>/...
    <curve>/curve.csv  curve.png
    <tsne>/tsne.csv    tsne.png
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import ImageSet, load_images, load_manifest
from .errors import ConfigurationError, ContractViolation, NumericDomainError
from .inference import ReferenceBank, build_bank, classify_batch, save_bank
from .lora import inject
from .sec import TrainState, train
from .vit import EncoderPair, attach_pretrained, build_encoder, embed

log = logging.getLogger(__name__)


# --- accuracy reports --------------------------------------------------------

@dataclass
class SourceResult:
    total: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


@dataclass
class EvalReport:
    """Per-source accuracy plus per-dataset and overall means.

    The overall mean weights every source equally, like an "Avg. ACC" column
    computed over source columns.
    """

    per_source: Dict[str, SourceResult]
    groups: Dict[str, str] = field(default_factory=dict)  # source -> dataset
    config: dict = field(default_factory=dict)
    timestamp: str = ""

    def accuracy(self, source: str) -> float:
        return self.per_source[source].accuracy

    @property
    def dataset_means(self) -> Dict[str, float]:
        by_ds: Dict[str, List[float]] = {}
        for src, res in self.per_source.items():
            by_ds.setdefault(self.groups.get(src, src), []).append(res.accuracy)
        return {ds: float(np.mean(v)) for ds, v in sorted(by_ds.items())}

    @property
    def overall(self) -> float:
        return float(np.mean([r.accuracy for r in self.per_source.values()]))

    def rows(self) -> List[list]:
        out = []
        for src in sorted(self.per_source):
            r = self.per_source[src]
            out.append(["source", src, self.groups.get(src, src), r.total, r.correct, repr(r.accuracy)])
        for ds, acc in self.dataset_means.items():
            out.append(["dataset", ds, ds, "", "", repr(acc)])
        out.append(["overall", "all", "", sum(r.total for r in self.per_source.values()),
                    sum(r.correct for r in self.per_source.values()), repr(self.overall)])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "name", "dataset", "total", "correct", "accuracy"])
            w.writerows(self.rows())

    def to_dict(self) -> dict:
        return {
            "per_source": {s: {"total": r.total, "correct": r.correct, "accuracy": r.accuracy}
                           for s, r in sorted(self.per_source.items())},
            "dataset_means": self.dataset_means,
            "overall": self.overall,
            "config": self.config,
            "timestamp": self.timestamp,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def report_from_predictions(sources: Sequence[str], labels, predictions, groups=None, config=None) -> EvalReport:
    """Build a report from per-image ground truth and predicted labels (1 = real)."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    per_source = {}
    for src in sorted(set(sources)):
        mask = np.array([s == src for s in sources])
        per_source[src] = SourceResult(int(mask.sum()), int((labels[mask] == predictions[mask]).sum()))
    return EvalReport(per_source, dict(groups or {}), dict(config or {}),
                      datetime.now(timezone.utc).isoformat(timespec="seconds"))


def predict_labels(extractor, test_set: ImageSet, bank: Optional[ReferenceBank] = None, head=None) -> np.ndarray:
    """1 = real, 0 = fake, from the cosine rule (``bank``) or a classification head."""
    if head is not None:
        emb = torch.from_numpy(embed(extractor, test_set.images)).to(head.weight.dtype)
        with torch.no_grad():
            return (head(emb).squeeze(-1) > 0).long().numpy()
    if bank is None:
        raise ContractViolation("either a reference bank or a head is required")
    return np.array([0 if v.is_fake else 1 for v in classify_batch(test_set.images, bank, extractor)])


def evaluate(extractor, bank: Optional[ReferenceBank], test_set: ImageSet, groups=None, head=None,
             config=None) -> EvalReport:
    """Accuracy of ``extractor`` + ``bank`` (or ``head``) on every source of ``test_set``.

    Sources with no images are dropped with a warning rather than scored as zero.
    """
    if len(test_set) == 0:
        raise ConfigurationError("test set is empty", field="data")
    for src in (groups or {}):
        if src not in set(test_set.sources):
            warnings.warn(f"source {src!r} has no test images and is excluded", RuntimeWarning, stacklevel=2)
    preds = predict_labels(extractor, test_set, bank, head)
    return report_from_predictions(test_set.sources, test_set.labels, preds, groups, config)


# --- one full train + evaluate cycle ----------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    pair: EncoderPair
    state: TrainState
    bank: Optional[ReferenceBank]
    report: EvalReport
    out_dir: Optional[str] = None
    seconds: float = 0.0


def balanced_subset(dataset: ImageSet, n: int, seed: int) -> ImageSet:
    """Seeded class-balanced subset of ``n`` images (``ceil(n/2)`` real)."""
    real = np.flatnonzero(dataset.labels == 1)
    fake = np.flatnonzero(dataset.labels == 0)
    n_real, n_fake = (n + 1) // 2, n // 2
    if n_real > len(real) or n_fake > len(fake):
        raise ConfigurationError(
            f"train_samples={n} needs {n_real} real and {n_fake} fake images, "
            f"have {len(real)} and {len(fake)}", field="data.train_samples")
    rng = np.random.default_rng(seed)
    idx = np.concatenate([rng.choice(real, n_real, replace=False), rng.choice(fake, n_fake, replace=False)])
    return dataset.subset(np.sort(idx))


def load_run_data(cfg: RunConfig):
    """``(train_set, test_set)`` decoded from ``cfg.data.root``."""
    if not cfg.data.root:
        raise ConfigurationError("data.root is not set", field="data.root")
    manifest = load_manifest(cfg.data.root)
    size = cfg.encoder.image_size
    train_set = load_images(manifest, "train", cfg.data.train_sources, None if cfg.data.crop_size else size)
    test_set = load_images(manifest, "test", cfg.data.test_sources, size)
    return train_set, test_set


def build_pair(cfg: RunConfig) -> EncoderPair:
    if cfg.pretrained:
        encoder = attach_pretrained(cfg.pretrained, cfg.encoder)
    else:
        encoder = build_encoder(cfg.encoder, seed=cfg.encoder_seed)
    pair = EncoderPair.from_encoder(encoder, share_weights=cfg.fam is not None)
    if cfg.fam is not None:
        inject(pair.extractor, cfg.fam, seed=cfg.encoder_seed)
    else:
        pair.extractor.requires_grad_(True)
    return pair


def run_experiment(cfg: RunConfig, out_dir=None, train_set: Optional[ImageSet] = None,
                   test_set: Optional[ImageSet] = None) -> RunResult:
    """Train the extractor described by ``cfg`` and score it on the test split.

    ``cfg.train.objective == "sec"`` cells are scored with a reference bank
    drawn from the training images, ``"bce"`` cells with their linear head.
    """
    cfg.validate()
    t0 = time.perf_counter()
    if train_set is None or test_set is None:
        loaded_train, loaded_test = load_run_data(cfg)
        train_set = train_set if train_set is not None else loaded_train
        test_set = test_set if test_set is not None else loaded_test
    train_set.require_both_classes()
    if cfg.data.train_samples is not None:
        train_set = balanced_subset(train_set, cfg.data.train_samples, cfg.data.subset_seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        cfg.save(os.path.join(out_dir, "config.json"))
    pair = build_pair(cfg)
    crop = cfg.encoder.image_size if cfg.data.crop_size else None
    with torch.random.fork_rng(devices=[]):
        state = train(cfg.train, train_set, pair, out_dir=out_dir, fam_config=cfg.fam, crop_size=crop)
    bank = None
    if state.head is None:
        bank_source = train_set if train_set.images.shape[1] == cfg.encoder.image_size else None
        if bank_source is None:
            from .data import center_crop

            bank_source = ImageSet(np.stack([center_crop(im, cfg.encoder.image_size) for im in train_set.images]),
                                   train_set.labels, train_set.sources)
        bank = build_bank(bank_source, pair.extractor, cfg.bank.k_per_class, cfg.bank.aggregation, cfg.bank.seed)
    report = evaluate(pair.extractor, bank, test_set, cfg.data.groups, head=state.head, config=cfg.to_dict())
    if out_dir:
        report.to_csv(os.path.join(out_dir, "report.csv"))
        report.to_json(os.path.join(out_dir, "report.json"))
        if bank is not None:
            save_bank(os.path.join(out_dir, "bank.emb"), bank)
    return RunResult(cfg, pair, state, bank, report, out_dir, time.perf_counter() - t0)


def restore_run(run_dir, ckpt=None):
    """``(config, extractor, bank, head)`` rebuilt from a run directory.

    ``ckpt`` defaults to ``<run>/checkpoints/final.safetensors``; the bank is
    ``<run>/bank.emb`` when present, else ``None``.
    """
    from safetensors import safe_open

    from .inference import load_bank
    from .lora import load_adapters
    from .errors import LoadError

    cfg_path = os.path.join(run_dir, "config.json") if run_dir else ""
    if not os.path.isfile(cfg_path):
        raise ConfigurationError(f"no config.json in run directory {run_dir!r}", field="run")
    from .config import load_config

    cfg = load_config(cfg_path)
    ckpt = ckpt or os.path.join(run_dir, "checkpoints", "final.safetensors")
    if not os.path.isfile(ckpt):
        raise LoadError(f"checkpoint not found: {ckpt}")
    encoder = attach_pretrained(cfg.pretrained, cfg.encoder) if cfg.pretrained else build_encoder(
        cfg.encoder, seed=cfg.encoder_seed)
    if cfg.fam is not None:
        _, extras = load_adapters(ckpt, encoder)
    else:
        with safe_open(ckpt, framework="pt") as f:
            if (f.metadata() or {}).get("format") != "famsec-full/1":
                raise LoadError(f"{ckpt} is not a full-model checkpoint")
            tensors = {k: f.get_tensor(k) for k in f.keys()}
        extras = {k: tensors.pop(k) for k in list(tensors) if k == "log_tau" or k.startswith("head.")}
        encoder.load_state_dict(tensors)
    encoder.eval()
    head = None
    if "head.weight" in extras:
        d = cfg.encoder.embed_dim
        head = torch.nn.Linear(d, 1)
        with torch.no_grad():
            head.weight.copy_(extras["head.weight"].reshape(1, d))
            head.bias.copy_(extras["head.bias"].reshape(1))
    bank_path = os.path.join(run_dir, "bank.emb")
    bank = load_bank(bank_path) if os.path.isfile(bank_path) else None
    return cfg, encoder, bank, head


# --- sweeps ------------------------------------------------------------------

SWEEP_AXES = ("rank", "adapted_blocks", "train_samples", "components")
COMPONENT_CELLS = ("none", "fam", "sec", "fam+sec")  # fully fine-tuned baseline first


def scaled_block_axis(depth: int) -> List[int]:
    """Quarter steps of the depth: 6/12/18/24 at depth 24, 1/2/3/4 at depth 4."""
    return sorted({max(1, round(depth * q / 4)) for q in (1, 2, 3, 4)})


def cell_config(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "rank":
        return base.replace(**{"fam.rank": int(value)})
    if axis == "adapted_blocks":
        return base.replace(**{"fam.adapted_block_count": int(value)})
    if axis == "train_samples":
        return base.replace(**{"data.train_samples": int(value)})
    if axis == "components":
        if value not in COMPONENT_CELLS:
            raise ConfigurationError(f"components values must be among {COMPONENT_CELLS}", field="values")
        d = base.to_dict()
        if "fam" not in value:
            d["fam"] = None
        d["train"]["objective"] = "sec" if "sec" in value else "bce"
        return RunConfig.from_dict(d)
    raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}", field="axis")


@dataclass
class SweepCell:
    axis: str
    value: object
    status: str  # "ok" or "failed"
    report: Optional[EvalReport] = None
    error: str = ""


@dataclass
class SweepResult:
    axis: str
    cells: List[SweepCell]

    def sources(self) -> List[str]:
        return sorted({s for c in self.cells if c.report for s in c.report.per_source})

    def to_csv(self, path) -> None:
        srcs = self.sources()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", "status", *srcs, "avg", "error"])
            for c in self.cells:
                if c.report is not None:
                    accs = [repr(c.report.accuracy(s)) if s in c.report.per_source else "" for s in srcs]
                    w.writerow([c.axis, c.value, c.status, *accs, repr(c.report.overall), ""])
                else:
                    w.writerow([c.axis, c.value, c.status, *[""] * len(srcs), "", c.error])


def run_sweep(axis: str, values: Sequence, base: RunConfig, out_dir=None, train_set=None, test_set=None,
              runner=run_experiment) -> SweepResult:
    """One train + evaluate cycle per axis value, all other settings shared.

    A cell that raises is recorded as failed and the sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}", field="axis")
    if (train_set is None) != (test_set is None):
        raise ContractViolation("pass both train_set and test_set or neither")
    if train_set is None and base.data.root:
        train_set, test_set = load_run_data(base)
    cells = []
    for value in values:
        cell_dir = os.path.join(out_dir, "cells", f"{axis}={value}") if out_dir else None
        try:
            cfg = cell_config(base, axis, value)
            result = runner(cfg, cell_dir, train_set, test_set)
            cells.append(SweepCell(axis, value, "ok", result.report))
        except Exception as exc:  # a failed cell must not abort the sweep
            log.warning("sweep cell %s=%s failed: %s", axis, value, exc)
            cells.append(SweepCell(axis, value, "failed", error=f"{type(exc).__name__}: {exc}"))
    result = SweepResult(axis, cells)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.to_csv(os.path.join(out_dir, "sweep.csv"))
    return result


def sample_size_curve(sizes: Sequence[int], base: RunConfig, out_dir=None, train_set=None, test_set=None,
                      runner=run_experiment) -> List[dict]:
    """Accuracy against few-shot training-set size; writes ``curve.csv`` and ``curve.png``."""
    if train_set is not None:
        too_big = [s for s in sizes if s > len(train_set)]
        if too_big:
            raise ConfigurationError(f"sizes {too_big} exceed the {len(train_set)} training images", field="sizes")
    sweep = run_sweep("train_samples", sizes, base, None, train_set, test_set, runner)
    datasets = sorted({d for c in sweep.cells if c.report for d in c.report.dataset_means})
    rows = []
    for c in sweep.cells:
        row = {"size": int(c.value), "status": c.status}
        for ds in datasets:
            row[ds] = c.report.dataset_means.get(ds) if c.report else None
        row["avg"] = c.report.overall if c.report else None
        rows.append(row)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "curve.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["size", *datasets, "avg", "status"])
            for r in rows:
                w.writerow([r["size"], *["" if r[d] is None else repr(r[d]) for d in datasets],
                            "" if r["avg"] is None else repr(r["avg"]), r["status"]])
        _plot_curve(rows, datasets, os.path.join(out_dir, "curve.png"))
    return rows


def _plot_curve(rows, datasets, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ok = [r for r in rows if r["status"] == "ok"]
    for ds in [*datasets, "avg"]:
        ax.plot([r["size"] for r in ok], [r[ds] for r in ok], marker="o", label=ds)
    ax.set_xscale("log")
    ax.set_xlabel("training samples")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- t-SNE -------------------------------------------------------------------

TSNE_GROUPS = ("seen-real", "seen-fake", "unseen-real", "unseen-fake")


@dataclass
class TsneResult:
    coords: np.ndarray
    groups: List[str]
    silhouette: float  # real vs fake on the 2-D coordinates
    embedding_silhouette: float  # real vs fake on the raw embeddings, cosine metric


def real_fake_silhouette(points: np.ndarray, groups: Sequence[str], metric: str = "euclidean") -> float:
    from sklearn.metrics import silhouette_score

    y = np.array([g.endswith("real") for g in groups], dtype=int)
    if len(set(y)) < 2:
        raise ContractViolation("silhouette needs both real and fake points")
    return float(silhouette_score(points, y, metric=metric))


def tsne_plot(embeddings, groups: Sequence[str], perplexity: float = 30.0, seed: int = 0, out_dir=None) -> TsneResult:
    """2-D t-SNE of labelled embeddings, exported as ``tsne.csv`` (and ``tsne.png``).

    ``groups`` names each point, normally one of ``seen-real``,
    ``seen-fake``, ``unseen-real``, ``unseen-fake``; names ending in
    ``real`` count as real for the silhouette score.
    """
    from sklearn.manifold import TSNE

    x = np.asarray(embeddings, dtype=np.float64)
    groups = list(groups)
    if len(groups) != len(x):
        raise ContractViolation("one group name per embedding required")
    if perplexity >= len(x):
        raise ContractViolation(f"perplexity {perplexity} must be below the point count {len(x)}")
    counts = {g: groups.count(g) for g in set(groups)}
    small = {g: n for g, n in counts.items() if n < 4}
    if small:
        raise ContractViolation(f"every group needs at least 4 points, got {small}")
    if np.allclose(x, x[0]):
        raise NumericDomainError("all embeddings are identical; t-SNE is undefined")
    coords = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca",
                  learning_rate="auto", method="exact").fit_transform(x)
    result = TsneResult(coords, groups, real_fake_silhouette(coords, groups),
                        real_fake_silhouette(x, groups, metric="cosine"))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "tsne.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "group"])
            for (cx, cy), g in zip(coords, groups):
                w.writerow([repr(float(cx)), repr(float(cy)), g])
        _plot_tsne(result, os.path.join(out_dir, "tsne.png"))
    return result


def _plot_tsne(result: TsneResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    markers = {"seen": "o", "unseen": "^"}
    colors = {"real": "tab:blue", "fake": "tab:red"}
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for g in sorted(set(result.groups)):
        m = np.array([x == g for x in result.groups])
        kind, _, cls = g.rpartition("-")
        ax.scatter(result.coords[m, 0], result.coords[m, 1], s=8, label=g,
                   marker=markers.get(kind, "o"), c=colors.get(cls, None))
    ax.set_title(f"silhouette(real, fake) = {result.silhouette:.3f}", fontsize=9)
    ax.legend(fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def tsne_groups(seen: ImageSet, unseen: Optional[ImageSet] = None, per_group: int = 50, seed: int = 0):
    """Pick up to ``per_group`` images per {seen, unseen} x {real, fake} group; returns ``(images, groups)``."""
    rng = np.random.default_rng(seed)
    images, groups = [], []
    for kind, ds in (("seen", seen), ("unseen", unseen)):
        if ds is None:
            continue
        for label, cls in ((1, "real"), (0, "fake")):
            idx = np.flatnonzero(ds.labels == label)
            pick = np.sort(rng.choice(idx, min(per_group, len(idx)), replace=False))
            images.append(ds.images[pick])
            groups += [f"{kind}-{cls}"] * len(pick)
    return np.concatenate(images), groups
