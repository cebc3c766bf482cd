"""Semantic-feature-guided contrastive training.

Every batch is embedded by the frozen guide and by the adapted extractor;
all ``N x N`` guide/extractor pairs are scored by cosine similarity and
labelled 1 when both images share a class.  The loss is the mean binary
cross-entropy of ``sigmoid(p / tau)`` against those labels, with ``tau``
learned through its logarithm.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractViolation, NumericDomainError, TrainingDivergence
from .lora import FamConfig, save_adapters
from .vit import EncoderPair

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
OBJECTIVES = ("sec", "bce")


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContractViolation(f"length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericDomainError("cosine similarity of a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def similarity_matrix(guide_emb: torch.Tensor, extractor_emb: torch.Tensor) -> torch.Tensor:
    """``p[i, j] = cos(guide_emb[i], extractor_emb[j])``."""
    gn = guide_emb.norm(dim=-1, keepdim=True)
    tn = extractor_emb.norm(dim=-1, keepdim=True)
    if bool((gn == 0).any()) or bool((tn == 0).any()):
        raise NumericDomainError("zero-norm embedding in batch")
    return (guide_emb / gn) @ (extractor_emb / tn).T


def pair_labels(labels) -> torch.Tensor:
    """XNOR of every label pair: 1 where ``y_i == y_j``."""
    y = torch.as_tensor(labels)
    if y.dim() != 1:
        raise ContractViolation("labels must be a 1-D sequence")
    if not bool(((y == 0) | (y == 1)).all()):
        raise ContractViolation(f"labels must be 0 or 1, got {y.tolist()}")
    y = y.to(torch.int64)
    return (y[:, None] == y[None, :]).to(torch.float64)


def sec_loss(p: torch.Tensor, l: torch.Tensor, tau) -> torch.Tensor:
    """Mean BCE over all ``N * N`` entries (diagonal included) between ``l`` and ``sigmoid(p / tau)``.

    ``sigmoid`` is clamped to ``[1e-12, 1 - 1e-12]`` before the log.
    """
    tau = torch.as_tensor(tau, dtype=p.dtype)
    if not bool(tau > 0):
        raise ContractViolation(f"temperature must be positive, got {float(tau)}")
    if p.shape != l.shape or p.dim() != 2:
        raise ContractViolation(f"p {tuple(p.shape)} and l {tuple(l.shape)} must be matching 2-D matrices")
    l = l.to(p.dtype)
    z = p / tau
    # log(sigmoid(z)) and log(1 - sigmoid(z)) without the cancellation in 1 - sigmoid(z);
    # clamping the logs is the same as clamping sigmoid(z) to [PROB_CLAMP, 1 - PROB_CLAMP]
    lo, hi = math.log(PROB_CLAMP), math.log1p(-PROB_CLAMP)
    log_s = F.logsigmoid(z).clamp(lo, hi)
    log_1ms = F.logsigmoid(-z).clamp(lo, hi)
    return -(l * log_s + (1 - l) * log_1ms).mean()


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    tau_init: float = 0.07
    seed: int = 0
    balance: bool = True
    objective: str = "sec"  # "bce" trains a linear head with a classification loss
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigurationError(f"steps must be a non-negative integer, got {self.steps!r}", field="steps")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size!r}", field="batch_size")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr!r}", field="lr")
        if not self.tau_init > 0:
            raise ConfigurationError(f"tau_init must be positive, got {self.tau_init!r}", field="tau_init")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}", field="objective")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0", field="checkpoint_every")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainState:
    params: List[nn.Parameter]
    log_tau: nn.Parameter
    optimizer: torch.optim.Optimizer
    head: Optional[nn.Linear] = None
    step: int = 0
    history: List[dict] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return float(self.log_tau.detach().exp())


def make_state(pair: EncoderPair, config: TrainConfig) -> TrainState:
    """Optimizer state over every trainable extractor parameter plus ``log tau`` (or the BCE head)."""
    dtype = next(pair.extractor.parameters()).dtype
    params = [p for p in pair.extractor.parameters() if p.requires_grad]
    if not params:
        raise ConfigurationError("nothing to train: the extractor has no trainable parameters")
    log_tau = nn.Parameter(torch.tensor(math.log(config.tau_init), dtype=dtype))
    head = None
    group = list(params)
    if config.objective == "sec":
        group.append(log_tau)
    else:
        g = torch.Generator().manual_seed(int(config.seed))
        d = pair.extractor.spec.embed_dim
        head = nn.Linear(d, 1).to(dtype)
        with torch.no_grad():
            head.weight.copy_(torch.randn(1, d, generator=g, dtype=dtype) * d**-0.5)
            head.bias.zero_()
        group.extend(head.parameters())
    opt = torch.optim.Adam(group, lr=config.lr, betas=config.betas, eps=config.eps)
    return TrainState(params=params, log_tau=log_tau, optimizer=opt, head=head)


def batch_loss(state: TrainState, pair: EncoderPair, pixels: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Objective value for one batch under the current parameters (no optimizer side effects)."""
    if state.head is not None:
        logits = state.head(pair.extractor(pixels)).squeeze(-1)
        return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
    with torch.no_grad():
        guide_emb = pair.guide(pixels)
    p = similarity_matrix(guide_emb, pair.extractor(pixels))
    return sec_loss(p, pair_labels(labels), state.log_tau.exp())


def train_step(state: TrainState, batch, pair: EncoderPair) -> float:
    """One optimizer step; returns the loss evaluated before the update."""
    labels = torch.as_tensor(batch.labels)
    if len(labels) < 2:
        raise ContractViolation("a training batch needs at least two images")
    if bool((labels == labels[0]).all()):
        warnings.warn("single-class batch: every pair label is 1", RuntimeWarning, stacklevel=2)
    dtype = next(pair.extractor.parameters()).dtype
    pixels = batch.pixels.to(dtype)
    pair.guide.eval()
    pair.extractor.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(state, pair, pixels, labels)
    value = float(loss.detach())
    diag = {"step": state.step, "loss": value, "tau": state.tau}
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss at step {state.step}", diag)
    loss.backward()
    grads = [p.grad for g in state.optimizer.param_groups for p in g["params"] if p.grad is not None]
    grad_norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads))) if grads else 0.0
    if not math.isfinite(grad_norm):
        raise TrainingDivergence(f"non-finite gradient at step {state.step}", {**diag, "grad_norm": grad_norm})
    state.optimizer.step()
    state.step += 1
    return value


def train(
    config: TrainConfig,
    dataset,
    pair: EncoderPair,
    out_dir=None,
    fam_config: Optional[FamConfig] = None,
    crop_size: Optional[int] = None,
) -> TrainState:
    """Run ``config.steps`` optimizer steps over seeded, epoch-reshuffled batches.

    Randomness (batch order, crops, dropout masks) is derived from
    ``config.seed`` only; the global torch RNG is restored afterwards.
    Checkpoints go to ``out_dir/checkpoints`` every ``checkpoint_every`` steps
    and once at the end when ``out_dir`` is given.
    """
    from .data import Batcher

    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty", field="data")
    state = make_state(pair, config)
    batcher = Batcher(dataset, config.batch_size, balance=config.balance, seed=config.seed, crop_size=crop_size)
    ckpt_dir = os.path.join(out_dir, "checkpoints") if out_dir else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        stream = batcher.stream()
        t0 = time.perf_counter()
        while state.step < config.steps:
            batch = next(stream)
            tau = state.tau
            loss = train_step(state, batch, pair)
            state.history.append(
                {"step": state.step, "loss": loss, "tau": tau, "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
            )
            if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, pair, fam_config, os.path.join(ckpt_dir, f"step_{state.step:06d}.safetensors"))
    pair.extractor.eval()
    if ckpt_dir:
        save_checkpoint(state, pair, fam_config, os.path.join(ckpt_dir, "final.safetensors"))
        write_history(state.history, os.path.join(out_dir, "losses.csv"))
    return state


def save_checkpoint(state: TrainState, pair: EncoderPair, fam_config: Optional[FamConfig], path) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    extra = {"log_tau": state.log_tau.detach()}
    if state.head is not None:
        extra["head.weight"] = state.head.weight.detach()
        extra["head.bias"] = state.head.bias.detach()
    if fam_config is not None:
        save_adapters(path, pair.extractor, fam_config, extra=extra)
    else:
        from safetensors.torch import save_file

        tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in pair.extractor.state_dict().items()}
        tensors.update({k: v.to(torch.float32).reshape(-1).contiguous() for k, v in extra.items()})
        save_file(tensors, os.fspath(path), metadata={"format": "famsec-full/1"})


HISTORY_COLUMNS = ("step", "loss", "tau", "wall_ms")


def write_history(history, path) -> None:
    """Loss history as CSV ``step,loss,tau,wall_ms``; floats use ``repr`` so reruns compare byte-exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["step"], repr(row["loss"]), repr(row["tau"]), row["wall_ms"]])


def read_history(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"step": int(r["step"]), "loss": float(r["loss"]), "tau": float(r["tau"]), "wall_ms": float(r["wall_ms"])}
            for r in csv.DictReader(fh)
        ]


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or window > len(values):
        raise ContractViolation(f"window {window} does not fit {len(values)} values")
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window
