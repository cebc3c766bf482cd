"""Low-rank adapters on frozen attention projections (the forgery awareness module).

A frozen weight ``W0`` (``d x k``, torch ``out x in`` convention) is used as
``W0 + scale * B @ A`` with ``B`` (``d x r``) and ``A`` (``r x k``) the only
trainable tensors.  ``B`` starts at zero so a freshly injected encoder is
exactly the pretrained one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ContractViolation, LoadError
from .vit import PROJECTIONS, block_indices, fingerprint

INIT_STD = 0.02


@dataclass(frozen=True)
class FamConfig:
    rank: int = 2
    dropout_p: float = 0.25
    adapted_block_count: int = 12
    projections: Tuple[str, ...] = ("query", "key", "value", "output")
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "projections", tuple(self.projections))
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigurationError(f"rank must be a positive integer, got {self.rank!r}", field="rank")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p!r}", field="dropout_p")
        if not isinstance(self.adapted_block_count, int) or self.adapted_block_count < 1:
            raise ConfigurationError(
                f"adapted_block_count must be a positive integer, got {self.adapted_block_count!r}",
                field="adapted_block_count",
            )
        bad = [p for p in self.projections if p not in PROJECTIONS]
        if bad or not self.projections or len(set(self.projections)) != len(self.projections):
            raise ConfigurationError(f"projections must be distinct names from {sorted(PROJECTIONS)}", field="projections")
        if not self.scale > 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale!r}", field="scale")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "dropout_p": self.dropout_p,
            "adapted_block_count": self.adapted_block_count,
            "projections": list(self.projections),
            "scale": self.scale,
        }


@dataclass(frozen=True, order=True)
class AdapterSite:
    block_index: int
    projection: str

    def __str__(self):
        return f"block{self.block_index}.{self.projection}"

    @classmethod
    def parse(cls, name: str) -> "AdapterSite":
        block, proj = name.split(".")
        return cls(int(block[len("block"):]), proj)


class LoraFactors(nn.Module):
    """Trainable pair ``up`` (B, ``d x r``) and ``down`` (A, ``r x k``)."""

    def __init__(self, d: int, k: int, rank: int, dropout_p: float = 0.0, scale: float = 1.0):
        super().__init__()
        if not 1 <= rank <= min(d, k):
            raise ConfigurationError(f"rank {rank} must lie in [1, min(d, k) = {min(d, k)}]", field="rank")
        self.rank = rank
        self.dropout_p = dropout_p
        self.scale = scale
        self.down = nn.Parameter(torch.zeros(rank, k))
        self.up = nn.Parameter(torch.zeros(d, rank))
        self.dropout = nn.Dropout(dropout_p)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.up.shape[0], self.down.shape[1]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # dropout acts on the branch input and is inert in eval mode
        return self.scale * ((self.dropout(x) @ self.down.T) @ self.up.T)


def init_factors(d: int, k: int, config: FamConfig, seed: int = 0, dtype=torch.float32) -> LoraFactors:
    """``B = 0`` and ``A ~ N(0, 0.02^2)`` drawn from a private generator seeded by ``seed``."""
    if d < 1 or k < 1:
        raise ConfigurationError(f"dimensions must be positive, got d={d}, k={k}")
    factors = LoraFactors(d, k, config.rank, config.dropout_p, config.scale)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        factors.down.copy_(torch.randn(config.rank, k, generator=g, dtype=torch.float64) * INIT_STD)
    return factors.to(dtype)


def _check_shapes(base: torch.Tensor, factors: LoraFactors) -> None:
    if base.dim() != 2 or tuple(base.shape) != tuple(factors.shape):
        raise ContractViolation(f"base matrix {tuple(base.shape)} does not match factors {tuple(factors.shape)}")


def merge_factors(base: torch.Tensor, factors: LoraFactors) -> torch.Tensor:
    """Return ``W0 + scale * B @ A`` as a new tensor."""
    _check_shapes(base, factors)
    with torch.no_grad():
        return base + factors.delta().to(base.dtype)


def unmerge_factors(merged: torch.Tensor, factors: LoraFactors) -> torch.Tensor:
    _check_shapes(merged, factors)
    with torch.no_grad():
        return merged - factors.delta().to(merged.dtype)


def apply_delta(base: torch.Tensor, factors: LoraFactors, x: torch.Tensor, training: bool = False) -> torch.Tensor:
    """``(W0 + scale * B A) x`` for a vector or a batch of row vectors."""
    _check_shapes(base, factors)
    if x.shape[-1] != base.shape[1]:
        raise ContractViolation(f"input dimension {x.shape[-1]} does not match k = {base.shape[1]}")
    was_training = factors.training
    factors.train(training)
    try:
        return x @ base.T + factors(x)
    finally:
        factors.train(was_training)


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus a live low-rank branch."""

    def __init__(self, base: nn.Linear, lora: LoraFactors):
        super().__init__()
        self.base = base
        self.lora = lora

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.lora(x)

    def merged_linear(self) -> nn.Linear:
        """A plain ``nn.Linear`` carrying ``W0 + scale * B A``; this module is left untouched."""
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None)
        out = out.to(self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(merge_factors(self.base.weight, self.lora))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        out.requires_grad_(False)
        return out


def adapter_sites(encoder: nn.Module) -> Dict[AdapterSite, LoraFactors]:
    """Registry of the adapters currently attached to ``encoder``."""
    found = {}
    for i, block in enumerate(encoder.blocks):
        for proj, attr in PROJECTIONS.items():
            mod = getattr(block.attn, attr)
            if isinstance(mod, LoraLinear):
                found[AdapterSite(i, proj)] = mod.lora
    return found


def _site_seed(seed: int, site: AdapterSite) -> int:
    proj_idx = list(PROJECTIONS).index(site.projection)
    return int(np.random.SeedSequence([int(seed), site.block_index, proj_idx]).generate_state(1)[0])


def inject(encoder: nn.Module, config: FamConfig, seed: int = 0) -> Dict[AdapterSite, LoraFactors]:
    """Freeze every encoder parameter and attach adapters to the last blocks.

    Returns the registry ``{AdapterSite: LoraFactors}``; only the factors are
    trainable afterwards.
    """
    depth = encoder.spec.depth
    if config.adapted_block_count > depth:
        raise ConfigurationError(
            f"adapted_block_count {config.adapted_block_count} exceeds encoder depth {depth}",
            field="adapted_block_count",
        )
    if adapter_sites(encoder):
        raise ContractViolation("encoder already carries adapters")
    encoder.requires_grad_(False)
    dtype = next(encoder.parameters()).dtype
    registry = {}
    for i in block_indices(encoder.spec, config.adapted_block_count):
        attn = encoder.blocks[i].attn
        for proj in config.projections:
            site = AdapterSite(i, proj)
            base = getattr(attn, PROJECTIONS[proj])
            factors = init_factors(base.out_features, base.in_features, config, _site_seed(seed, site), dtype)
            setattr(attn, PROJECTIONS[proj], LoraLinear(base, factors))
            registry[site] = factors
    encoder.train(encoder.training)
    return registry


def remove_adapters(encoder: nn.Module, merge: bool = False) -> nn.Module:
    """Detach every adapter in place, optionally folding it into the base weight.

    Merging writes into the base ``nn.Linear``; do not merge in place on an
    extractor whose base weights are shared with a guide (use
    :func:`merged_copy` instead).
    """
    for i, block in enumerate(encoder.blocks):
        for attr in PROJECTIONS.values():
            mod = getattr(block.attn, attr)
            if isinstance(mod, LoraLinear):
                if merge:
                    with torch.no_grad():
                        mod.base.weight.copy_(merge_factors(mod.base.weight, mod.lora))
                setattr(block.attn, attr, mod.base)
    return encoder


def merged_copy(encoder: nn.Module) -> nn.Module:
    """Independent copy of ``encoder`` with all adapters folded into plain weights."""
    import copy

    out = copy.deepcopy(encoder)
    for block in out.blocks:
        for attr in PROJECTIONS.values():
            mod = getattr(block.attn, attr)
            if isinstance(mod, LoraLinear):
                setattr(block.attn, attr, mod.merged_linear())
    return out


def trainable_parameter_count(registry: Dict[AdapterSite, LoraFactors]) -> int:
    return sum(f.up.numel() + f.down.numel() for f in registry.values())


def expected_parameter_count(spec, config: FamConfig) -> int:
    """Analytic ``sum over sites of r * (d + k)``; every attention projection is ``width x width``."""
    sites = min(config.adapted_block_count, spec.depth) * len(config.projections)
    return sites * config.rank * (spec.width + spec.width)


def save_adapters(path, encoder: nn.Module, config: FamConfig, extra: dict | None = None) -> None:
    """Write adapter factors as little-endian float32 tensors keyed ``block{i}.{projection}.{up|down}``.

    The header records rank, scale, dropout_p and the fingerprint of the
    base encoder.  ``extra`` tensors (e.g. ``log_tau``) are stored alongside.
    """
    from safetensors.torch import save_file

    tensors = {}
    for site, f in adapter_sites(encoder).items():
        tensors[f"{site}.up"] = f.up.detach().to(torch.float32).contiguous()
        tensors[f"{site}.down"] = f.down.detach().to(torch.float32).contiguous()
    for key, value in (extra or {}).items():
        tensors[key] = torch.as_tensor(value).detach().to(torch.float32).reshape(-1).contiguous()
    meta = {
        "format": "famsec-adapters/1",
        "rank": str(config.rank),
        "scale": repr(config.scale),
        "dropout_p": repr(config.dropout_p),
        "fam_config": json.dumps(config.to_dict()),
        "encoder_fingerprint": fingerprint(encoder, include_adapters=False),
    }
    save_file(tensors, os.fspath(path), metadata=meta)


def load_adapters(path, encoder: nn.Module) -> Tuple[FamConfig, dict]:
    """Attach the adapters stored at ``path`` to ``encoder`` (injecting first if needed).

    Returns the stored :class:`FamConfig` and any extra tensors.
    """
    from safetensors import safe_open

    path = os.fspath(path)
    if not os.path.isfile(path):
        raise LoadError(f"adapter checkpoint not found: {path}")
    try:
        with safe_open(path, framework="pt") as f:
            meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as exc:
        raise LoadError(f"cannot read adapter checkpoint {path}: {exc}") from exc
    if meta.get("format") != "famsec-adapters/1":
        raise LoadError(f"{path} is not a famsec adapter checkpoint")
    if meta["encoder_fingerprint"] != fingerprint(encoder, include_adapters=False):
        raise LoadError(f"{path} was trained on a different base encoder")
    config = FamConfig(**{**json.loads(meta["fam_config"])})
    registry = adapter_sites(encoder) or inject(encoder, config)
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        for site, f in registry.items():
            f.up.copy_(tensors.pop(f"{site}.up").to(dtype))
            f.down.copy_(tensors.pop(f"{site}.down").to(dtype))
    leftovers = {k: v for k, v in tensors.items() if not (k.endswith(".up") or k.endswith(".down"))}
    if len(leftovers) != len(tensors):
        raise LoadError(f"{path} holds adapters for sites the encoder does not have")
    return config, leftovers
