"""Vision-transformer encoder, guide/extractor pairing and weight files.

The encoder follows the CLIP visual tower layout (class token, learned
positions, pre-LN blocks with separate q/k/v/out projections, post-LN on the
pooled token and a bias-free output projection), so pretrained CLIP weights
map onto it one tensor at a time.  Small specs give CPU-sized toy encoders
that share the exact same code path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ContractViolation, LoadError, NumericDomainError

# adapter projection name -> attribute on Attention
PROJECTIONS = {"query": "q_proj", "key": "k_proj", "value": "v_proj", "output": "out_proj"}

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class EncoderSpec:
    image_size: int = 224
    patch_size: int = 14
    depth: int = 24
    width: int = 1024
    heads: int = 16
    embed_dim: int = 768
    mlp_ratio: float = 4.0
    pool: str = "class_token"  # or "mean_pool"
    activation: str = "quick_gelu"
    layer_norm_eps: float = 1e-5
    pixel_mean: Optional[tuple] = None
    pixel_std: Optional[tuple] = None

    def __post_init__(self):
        for name in ("image_size", "patch_size", "depth", "width", "heads", "embed_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}", field=name)
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}",
                field="patch_size",
            )
        if self.width % self.heads:
            raise ConfigurationError(
                f"width {self.width} is not divisible by heads {self.heads}", field="heads"
            )
        if self.pool not in ("class_token", "mean_pool"):
            raise ConfigurationError(f"unknown pool {self.pool!r}", field="pool")
        if self.activation not in ("quick_gelu", "gelu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}", field="activation")
        if (self.pixel_mean is None) != (self.pixel_std is None):
            raise ConfigurationError("pixel_mean and pixel_std must be given together", field="pixel_mean")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2 + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("pixel_mean", "pixel_std"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown encoder fields {sorted(unknown)}", field=sorted(unknown)[0])
        for key in ("pixel_mean", "pixel_std"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


TOY_SPEC = EncoderSpec(
    image_size=32, patch_size=8, depth=4, width=64, heads=4, embed_dim=32, activation="gelu",
    pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.25, 0.25, 0.25),
)
VIT_L14_SPEC = EncoderSpec(
    image_size=224, patch_size=14, depth=24, width=1024, heads=16, embed_dim=768,
    pixel_mean=CLIP_MEAN, pixel_std=CLIP_STD,
)


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int, activation: str):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.act = QuickGELU() if activation == "quick_gelu" else nn.GELU()
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.ln_1 = nn.LayerNorm(spec.width, eps=spec.layer_norm_eps)
        self.attn = Attention(spec.width, spec.heads)
        self.ln_2 = nn.LayerNorm(spec.width, eps=spec.layer_norm_eps)
        self.mlp = MLP(spec.width, int(spec.width * spec.mlp_ratio), spec.activation)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class VisionEncoder(nn.Module):
    """Maps a ``(B, 3, H, W)`` batch in [0, 1] to ``(B, embed_dim)`` embeddings."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.patch_embed = nn.Conv2d(3, w, kernel_size=spec.patch_size, stride=spec.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(w))
        self.position_embedding = nn.Parameter(torch.zeros(spec.num_tokens, w))
        self.ln_pre = nn.LayerNorm(w, eps=spec.layer_norm_eps)
        self.blocks = nn.ModuleList([Block(spec) for _ in range(spec.depth)])
        self.ln_post = nn.LayerNorm(w, eps=spec.layer_norm_eps)
        self.proj = nn.Linear(w, spec.embed_dim, bias=False)
        if spec.pixel_mean is not None:
            self.register_buffer("pixel_mean", torch.tensor(spec.pixel_mean).view(1, 3, 1, 1), persistent=False)
            self.register_buffer("pixel_std", torch.tensor(spec.pixel_std).view(1, 3, 1, 1), persistent=False)
        else:
            self.pixel_mean = self.pixel_std = None

    def tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        """Token sequence after the last block, shape ``(B, num_tokens, width)``."""
        if self.pixel_mean is not None:
            pixels = (pixels - self.pixel_mean.to(pixels.dtype)) / self.pixel_std.to(pixels.dtype)
        x = self.patch_embed(pixels).flatten(2).transpose(1, 2)
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.position_embedding
        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        s = self.spec.image_size
        if pixels.dim() != 4 or pixels.shape[1:] != (3, s, s):
            raise ContractViolation(f"expected a (B, 3, {s}, {s}) batch, got {tuple(pixels.shape)}")
        x = self.tokens(pixels)
        pooled = x[:, 0] if self.spec.pool == "class_token" else x[:, 1:].mean(dim=1)
        return self.proj(self.ln_post(pooled))


def _init_weights(encoder: VisionEncoder, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    spec = encoder.spec
    with torch.no_grad():
        for name, p in encoder.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln_" in name or name.startswith("ln_"):
                p.fill_(1.0)
            elif name == "class_embedding":
                p.copy_(torch.randn(p.shape, generator=g) * spec.width**-0.5)
            elif name == "position_embedding":
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g) * fan_in**-0.5)


def build_encoder(spec: EncoderSpec, seed: int = 0, dtype=torch.float32) -> VisionEncoder:
    """Randomly initialised encoder; parameters depend only on ``spec`` and ``seed``."""
    if not isinstance(spec, EncoderSpec):
        raise ConfigurationError("spec must be an EncoderSpec")
    encoder = VisionEncoder(spec)
    _init_weights(encoder, seed)
    return encoder.to(dtype).eval()


def to_pixels(images, dtype=torch.float32) -> torch.Tensor:
    """Convert HxWx3 images (array, tensor or list of them) into a ``(B, 3, H, W)`` tensor."""
    if isinstance(images, (list, tuple)):
        if not images:
            raise ContractViolation("empty image batch")
        images = np.stack([np.asarray(im) for im in images])
    t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ContractViolation(f"expected HxWx3 images, got shape {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise ContractViolation("empty image batch")
    return t.permute(0, 3, 1, 2).to(dtype).contiguous()


def check_embeddings(emb: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(emb)):
        raise NumericDomainError("embedding has non-finite entries")
    if np.any(np.linalg.norm(emb, axis=-1) == 0):
        raise NumericDomainError("embedding has zero norm")
    return emb


def embed(encoder: nn.Module, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings, one row per image, input order preserved."""
    param = next(encoder.parameters())
    pixels = to_pixels(images, dtype=param.dtype)
    s = encoder.spec.image_size
    if pixels.shape[2:] != (s, s):
        raise ContractViolation(f"images must be {s}x{s}, got {tuple(pixels.shape[2:])}")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            out = [encoder(pixels[i : i + batch_size]) for i in range(0, len(pixels), batch_size)]
    finally:
        encoder.train(was_training)
    return check_embeddings(torch.cat(out).cpu().numpy())


def _canonical_name(name: str) -> str:
    # LoRA wrappers nest the original Linear under ``.base``
    return name.replace(".base.", ".")


def base_state(encoder: nn.Module) -> dict:
    """Pretrained (non-adapter) parameters keyed by their un-wrapped names."""
    return {
        _canonical_name(k): v
        for k, v in encoder.state_dict().items()
        if ".lora." not in k and not k.startswith("lora.")
    }


def _hash_tensors(tensors: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(tensors):
        t = tensors[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def parameter_checksum(encoder: nn.Module, include_adapters: bool = False) -> str:
    tensors = encoder.state_dict() if include_adapters else base_state(encoder)
    return _hash_tensors(tensors)


def fingerprint(encoder: nn.Module, include_adapters: bool = True) -> str:
    """``"<spec hash>:<parameter hash>"``; adapters are part of it unless excluded."""
    spec_hash = hashlib.sha256(json.dumps(encoder.spec.to_dict(), sort_keys=True).encode()).hexdigest()
    return f"{spec_hash[:16]}:{parameter_checksum(encoder, include_adapters)[:32]}"


@dataclass
class EncoderPair:
    """Frozen guide ``G`` and adapter-carrying extractor ``T`` built from the same weights."""

    guide: nn.Module
    extractor: nn.Module

    @classmethod
    def from_encoder(cls, encoder: VisionEncoder, share_weights: bool = True) -> "EncoderPair":
        """Freeze ``encoder`` as the guide and clone it as the extractor.

        With ``share_weights`` the extractor reuses the guide's parameter
        tensors (read-only); pass ``False`` when the extractor's base weights
        will themselves be trained.
        """
        encoder.requires_grad_(False)
        encoder.eval()
        memo = {id(p): p for p in encoder.parameters()} if share_weights else {}
        extractor = copy.deepcopy(encoder, memo)
        return cls(guide=encoder, extractor=extractor)


def save_encoder(encoder: VisionEncoder, path) -> None:
    """Write base weights with the spec and fingerprint needed by :func:`attach_pretrained`."""
    from safetensors.torch import save_file

    tensors = {k: v.detach().contiguous().to(torch.float32) for k, v in base_state(encoder).items()}
    meta = {
        "spec": json.dumps(encoder.spec.to_dict(), sort_keys=True),
        "fingerprint": fingerprint(encoder, include_adapters=False),
        "format": "famsec-encoder/1",
    }
    save_file(tensors, os.fspath(path), metadata=meta)


def attach_pretrained(path, spec: EncoderSpec, dtype=torch.float32) -> VisionEncoder:
    """Load an encoder weights file written by :func:`save_encoder` or :func:`convert_hf_clip`.

    The file's recorded spec must equal ``spec`` and the stored parameters
    must hash to the recorded fingerprint, otherwise :class:`LoadError`.
    """
    from safetensors import safe_open

    path = os.fspath(path)
    if not os.path.isfile(path):
        raise LoadError(f"weights file not found: {path}")
    try:
        with safe_open(path, framework="pt") as f:
            meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as exc:  # safetensors raises several unrelated types
        raise LoadError(f"cannot read weights file {path}: {exc}") from exc
    if "spec" not in meta:
        raise LoadError(f"{path} has no encoder spec header")
    stored = EncoderSpec.from_dict(json.loads(meta["spec"]))
    if stored != spec:
        diff = [f.name for f in dataclasses.fields(spec) if getattr(stored, f.name) != getattr(spec, f.name)]
        raise LoadError(f"weights in {path} were written for a different spec (fields {diff})")
    encoder = VisionEncoder(spec)
    try:
        encoder.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise LoadError(f"weights in {path} do not fit the spec: {exc}") from exc
    if meta.get("fingerprint") and fingerprint(encoder, include_adapters=False) != meta["fingerprint"]:
        raise LoadError(f"fingerprint mismatch for {path}")
    return encoder.to(dtype).eval()


_HF_BLOCK_MAP = {
    "layer_norm1": "ln_1",
    "layer_norm2": "ln_2",
    "self_attn.q_proj": "attn.q_proj",
    "self_attn.k_proj": "attn.k_proj",
    "self_attn.v_proj": "attn.v_proj",
    "self_attn.out_proj": "attn.out_proj",
    "mlp.fc1": "mlp.fc1",
    "mlp.fc2": "mlp.fc2",
}


def convert_hf_clip(model) -> VisionEncoder:
    """Build an encoder from a ``transformers`` ``CLIPVisionModelWithProjection``.

    Pixel normalisation uses the CLIP constants, so the converted encoder
    takes raw [0, 1] images.
    """
    cfg = model.config
    act = {"quick_gelu": "quick_gelu", "gelu": "gelu"}.get(cfg.hidden_act)
    if act is None:
        raise ConfigurationError(f"unsupported activation {cfg.hidden_act!r}", field="activation")
    spec = EncoderSpec(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        depth=cfg.num_hidden_layers,
        width=cfg.hidden_size,
        heads=cfg.num_attention_heads,
        embed_dim=cfg.projection_dim,
        mlp_ratio=cfg.intermediate_size / cfg.hidden_size,
        activation=act,
        layer_norm_eps=cfg.layer_norm_eps,
        pixel_mean=CLIP_MEAN,
        pixel_std=CLIP_STD,
    )
    src = {k: v for k, v in model.state_dict().items()}
    vm = "vision_model."
    out = {
        "patch_embed.weight": src[vm + "embeddings.patch_embedding.weight"],
        "class_embedding": src[vm + "embeddings.class_embedding"],
        "position_embedding": src[vm + "embeddings.position_embedding.weight"],
        "ln_pre.weight": src[vm + "pre_layrnorm.weight"],
        "ln_pre.bias": src[vm + "pre_layrnorm.bias"],
        "ln_post.weight": src[vm + "post_layernorm.weight"],
        "ln_post.bias": src[vm + "post_layernorm.bias"],
        "proj.weight": src["visual_projection.weight"],
    }
    for i in range(spec.depth):
        for hf, ours in _HF_BLOCK_MAP.items():
            for suffix in ("weight", "bias"):
                out[f"blocks.{i}.{ours}.{suffix}"] = src[f"{vm}encoder.layers.{i}.{hf}.{suffix}"]
    encoder = VisionEncoder(spec)
    encoder.load_state_dict(out, strict=True)
    return encoder.eval()


def block_indices(spec: EncoderSpec, adapted_block_count: int) -> Sequence[int]:
    """Indices of the last ``adapted_block_count`` blocks."""
    if not 0 <= adapted_block_count <= spec.depth:
        raise ConfigurationError(
            f"adapted_block_count {adapted_block_count} outside [0, depth={spec.depth}]",
            field="adapted_block_count",
        )
    return list(range(spec.depth - adapted_block_count, spec.depth))
