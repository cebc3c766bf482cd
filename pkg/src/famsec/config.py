"""Run configuration: one JSON document that fully determines a run.

Keys (all optional, defaults shown by ``RunConfig().to_dict()``)::

    {
      "encoder":    {EncoderSpec fields},      # ignored when "pretrained" is set
      "encoder_seed": 0,
      "pretrained": null,                      # path to an encoder weights file
      "fam":        {FamConfig fields} | null, # null = fully fine-tune the extractor
      "train":      {TrainConfig fields},
      "data":       {DataConfig fields},
      "bank":       {"k_per_class": 1, "aggregation": "single", "seed": 0}
    }
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .errors import ConfigurationError
from .inference import AGGREGATIONS
from .lora import FamConfig
from .sec import TrainConfig
from .vit import TOY_SPEC, EncoderSpec

RUNS_ENV = "FAMSEC_RUNS_DIR"


@dataclass
class DataConfig:
    root: str = ""
    train_sources: Optional[List[str]] = None  # None = every source under train/
    test_sources: Optional[List[str]] = None
    train_samples: Optional[int] = None  # class-balanced few-shot subset of the training split
    subset_seed: int = 0
    crop_size: Optional[int] = None  # random training crops; evaluation uses centre crops
    groups: Optional[Dict[str, str]] = None  # source -> dataset name for per-dataset means

    def __post_init__(self):
        if self.train_samples is not None and self.train_samples < 2:
            raise ConfigurationError("train_samples must be at least 2", field="train_samples")


@dataclass
class BankConfig:
    k_per_class: int = 1
    aggregation: str = "single"
    seed: int = 0

    def __post_init__(self):
        if self.k_per_class < 1:
            raise ConfigurationError("k_per_class must be at least 1", field="k_per_class")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}", field="aggregation")


def _build(cls, d, section):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigurationError(f"section {section!r} must be an object", field=section)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown key {section}.{unknown[0]}", field=f"{section}.{unknown[0]}")
    try:
        return cls(**d)
    except ConfigurationError as exc:
        exc.field = f"{section}.{exc.field}" if exc.field else section
        raise
    except TypeError as exc:
        raise ConfigurationError(f"bad {section} section: {exc}", field=section) from exc


@dataclass
class RunConfig:
    encoder: EncoderSpec = TOY_SPEC
    encoder_seed: int = 0
    pretrained: Optional[str] = None
    # half the depth: last 12 of 24 at ViT-L/14 scale, last 2 of 4 for the toy encoder
    fam: Optional[FamConfig] = field(default_factory=lambda: FamConfig(adapted_block_count=TOY_SPEC.depth // 2))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bank: BankConfig = field(default_factory=BankConfig)

    def validate(self) -> "RunConfig":
        if self.fam is not None and self.fam.adapted_block_count > self.encoder.depth:
            raise ConfigurationError(
                f"fam.adapted_block_count {self.fam.adapted_block_count} exceeds encoder depth {self.encoder.depth}",
                field="fam.adapted_block_count",
            )
        if self.fam is not None and self.fam.rank > self.encoder.width:
            raise ConfigurationError("fam.rank exceeds the attention width", field="fam.rank")
        return self

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "encoder_seed": self.encoder_seed,
            "pretrained": self.pretrained,
            "fam": self.fam.to_dict() if self.fam is not None else None,
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "bank": dataclasses.asdict(self.bank),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {"encoder", "encoder_seed", "pretrained", "fam", "train", "data", "bank"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown key {unknown[0]}", field=unknown[0])
        try:
            encoder = EncoderSpec.from_dict(d["encoder"]) if "encoder" in d else TOY_SPEC
        except ConfigurationError as exc:
            exc.field = f"encoder.{exc.field}" if exc.field else "encoder"
            raise
        if "fam" not in d:
            fam = FamConfig(adapted_block_count=max(1, encoder.depth // 2))
        elif d["fam"] is None:
            fam = None
        else:
            fam = _build(FamConfig, d["fam"], "fam")
        cfg = cls(
            encoder=encoder,
            encoder_seed=int(d.get("encoder_seed", 0)),
            pretrained=d.get("pretrained"),
            fam=fam,
            train=_build(TrainConfig, d.get("train"), "train"),
            data=_build(DataConfig, d.get("data"), "data"),
            bank=_build(BankConfig, d.get("bank"), "bank"),
        )
        return cfg.validate()

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level fields or dotted section keys (``"fam.rank": 4``) replaced."""
        d = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.partition(".")
            if name:
                if d.get(section) is None:
                    raise ConfigurationError(f"cannot set {key}: section {section} is disabled", field=key)
                d[section][name] = value
            else:
                d[section] = value
        return RunConfig.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}", field="config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}", field="config") from exc
    return RunConfig.from_dict(d)


def runs_root() -> str:
    return os.environ.get(RUNS_ENV, "runs")
