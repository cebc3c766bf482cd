"""Cosine-similarity classification against stored real/fake reference embeddings.

A test embedding is compared with the fake references (``d_f``) and the real
references (``d_r``); the image is called fake when ``d_f > d_r`` and real
otherwise, so exact ties go to real.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, LoadError, NumericDomainError
from .vit import embed, fingerprint

AGGREGATIONS = ("single", "mean_centroid")

MAGIC = b"FEMB"
VERSION = 1
# magic, version, embed_dim, count, n_real, aggregation code, fingerprint byte length
_HEADER = struct.Struct("<4sHIIIBH")
_AGG_CODES = {"single": 0, "mean_centroid": 1, None: 255}


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("embedding has non-finite entries")
    if np.any(norms == 0):
        raise NumericDomainError("zero-norm embedding")
    return x / norms


@dataclass
class ReferenceBank:
    real_refs: np.ndarray  # (n_real, D)
    fake_refs: np.ndarray  # (n_fake, D)
    aggregation: str = "single"
    fingerprint: str = ""

    def __post_init__(self):
        self.real_refs = np.atleast_2d(np.asarray(self.real_refs, dtype=np.float64))
        self.fake_refs = np.atleast_2d(np.asarray(self.fake_refs, dtype=np.float64))
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}", field="aggregation")
        if self.real_refs.size == 0 or self.fake_refs.size == 0:
            raise ConfigurationError("a reference bank needs at least one real and one fake embedding")
        if self.real_refs.shape[1] != self.fake_refs.shape[1]:
            raise ContractViolation("real and fake references differ in embedding dimension")
        self._real_unit = _unit_rows(self.real_refs)
        self._fake_unit = _unit_rows(self.fake_refs)

    @property
    def embed_dim(self) -> int:
        return self.real_refs.shape[1]

    def scores(self, embeddings) -> tuple:
        """``(d_f, d_r)`` arrays: best cosine similarity to the fake and to the real references."""
        e = np.asarray(embeddings, dtype=np.float64)
        if e.shape[-1] != self.embed_dim:
            raise ContractViolation(f"embedding dimension {e.shape[-1]} != bank dimension {self.embed_dim}")
        u = _unit_rows(np.atleast_2d(e))
        return (u @ self._fake_unit.T).max(axis=1), (u @ self._real_unit.T).max(axis=1)


@dataclass(frozen=True)
class Verdict:
    label: str  # "real" or "fake"
    d_f: float
    d_r: float

    @property
    def margin(self) -> float:
        return self.d_f - self.d_r

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


def decide(d_f: float, d_r: float) -> str:
    return "fake" if d_f > d_r else "real"


def bank_from_embeddings(real_emb, fake_emb, aggregation: str = "single", fingerprint: str = "") -> ReferenceBank:
    real_emb = np.atleast_2d(np.asarray(real_emb, dtype=np.float64))
    fake_emb = np.atleast_2d(np.asarray(fake_emb, dtype=np.float64))
    if aggregation == "mean_centroid":
        real_emb, fake_emb = real_emb.mean(axis=0, keepdims=True), fake_emb.mean(axis=0, keepdims=True)
    return ReferenceBank(real_emb, fake_emb, aggregation, fingerprint)


def build_bank(dataset, extractor, k_per_class: int = 1, aggregation: str = "single", seed: int = 0) -> ReferenceBank:
    """Draw ``k_per_class`` real and fake images from ``dataset`` with ``seed`` and embed them.

    ``single`` keeps the ``k`` raw embeddings per class; ``mean_centroid``
    keeps their component-wise mean.
    """
    if aggregation not in AGGREGATIONS:
        raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}", field="aggregation")
    if k_per_class < 1:
        raise ConfigurationError("k_per_class must be at least 1", field="k_per_class")
    real_idx = np.flatnonzero(dataset.labels == 1)
    fake_idx = np.flatnonzero(dataset.labels == 0)
    if len(real_idx) < k_per_class or len(fake_idx) < k_per_class:
        raise ConfigurationError(
            f"need {k_per_class} images per class, have {len(real_idx)} real and {len(fake_idx)} fake",
            field="k_per_class",
        )
    rng = np.random.default_rng(seed)
    real_pick = rng.choice(real_idx, size=k_per_class, replace=False)
    fake_pick = rng.choice(fake_idx, size=k_per_class, replace=False)
    return bank_from_embeddings(
        embed(extractor, dataset.images[real_pick]),
        embed(extractor, dataset.images[fake_pick]),
        aggregation,
        fingerprint(extractor),
    )


def _check_fingerprint(bank: ReferenceBank, extractor) -> None:
    if extractor is not None and bank.fingerprint and bank.fingerprint != fingerprint(extractor):
        raise ContractViolation("reference bank was built with a different extractor")


def _as_embeddings(x, extractor, single: bool) -> np.ndarray:
    arr = np.asarray(x)
    image_ndim = 3 if single else 4
    if arr.ndim == image_ndim and arr.shape[-1] == 3:
        if extractor is None:
            raise ContractViolation("an extractor is required to classify images")
        return embed(extractor, arr)
    if arr.ndim == image_ndim - 2:
        return np.atleast_2d(arr)
    raise ContractViolation(f"cannot interpret input of shape {arr.shape} as image(s) or embedding(s)")


def classify(x, bank: ReferenceBank, extractor=None) -> Verdict:
    """Verdict for one image (``H x W x 3``) or one precomputed embedding."""
    _check_fingerprint(bank, extractor)
    d_f, d_r = bank.scores(_as_embeddings(x, extractor, single=True))
    return Verdict(decide(d_f[0], d_r[0]), float(d_f[0]), float(d_r[0]))


def classify_batch(xs, bank: ReferenceBank, extractor=None) -> List[Verdict]:
    """Order-preserving verdicts for a batch of images or an ``(n, D)`` embedding matrix."""
    _check_fingerprint(bank, extractor)
    d_f, d_r = bank.scores(_as_embeddings(xs, extractor, single=False))
    return [Verdict(decide(f, r), float(f), float(r)) for f, r in zip(d_f, d_r)]


# --- binary embedding / bank files ------------------------------------------

def _write(path, rows: np.ndarray, n_real: int, aggregation, fp: str) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    fp_bytes = fp.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows.shape[1], rows.shape[0], n_real, _AGG_CODES[aggregation], len(fp_bytes)))
        fh.write(fp_bytes)
        fh.write(rows.tobytes(order="C"))


def _read(path):
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise LoadError(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path} is truncated")
    magic, version, dim, count, n_real, agg, fp_len = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise LoadError(f"{path} is not a famsec embedding file (magic {magic!r}, version {version})")
    start = _HEADER.size + fp_len
    if len(raw) != start + 4 * dim * count:
        raise LoadError(f"{path} has {len(raw) - start} data bytes, expected {4 * dim * count}")
    fp = raw[_HEADER.size:start].decode("utf-8")
    rows = np.frombuffer(raw, dtype="<f4", offset=start).reshape(count, dim).astype(np.float32)
    codes = {v: k for k, v in _AGG_CODES.items()}
    return rows, n_real, codes.get(agg), fp


def save_embeddings(path, embeddings, fingerprint: str = "") -> None:
    """Header ``(magic, version, embed_dim, count, fingerprint)`` then row-major little-endian float32."""
    _write(path, np.atleast_2d(embeddings), 0, None, fingerprint)


def load_embeddings(path):
    """``(embeddings, fingerprint)``."""
    rows, _, _, fp = _read(path)
    return rows, fp


def save_bank(path, bank: ReferenceBank) -> None:
    """Same container as :func:`save_embeddings`; the first ``n_real`` rows are the real references."""
    rows = np.concatenate([bank.real_refs, bank.fake_refs])
    _write(path, rows, len(bank.real_refs), bank.aggregation, bank.fingerprint)


def load_bank(path) -> ReferenceBank:
    rows, n_real, agg, fp = _read(path)
    if agg is None or not 0 < n_real < len(rows):
        raise LoadError(f"{path} holds plain embeddings, not a reference bank")
    return ReferenceBank(rows[:n_real], rows[n_real:], agg, fp)


VERDICT_COLUMNS = ("path", "label", "d_f", "d_r", "margin")


def write_verdicts(path, names: Sequence[str], verdicts: Sequence[Verdict]) -> None:
    if len(names) != len(verdicts):
        raise ContractViolation("one name per verdict required")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(VERDICT_COLUMNS)
        for name, v in zip(names, verdicts):
            w.writerow([name, v.label, repr(v.d_f), repr(v.d_r), repr(v.margin)])


def format_verdict(v: Verdict) -> str:
    return f"{v.label} d_f={v.d_f:.6f} d_r={v.d_r:.6f}"
