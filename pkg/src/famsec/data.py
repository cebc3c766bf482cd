"""Dataset ingestion, cropping, batching and the synthetic real/fake corpus.

On-disk layout (compatible with the public real/fake corpora once sorted)::

    root/{train|test}/{source}/{real|fake}/*.png

Real images carry label 1 and fake images label 0.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
CLASS_DIRS = {"real": 1, "fake": 0}
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest root
    split: str
    source: str
    label: int


@dataclass
class DatasetManifest:
    root: str
    entries: List[ManifestEntry]

    @property
    def splits(self) -> List[str]:
        return sorted({e.split for e in self.entries} | set(self._dirs.get("splits", [])))

    def sources(self, split: str) -> List[str]:
        return sorted({e.source for e in self.entries if e.split == split} | set(self._dirs.get(split, [])))

    def counts(self, split: str, source: Optional[str] = None) -> Tuple[int, int]:
        """``(n_real, n_fake)`` for a split, optionally restricted to one source."""
        sel = [e for e in self.entries if e.split == split and (source is None or e.source == source)]
        return sum(e.label == 1 for e in sel), sum(e.label == 0 for e in sel)

    def select(self, split: str, sources: Optional[Sequence[str]] = None) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split and (sources is None or e.source in sources)]

    def to_dict(self) -> dict:
        counts = {
            split: {src: dict(zip(("real", "fake"), self.counts(split, src))) for src in self.sources(split)}
            for split in self.splits
        }
        return {"root": self.root, "counts": counts, "entries": [asdict(e) for e in self.entries]}

    def save(self, path=None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        return path

    # split -> source directory names, kept so empty class folders still show up
    _dirs: Dict[str, List[str]] = field(default_factory=dict, repr=False)


def load_manifest(root, verify: bool = True) -> DatasetManifest:
    """Scan ``root`` and return every labelled image it holds.

    Missing layout levels and unreadable images raise :class:`IngestionError`
    listing every offending path; nothing is skipped silently.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise IngestionError(f"dataset root does not exist: {root}", [root])
    splits = [s for s in SPLITS if os.path.isdir(os.path.join(root, s))]
    if not splits:
        raise IngestionError(f"{root} has neither a train/ nor a test/ directory", [root])
    entries, problems, bad_files = [], [], []
    dirs: Dict[str, List[str]] = {"splits": splits}
    for split in splits:
        split_dir = os.path.join(root, split)
        sources = sorted(d for d in os.listdir(split_dir) if os.path.isdir(os.path.join(split_dir, d)))
        if not sources:
            problems.append(split_dir)
        dirs[split] = sources
        for source in sources:
            src_dir = os.path.join(split_dir, source)
            present = [c for c in CLASS_DIRS if os.path.isdir(os.path.join(src_dir, c))]
            if not present:
                problems.append(src_dir)
                continue
            for cls in present:
                cls_dir = os.path.join(src_dir, cls)
                for name in sorted(os.listdir(cls_dir)):
                    if not name.lower().endswith(IMAGE_EXTS):
                        continue
                    full = os.path.join(cls_dir, name)
                    if verify:
                        try:
                            with Image.open(full) as im:
                                im.verify()
                        except Exception:
                            bad_files.append(full)
                            continue
                    entries.append(ManifestEntry(os.path.relpath(full, root), split, source, CLASS_DIRS[cls]))
    if problems:
        raise IngestionError(
            "missing layout levels (expected root/{split}/{source}/{real|fake}/): " + ", ".join(problems), problems
        )
    if bad_files:
        raise IngestionError("unreadable image files: " + ", ".join(bad_files), bad_files)
    return DatasetManifest(root=root, entries=entries, _dirs=dirs)


@dataclass
class ImageSet:
    """Decoded images ``(n, H, W, 3)`` float32 in [0, 1] with labels and source names."""

    images: np.ndarray
    labels: np.ndarray
    sources: List[str]
    paths: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(
            self.images[idx],
            self.labels[idx],
            [self.sources[i] for i in idx],
            [self.paths[i] for i in idx] if self.paths else [],
        )

    def by_source(self) -> Dict[str, "ImageSet"]:
        out = {}
        for src in sorted(set(self.sources)):
            out[src] = self.subset([i for i, s in enumerate(self.sources) if s == src])
        return out

    def require_both_classes(self) -> None:
        n_real = int((self.labels == 1).sum())
        n_fake = int((self.labels == 0).sum())
        if n_real == 0 or n_fake == 0:
            raise ConfigurationError(
                f"training needs both classes, found {n_real} real and {n_fake} fake images", field="data"
            )


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}", [os.fspath(path)]) from exc


def load_images(
    manifest: DatasetManifest,
    split: str,
    sources: Optional[Sequence[str]] = None,
    size: Optional[int] = None,
) -> ImageSet:
    """Decode every image of ``split`` (optionally a subset of sources), centre-cropped to ``size``."""
    entries = manifest.select(split, sources)
    if sources is not None:
        missing = sorted(set(sources) - {e.source for e in entries})
        if missing:
            raise ConfigurationError(f"no images for sources {missing} in split {split!r}", field="sources")
    images = []
    for e in entries:
        im = read_image(os.path.join(manifest.root, e.path))
        images.append(center_crop(im, size) if size else im)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise IngestionError(f"mixed image sizes {sorted(shapes)}; pass size= to crop them to one size")
    arr = np.stack(images) if images else np.zeros((0, size or 0, size or 0, 3), np.float32)
    return ImageSet(
        arr,
        np.array([e.label for e in entries], dtype=np.int64),
        [e.source for e in entries],
        [e.path for e in entries],
    )


def _upscale(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h >= size and w >= size:
        return image
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    t = torch.nn.functional.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy().astype(image.dtype)


def crop_offsets(shape, size: int, rng: np.random.Generator) -> Tuple[int, int]:
    h, w = shape[:2]
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def random_crop(image: np.ndarray, size: int = 224, seed=0) -> np.ndarray:
    """Uniformly placed ``size x size`` window; images smaller than ``size`` are bilinearly upscaled first.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    image = _upscale(np.asarray(image), size)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top, left = crop_offsets(image.shape, size, rng)
    return image[top : top + size, left : left + size]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    image = _upscale(np.asarray(image), size)
    h, w = image.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return image[top : top + size, left : left + size]


@dataclass
class LabeledBatch:
    pixels: torch.Tensor  # (N, 3, H, W)
    labels: torch.Tensor  # (N,) int64, 1 = real
    indices: np.ndarray


class Batcher:
    """Seeded batch stream over an :class:`ImageSet`.

    With ``balance`` every batch holds ``ceil(N/2)`` real and ``floor(N/2)``
    fake images and an epoch ends when either class runs out; otherwise
    batches are plain shuffled chunks.  Incomplete trailing batches are
    dropped, so an epoch uses each image at most once.
    """

    def __init__(self, dataset: ImageSet, batch_size: int, balance: bool = True, seed: int = 0,
                 crop_size: Optional[int] = None):
        if batch_size < 2:
            raise ConfigurationError(f"batch size must be at least 2, got {batch_size}", field="batch_size")
        if batch_size > len(dataset):
            raise ConfigurationError(
                f"batch size {batch_size} exceeds dataset size {len(dataset)}", field="batch_size"
            )
        self.real = np.flatnonzero(dataset.labels == 1)
        self.fake = np.flatnonzero(dataset.labels == 0)
        if balance:
            n_real, n_fake = (batch_size + 1) // 2, batch_size // 2
            if len(self.real) < max(n_real, 2) or len(self.fake) < max(n_fake, 2):
                raise ConfigurationError(
                    f"balanced batches of {batch_size} need at least {max(n_real, 2)} real and "
                    f"{max(n_fake, 2)} fake images, found {len(self.real)} and {len(self.fake)}",
                    field="data",
                )
        self.dataset = dataset
        self.batch_size = batch_size
        self.balance = balance
        self.seed = seed
        self.crop_size = crop_size

    def epoch(self, index: int) -> List[np.ndarray]:
        """Index arrays of the batches in epoch ``index``."""
        rng = np.random.default_rng([self.seed, index])
        n = self.batch_size
        if self.balance:
            real, fake = rng.permutation(self.real), rng.permutation(self.fake)
            n_real, n_fake = (n + 1) // 2, n // 2
            count = min(len(real) // n_real, len(fake) // n_fake)
            return [
                np.concatenate([real[b * n_real : (b + 1) * n_real], fake[b * n_fake : (b + 1) * n_fake]])
                for b in range(count)
            ]
        order = rng.permutation(len(self.dataset))
        return [order[b * n : (b + 1) * n] for b in range(len(order) // n)]

    def make_batch(self, idx: np.ndarray, rng: Optional[np.random.Generator] = None) -> LabeledBatch:
        images = self.dataset.images[idx]
        if self.crop_size is not None:
            images = np.stack([random_crop(im, self.crop_size, rng) for im in images])
        pixels = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()
        return LabeledBatch(pixels, torch.from_numpy(self.dataset.labels[idx]), idx)

    def stream(self) -> Iterator[LabeledBatch]:
        """Endless stream of batches, reshuffled every epoch."""
        index = 0
        while True:
            crop_rng = np.random.default_rng([self.seed, index, 1])
            for idx in self.epoch(index):
                yield self.make_batch(idx, crop_rng)
            index += 1


# --- synthetic corpus -------------------------------------------------------

# Each family is a set of periodic components (cycles/pixel along y, x; amplitude)
# laid on the output pixel grid.  A and B share the 2x up-sampling checkerboard
# and differ in their secondary peak; C and D carry no checkerboard at all.
FAMILIES: Dict[str, List[Tuple[float, float, float]]] = {
    "A": [(0.5, 0.5, 0.03), (0.25, 0.0, 0.03)],
    "B": [(0.5, 0.5, 0.03), (0.0, 0.25, 0.03)],
    "C": [(0.5, 0.0, 0.03), (0.0, 0.5, 0.03)],
    "D": [(1 / 3, 1 / 3, 0.04)],
}


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "A"
    split: str = "train"
    count: int = 200  # per class
    image_size: int = 32
    noise: float = 0.01
    slope: Tuple[float, float] = (1.8, 2.6)  # range of the 1/f^slope spectral exponent
    blur: float = 0.25  # 1/e cutoff (cycles/pixel) of the camera transfer function
    strength: float = 1.0  # multiplies every fingerprint amplitude
    phase_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; known: {sorted(FAMILIES)}", field="family")
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}", field="split")
        if self.count < 2:
            raise ConfigurationError("count must be at least 2 per class", field="count")

    @property
    def source(self) -> str:
        return f"synth{self.family}"


def _texture(rng: np.random.Generator, size: int, slope: Tuple[float, float], blur: float) -> np.ndarray:
    """Colour 1/f^beta noise seen through a Gaussian optical blur, roughly in [0, 1]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    beta = rng.uniform(*slope)
    amp = radius ** (-beta / 2.0) * np.exp(-((radius / blur) ** 2))
    amp[0, 0] = 0.0
    luma = np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp).real
    chroma = np.stack(
        [np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * amp).real for _ in range(3)], axis=-1
    )
    img = luma[..., None] + 0.3 * chroma
    img = img / (img.std() + 1e-12)
    tint = rng.uniform(0.8, 1.2, size=3)
    return 0.5 + rng.uniform(-0.1, 0.1) + rng.uniform(0.08, 0.16) * img * tint


def fingerprint_pattern(family: str, size: int, rng: Optional[np.random.Generator] = None,
                        strength: float = 1.0) -> np.ndarray:
    """Additive periodic artifact of ``family``, randomly shifted when ``rng`` is given."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # phase jitter is an integer pixel shift, i.e. what a crop offset does to the pattern
    dy, dx = rng.integers(0, 12, size=2) if rng is not None else (0, 0)
    out = np.zeros((size, size))
    for fy, fx, a in FAMILIES[family]:
        out += strength * a * np.cos(2 * np.pi * (fy * (yy + dy) + fx * (xx + dx)))
    return out[..., None]


def synthesize(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """``(real, fake)`` uint8 arrays of shape ``(count, S, S, 3)``.

    Real and fake images come from the same texture process; fakes add the
    family's periodic fingerprint before quantisation.
    """
    ss = np.random.SeedSequence([spec.seed, SPLITS.index(spec.split), sorted(FAMILIES).index(spec.family)])
    rng = np.random.default_rng(ss)
    s = spec.image_size

    def sample(fake: bool) -> np.ndarray:
        img = _texture(rng, s, spec.slope, spec.blur)
        if fake:
            img = img + fingerprint_pattern(spec.family, s, rng if spec.phase_jitter else None, spec.strength)
        img = img + spec.noise * rng.standard_normal(img.shape)
        return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    real = np.stack([sample(False) for _ in range(spec.count)])
    fake = np.stack([sample(True) for _ in range(spec.count)])
    return real, fake


def make_synthetic(root, spec: SyntheticSpec) -> str:
    """Write one synthetic source to ``root/{split}/synth{family}/{real,fake}/`` and record its spec."""
    real, fake = synthesize(spec)
    base = os.path.join(os.fspath(root), spec.split, spec.source)
    for cls, arr in (("real", real), ("fake", fake)):
        d = os.path.join(base, cls)
        os.makedirs(d, exist_ok=True)
        for i, img in enumerate(arr):
            Image.fromarray(img).save(os.path.join(d, f"{i:05d}.png"), optimize=False)
    with open(os.path.join(base, "synthetic_spec.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=1, sort_keys=True)
    return base


def make_desk_corpus(root, train_families=("A",), test_families=("A", "B"), train_count=500,
                     test_count=250, image_size=32, seed=0, **kwargs) -> DatasetManifest:
    """Standard cross-family corpus: train on ``train_families``, test on ``test_families``."""
    for fam in train_families:
        make_synthetic(root, SyntheticSpec(fam, "train", train_count, image_size, seed=seed, **kwargs))
    for fam in test_families:
        make_synthetic(root, SyntheticSpec(fam, "test", test_count, image_size, seed=seed, **kwargs))
    manifest = load_manifest(root)
    manifest.save()
    return manifest


def synthetic_imageset(specs: Sequence[SyntheticSpec]) -> ImageSet:
    """In-memory equivalent of writing ``specs`` with :func:`make_synthetic` and loading them back."""
    images, labels, sources = [], [], []
    for spec in specs:
        real, fake = synthesize(spec)
        for arr, label in ((real, 1), (fake, 0)):
            images.append(arr.astype(np.float32) / 255.0)
            labels += [label] * len(arr)
            sources += [spec.source] * len(arr)
    return ImageSet(np.concatenate(images), np.array(labels, dtype=np.int64), sources)


def high_band_energy(images: np.ndarray, cutoff: float = 0.2) -> np.ndarray:
    """Fraction of (mean-removed, luminance) spectral energy above ``cutoff`` cycles/pixel, per image."""
    gray = np.asarray(images, dtype=np.float64).mean(axis=-1)
    gray = gray - gray.mean(axis=(1, 2), keepdims=True)
    power = np.abs(np.fft.fft2(gray)) ** 2
    s = gray.shape[-1]
    f = np.fft.fftfreq(s)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    high = power[:, radius > cutoff].sum(axis=1)
    return high / np.maximum(power.sum(axis=(1, 2)), 1e-30)


def band_energy_accuracy(train: ImageSet, test: ImageSet, cutoff: float = 0.2) -> float:
    """Accuracy of a one-threshold classifier on :func:`high_band_energy` (sanity floor for a corpus)."""
    e_train, e_test = high_band_energy(train.images, cutoff), high_band_energy(test.images, cutoff)
    # candidates: midpoints between sorted training energies
    order = np.sort(e_train)
    candidates = np.concatenate([[order[0] - 1], (order[1:] + order[:-1]) / 2])
    acc = [np.mean((e_train <= t) == (train.labels == 1)) for t in candidates]
    threshold = candidates[int(np.argmax(acc))]
    return float(np.mean((e_test <= threshold) == (test.labels == 1)))


def family_gap(family_a: str, family_b: str, image_size: int = 32, count: int = 64, seed: int = 0) -> float:
    """Largest difference in mean band-energy fraction between two fake families over four radial bands."""
    edges = (0.0, 0.125, 0.25, 0.375, 0.75)

    def profile(family):
        _, fake = synthesize(SyntheticSpec(family, "test", count, image_size, seed=seed))
        gray = fake.astype(np.float64).mean(-1)
        gray -= gray.mean(axis=(1, 2), keepdims=True)
        power = np.abs(np.fft.fft2(gray)) ** 2
        f = np.fft.fftfreq(image_size)
        fy, fx = np.abs(f[:, None]), np.abs(f[None, :])
        total = power.sum(axis=(1, 2))
        # per-axis bands separate families whose energy sits at the same radius
        bands = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            for mask in ((fy >= lo) & (fy < hi) & (fx < 0.125), (fx >= lo) & (fx < hi) & (fy < 0.125),
                         (fy >= lo) & (fy < hi) & (fx >= lo) & (fx < hi)):
                bands.append((power[:, mask].sum(axis=1) / total).mean())
        return np.array(bands)

    return float(np.abs(profile(family_a) - profile(family_b)).max())
