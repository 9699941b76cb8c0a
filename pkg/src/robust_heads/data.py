"""Desk-scale datasets and the clean + augmented training set.

Two image sources are registered: ``shapes10``, a procedurally rendered
10-class shape dataset of any size, and ``digits``, the 8x8 handwritten digits
bundled with scikit-learn (upsampled), used as the disjoint-class transfer set.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .corruptions import (
    AugmentationChain,
    CorruptionSpec,
    SeverityTables,
    augment_chain,
    corrupt,
    sample_chain,
)
from .errors import ValidationError

SHAPE_CLASSES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "cross",
    "ring",
    "hbars",
    "vbars",
    "diamond",
    "corner",
)


@dataclasses.dataclass
class ImageDataset:
    """Labelled float images in [0, 1], shape ``(N, C, H, W)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


@dataclasses.dataclass(frozen=True)
class AugmentedExample:
    input: np.ndarray
    label: int
    beta: int
    provenance: dict | None = None

    def __post_init__(self):
        if self.beta not in (0, 1):
            raise ValidationError(f"beta must be 0 or 1, got {self.beta}")
        if self.beta == 1 and self.provenance is not None:
            raise ValidationError("clean examples carry no provenance")


@dataclasses.dataclass
class AugmentedDataset:
    """Column store of :class:`AugmentedExample` records."""

    inputs: np.ndarray
    labels: np.ndarray
    betas: np.ndarray
    provenance: list[dict | None]
    seeds: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> AugmentedExample:
        return AugmentedExample(self.inputs[i], int(self.labels[i]), int(self.betas[i]), self.provenance[i])

    def __iter__(self) -> Iterator[AugmentedExample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "AugmentedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return AugmentedDataset(
            self.inputs[idx],
            self.labels[idx],
            self.betas[idx],
            [self.provenance[i] for i in idx],
            self.seeds[idx],
            self.num_classes,
        )

    def take_fraction(self, fraction: float, seed: int) -> "AugmentedDataset":
        """Deterministic random subsample of ``round(fraction * len)`` examples, order kept."""
        if not 0.0 < fraction <= 1.0:
            raise ValidationError("fraction must be in (0, 1]")
        if fraction == 1.0:
            return self
        n = max(1, int(round(fraction * len(self))))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF4AC]))
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return self.subset(idx)

    def manifest_records(self) -> list[dict]:
        return [
            {"index": i, "beta": int(self.betas[i]), "provenance": self.provenance[i], "seed": int(self.seeds[i])}
            for i in range(len(self))
        ]

    def write_manifest(self, path) -> None:
        """One JSON object per line: index, beta, provenance, seed."""
        with open(path, "w") as fh:
            for rec in self.manifest_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Procedural shapes


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray, thick: float) -> np.ndarray:
    """Boolean mask of shape ``cls`` in normalized coordinates (|u|,|v| <= 1 frame)."""
    r = np.hypot(u, v)
    if cls == 0:
        return r <= 0.8
    if cls == 1:
        return np.maximum(np.abs(u), np.abs(v)) <= 0.7
    if cls == 2:
        return (v <= 0.7) & (v >= -0.8 + 1.7 * np.abs(u))
    if cls == 3:
        return ((np.abs(u) <= thick) & (np.abs(v) <= 0.85)) | ((np.abs(v) <= thick) & (np.abs(u) <= 0.85))
    if cls == 4:
        d1, d2 = np.abs(u - v) / np.sqrt(2), np.abs(u + v) / np.sqrt(2)
        box = np.maximum(np.abs(u), np.abs(v)) <= 0.75
        return box & ((d1 <= thick) | (d2 <= thick))
    if cls == 5:
        return (r <= 0.85) & (r >= 0.85 - 2 * thick)
    if cls == 6:
        return (np.abs(u) <= 0.8) & ((np.abs(v - 0.45) <= thick) | (np.abs(v + 0.45) <= thick))
    if cls == 7:
        return (np.abs(v) <= 0.8) & ((np.abs(u - 0.45) <= thick) | (np.abs(u + 0.45) <= thick))
    if cls == 8:
        return np.abs(u) + np.abs(v) <= 0.85
    if cls == 9:
        return ((np.abs(u + 0.55) <= thick) & (np.abs(v) <= 0.8)) | (
            (np.abs(v - 0.55) <= thick) & (np.abs(u) <= 0.8)
        )
    raise ValidationError(f"no shape class {cls}")


def _render_shape(cls: int, size: int, rng: np.random.Generator, supersample: int = 4) -> np.ndarray:
    n = size * supersample
    coords = (np.arange(n) + 0.5) / n * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    scale = rng.uniform(0.55, 0.85)
    angle = rng.uniform(-0.3, 0.3)
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    thick = rng.uniform(0.14, 0.22)
    c, s = np.cos(angle), np.sin(angle)
    u0, v0 = (xx - cx) / scale, (yy - cy) / scale
    u, v = c * u0 + s * v0, -s * u0 + c * v0
    mask = _shape_mask(cls, u, v, thick).astype(np.float64)
    mask = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    fg = rng.uniform(0.65, 1.0)
    bg0 = rng.uniform(0.0, 0.3)
    grad = rng.uniform(-0.1, 0.1, size=2)
    lin = (np.arange(size) + 0.5) / size - 0.5
    bg = bg0 + grad[0] * lin[:, None] + grad[1] * lin[None, :]
    img = bg * (1 - mask) + fg * mask
    return np.clip(img, 0.0, 1.0)


def make_shapes(n: int, seed: int, size: int = 16) -> ImageDataset:
    """Balanced procedural 10-class shapes dataset, one channel, ``size x size``."""
    labels = np.arange(n) % len(SHAPE_CLASSES)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5A9E])).permutation(n)
    labels = labels[perm]
    images = np.empty((n, 1, size, size), dtype=np.float32)
    for i, cls in enumerate(labels):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        images[i, 0] = _render_shape(int(cls), size, rng)
    return ImageDataset(images, labels.astype(np.int64), len(SHAPE_CLASSES), "shapes10")


def make_digits(size: int = 16) -> ImageDataset:
    """scikit-learn's 8x8 digits, rescaled to [0, 1] and upsampled to ``size``."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.images.astype(np.float64) / 16.0
    x = ndimage.zoom(x, (1, size / 8, size / 8), order=1, grid_mode=True, mode="nearest")
    x = np.clip(x, 0, 1).astype(np.float32)[:, None]
    return ImageDataset(x, d.target.astype(np.int64), 10, "digits")


def load_dataset(name: str, n: int, seed: int, size: int = 16) -> ImageDataset:
    if name == "shapes10":
        return make_shapes(n, seed, size)
    if name == "digits":
        ds = make_digits(size)
        idx = np.random.default_rng(np.random.SeedSequence([seed, 0xD161])).permutation(len(ds))[:n]
        return ds.subset(np.sort(idx))
    raise ValidationError(f"unknown dataset {name!r}")


def split_dataset(ds: ImageDataset, sizes: Sequence[int], seed: int) -> list[ImageDataset]:
    if sum(sizes) > len(ds):
        raise ValidationError(f"requested {sum(sizes)} examples from a dataset of {len(ds)}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(len(ds))
    out, start = [], 0
    for k in sizes:
        out.append(ds.subset(np.sort(perm[start : start + k])))
        start += k
    return out


# ---------------------------------------------------------------------------
# Augmentation policy and D^a


@dataclasses.dataclass(frozen=True)
class AugmentationPolicy:
    """How augmented copies are generated.

    Each augmented example is an AugMix chain with probability ``chain_prob``,
    otherwise one corruption drawn uniformly from ``kinds`` at a uniform
    severity in ``severities``.
    """

    kinds: tuple[str, ...] = ("gaussian_noise", "speckle_noise", "gaussian_blur", "contrast", "brightness")
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    chain_prob: float = 0.3
    chain_width: int = 3
    chain_depth: int = 3

    def __post_init__(self):
        if not 0.0 <= self.chain_prob <= 1.0:
            raise ValidationError("chain_prob must be in [0, 1]")
        if self.chain_prob < 1.0 and not self.kinds:
            raise ValidationError("policy needs corruption kinds unless chain_prob == 1")

    def sample(self, image: np.ndarray, seed: int, tables: SeverityTables | None = None):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB01C]))
        if rng.random() < self.chain_prob:
            chain = sample_chain(seed, width=self.chain_width, max_depth=self.chain_depth)
            return augment_chain(image, chain), {"chain": chain.to_dict()}
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        severity = int(self.severities[int(rng.integers(len(self.severities)))])
        spec = CorruptionSpec.of(kind, severity, seed, tables)
        return corrupt(image, spec, tables), {"corruption": spec.to_dict()}


def example_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_augmented_dataset(
    clean: ImageDataset,
    policy: AugmentationPolicy,
    aug_ratio: float,
    seed: int,
    tables: SeverityTables | None = None,
    workers: int = 0,
) -> AugmentedDataset:
    """Clean examples (beta=1) followed by ``round(aug_ratio*|clean|)`` augmented ones (beta=0).

    Augmented examples come from a class-stratified draw of source images, so
    their class distribution tracks the clean part. ``workers > 0`` maps the
    generators over a thread pool; results are collected in index order.
    """
    if len(clean) == 0:
        raise ValidationError("clean dataset is empty")
    if not 0.0 < aug_ratio <= 1.0:
        raise ValidationError("aug_ratio must be in (0, 1]")
    n = len(clean)
    n_aug = int(round(aug_ratio * n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    # stratified: permute within each class, then interleave classes round-robin
    by_class = [rng.permutation(np.flatnonzero(clean.labels == c)) for c in range(clean.num_classes)]
    order = []
    depth = max((len(b) for b in by_class), default=0)
    for j in range(depth):
        for b in by_class:
            if j < len(b):
                order.append(int(b[j]))
    sources = np.sort(np.asarray(order[:n_aug], dtype=np.int64))
    seeds = [example_seed(seed, n + k) for k in range(n_aug)]

    def _one(k):
        return policy.sample(clean.images[sources[k]], seeds[k], tables)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, range(n_aug)))
    else:
        results = [_one(k) for k in range(n_aug)]

    aug_images = np.stack([r[0] for r in results]) if results else clean.images[:0]
    inputs = np.concatenate([clean.images, aug_images]).astype(np.float32)
    labels = np.concatenate([clean.labels, clean.labels[sources]])
    betas = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n_aug, dtype=np.int64)])
    prov: list[dict | None] = [None] * n + [dict(r[1], source=int(s)) for r, s in zip(results, sources)]
    all_seeds = np.concatenate([np.array([example_seed(seed, i) for i in range(n)], dtype=np.uint64), np.array(seeds, dtype=np.uint64)])
    return AugmentedDataset(inputs, labels, betas, prov, all_seeds, clean.num_classes)


def corrupt_dataset(ds: ImageDataset, kind: str, severity: int, seed: int, tables=None) -> ImageDataset:
    """Corrupt every image with its own per-example seed derived from ``seed``."""
    out = np.empty_like(ds.images)
    for i in range(len(ds)):
        spec = CorruptionSpec.of(kind, severity, example_seed(seed, i), tables)
        out[i] = corrupt(ds.images[i], spec, tables)
    return ImageDataset(out, ds.labels, ds.num_classes, f"{ds.name}-{kind}-{severity}")


def policy_from_dict(d: dict[str, Any] | None) -> AugmentationPolicy:
    d = dict(d or {})
    for key in ("kinds", "severities"):
        if key in d:
            d[key] = tuple(d[key])
    return AugmentationPolicy(**d)
