"""Deterministic image corruptions, AugMix-style mixing chains and perturbation sequences.

All generators take float images in [0, 1] with shape ``(C, H, W)`` (most also
accept a leading batch axis) and return a new array of the same shape, clamped
to [0, 1]. Every random draw comes from a generator seeded by the caller, so a
generator's output is a pure function of ``(image, spec)``.
"""

from __future__ import annotations

import dataclasses
import math
from functools import lru_cache
from importlib import resources
from typing import Literal, Mapping, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import fft as sp_fft
from scipy import ndimage

from .errors import UnsupportedCorruptionError, ValidationError

FAMILIES = ("noise", "blur", "digital", "weather-proxy")
NUM_SEVERITIES = 5


class KindTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Literal["noise", "blur", "digital", "weather-proxy"]
    magnitudes: list[float]

    @field_validator("magnitudes")
    @classmethod
    def _five_non_decreasing(cls, v):
        if len(v) != NUM_SEVERITIES:
            raise ValueError(f"expected {NUM_SEVERITIES} magnitudes, got {len(v)}")
        if any(b < a for a, b in zip(v, v[1:])):
            raise ValueError(f"magnitudes must be non-decreasing in severity: {v}")
        if any(m < 0 for m in v):
            raise ValueError("magnitudes must be nonnegative")
        return v


class SeverityTables(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int
    kinds: dict[str, KindTable]

    def magnitude(self, kind: str, severity: int) -> float:
        try:
            row = self.kinds[kind]
        except KeyError:
            raise UnsupportedCorruptionError(f"unknown corruption kind {kind!r}") from None
        return row.magnitudes[severity - 1]

    def family(self, kind: str) -> str:
        try:
            return self.kinds[kind].family
        except KeyError:
            raise UnsupportedCorruptionError(f"unknown corruption kind {kind!r}") from None


def load_severity_tables(path=None) -> SeverityTables:
    """Load and schema-validate a severity table file (the packaged one by default)."""
    if path is None:
        return _default_tables()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return SeverityTables.model_validate(raw)
    except Exception as exc:  # pydantic.ValidationError
        raise ValidationError(f"invalid severity table {path}: {exc}") from exc


@lru_cache(maxsize=1)
def _default_tables() -> SeverityTables:
    text = resources.files("robust_heads").joinpath("severity_tables.yaml").read_text()
    return SeverityTables.model_validate(yaml.safe_load(text))


@dataclasses.dataclass(frozen=True)
class CorruptionSpec:
    family: str
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown corruption family {self.family!r}")
        if isinstance(self.severity, bool) or not isinstance(self.severity, (int, np.integer)):
            raise ValidationError(f"severity must be an integer, got {self.severity!r}")
        if not 1 <= self.severity <= NUM_SEVERITIES:
            raise ValidationError(f"severity must be in 1..{NUM_SEVERITIES}, got {self.severity}")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")

    @classmethod
    def of(cls, kind: str, severity: int, seed: int = 0, tables: SeverityTables | None = None):
        """Build a spec, looking the family up from the severity tables."""
        tables = tables or _default_tables()
        return cls(tables.family(kind), kind, severity, seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def _spatial(ndim: int) -> tuple[int, int]:
    return (ndim - 2, ndim - 1)


def _box_kernel(width: float) -> np.ndarray:
    """Normalized 1-D box kernel of (possibly fractional) width."""
    r = width / 2.0
    reach = max(0, math.ceil(r - 0.5))
    offsets = np.arange(-reach, reach + 1, dtype=np.float64)
    w = np.clip(np.minimum(offsets + 0.5, r) - np.maximum(offsets - 0.5, -r), 0.0, 1.0)
    return w / w.sum()


def _gaussian_noise(x, m, rng):
    return x + rng.normal(0.0, m, size=x.shape)


def _shot_noise(x, m, rng):
    if m == 0:
        return x.copy()
    return rng.poisson(np.clip(x, 0, 1) / m) * m


def _impulse_noise(x, m, rng):
    out = x.copy()
    u = rng.random(x.shape)
    out[u < m / 2] = 0.0
    out[(u >= m / 2) & (u < m)] = 1.0
    return out


def _speckle_noise(x, m, rng):
    return x + x * rng.normal(0.0, m, size=x.shape)


def _gaussian_blur(x, m, rng):
    sigma = [0.0] * x.ndim
    for ax in _spatial(x.ndim):
        sigma[ax] = m
    return ndimage.gaussian_filter(x, sigma=sigma, mode="nearest")


def _box_blur(x, m, rng):
    k = _box_kernel(m)
    out = x
    for ax in _spatial(x.ndim):
        out = ndimage.convolve1d(out, k, axis=ax, mode="nearest")
    return out


def _motion_blur(x, m, rng):
    return ndimage.convolve1d(x, _box_kernel(m), axis=x.ndim - 1, mode="nearest")


def _jpeg(x, m, rng, block=4):
    if m == 0:
        return x.copy()
    h, w = x.shape[-2:]
    ph, pw = (-h) % block, (-w) % block
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    xp = np.pad(x, pad, mode="edge")
    H, W = xp.shape[-2:]
    lead = xp.shape[:-2]
    blocks = xp.reshape(*lead, H // block, block, W // block, block)
    axes = (blocks.ndim - 3, blocks.ndim - 1)
    coef = sp_fft.dctn(blocks, axes=axes, norm="ortho")
    coef = np.round(coef / m) * m
    rec = sp_fft.idctn(coef, axes=axes, norm="ortho").reshape(*lead, H, W)
    return rec[..., :h, :w]


def _pixelate(x, m, rng):
    if m <= 1:
        return x.copy()
    h, w = x.shape[-2:]
    sh, sw = max(1, round(h / m)), max(1, round(w / m))
    lead = (1.0,) * (x.ndim - 2)
    small = ndimage.zoom(x, lead + (sh / h, sw / w), order=1, mode="nearest", grid_mode=True)
    return ndimage.zoom(small, lead + (h / sh, w / sw), order=0, mode="nearest", grid_mode=True)


def _contrast(x, m, rng):
    mean = x.mean(axis=_spatial(x.ndim), keepdims=True)
    return (x - mean) * (1.0 - m) + mean


def _brightness(x, m, rng):
    return x + m


def _fog(x, m, rng):
    h, w = x.shape[-2:]
    lead = x.shape[:-3] if x.ndim == 4 else ()
    coarse = rng.random(lead + (4, 4))
    zoom = (1.0,) * len(lead) + (h / 4, w / 4)
    field = ndimage.zoom(coarse, zoom, order=3, mode="nearest", grid_mode=True)[..., :h, :w]
    lo = field.min(axis=(-2, -1), keepdims=True)
    hi = field.max(axis=(-2, -1), keepdims=True)
    field = 0.5 + 0.5 * (field - lo) / np.maximum(hi - lo, 1e-8)
    field = np.expand_dims(field, axis=-3)
    return x * (1.0 - m) + m * field


def _identity(x, m, rng):
    return x.copy()


_GENERATORS = {
    "identity": _identity,
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "speckle_noise": _speckle_noise,
    "gaussian_blur": _gaussian_blur,
    "box_blur": _box_blur,
    "motion_blur": _motion_blur,
    "jpeg": _jpeg,
    "pixelate": _pixelate,
    "contrast": _contrast,
    "brightness": _brightness,
    "fog": _fog,
}


def available_kinds() -> tuple[str, ...]:
    return tuple(_GENERATORS)


def _check_image(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ValidationError(f"expected (C,H,W) or (N,C,H,W) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    return x


def corrupt(image, spec: CorruptionSpec, tables: SeverityTables | None = None) -> np.ndarray:
    """Apply one catalogued corruption at the spec's severity.

    Args:
      image: float array in [0, 1], shape ``(C, H, W)`` or ``(N, C, H, W)``.
      spec: corruption kind, severity and seed.
      tables: severity tables; the packaged ones when omitted.

    Returns:
      Corrupted float32 array, same shape, clamped to [0, 1].
    """
    tables = tables or _default_tables()
    if spec.kind not in _GENERATORS or spec.kind not in tables.kinds:
        raise UnsupportedCorruptionError(f"unsupported corruption kind {spec.kind!r}")
    if tables.family(spec.kind) != spec.family:
        raise ValidationError(
            f"kind {spec.kind!r} belongs to family {tables.family(spec.kind)!r}, not {spec.family!r}"
        )
    x = _check_image(image)
    m = tables.magnitude(spec.kind, spec.severity)
    out = _GENERATORS[spec.kind](x, m, _rng([spec.seed, spec.severity]))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# AugMix-style chains

SIGNED_OPS = ("rotate", "shear_x", "shear_y", "translate_x", "translate_y")
UNSIGNED_OPS = ("autocontrast", "equalize", "posterize", "solarize")
AUGMIX_OPS = SIGNED_OPS + UNSIGNED_OPS


def _affine(x, matrix, offset):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-2]):
        out[idx] = ndimage.affine_transform(x[idx], matrix, offset=offset, order=1, mode="nearest")
    return out


def _centered_affine(x, matrix):
    center = (np.array(x.shape[-2:], dtype=np.float64) - 1) / 2
    return _affine(x, matrix, center - matrix @ center)


def _op_rotate(x, m):
    t = math.radians(30.0 * m)
    mat = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return _centered_affine(x, mat)


def _op_shear_x(x, m):
    return _centered_affine(x, np.array([[1.0, 0.0], [0.3 * m, 1.0]]))


def _op_shear_y(x, m):
    return _centered_affine(x, np.array([[1.0, 0.3 * m], [0.0, 1.0]]))


def _op_translate_x(x, m):
    return _affine(x, np.eye(2), np.array([0.0, -m * x.shape[-1] / 4]))


def _op_translate_y(x, m):
    return _affine(x, np.eye(2), np.array([-m * x.shape[-2] / 4, 0.0]))


def _op_autocontrast(x, m):
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    stretched = np.where(hi > lo, (x - lo) / np.maximum(hi - lo, 1e-12), x)
    return x + m * (stretched - x)


def _op_equalize(x, m):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-2]):
        ch = x[idx]
        ranks = np.argsort(np.argsort(ch, axis=None, kind="stable"), kind="stable")
        out[idx] = (ranks.reshape(ch.shape) / max(ch.size - 1, 1)).astype(x.dtype)
    return x + m * (out - x)


def _op_posterize(x, m):
    bits = 8 - int(round(6 * m))
    if bits >= 8:
        return x.copy()
    levels = 2**bits
    return np.floor(x * (levels - 1) + 0.5) / (levels - 1)


def _op_solarize(x, m):
    threshold = 1.0 - m
    return np.where(x > threshold, 1.0 - x, x)


_OPS = {
    "rotate": _op_rotate,
    "shear_x": _op_shear_x,
    "shear_y": _op_shear_y,
    "translate_x": _op_translate_x,
    "translate_y": _op_translate_y,
    "autocontrast": _op_autocontrast,
    "equalize": _op_equalize,
    "posterize": _op_posterize,
    "solarize": _op_solarize,
}


@dataclasses.dataclass(frozen=True)
class AugmentationChain:
    """A mixture of op sequences blended with the clean image.

    ``ops[b]`` is the ordered list of ``(op_name, magnitude)`` pairs applied in
    branch ``b``; ``branch_weights[b]`` is its mixture weight. Signed ops take
    magnitudes in [-1, 1], the others in [0, 1]; magnitude 0 is the identity.
    """

    depth: int
    ops: tuple[tuple[tuple[str, float], ...], ...]
    branch_weights: tuple[float, ...]
    skip_weight: float
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("chain depth must be >= 1")
        if len(self.ops) == 0:
            raise ValidationError("chain has no branches")
        if len(self.branch_weights) != len(self.ops):
            raise ValidationError("one branch weight per branch required")
        for branch in self.ops:
            if len(branch) == 0:
                raise ValidationError("empty op sequence in chain branch")
            if len(branch) > self.depth:
                raise ValidationError(f"branch of length {len(branch)} exceeds depth {self.depth}")
            for name, mag in branch:
                if name not in _OPS:
                    raise ValidationError(f"unknown augmentation op {name!r}")
                lo = -1.0 if name in SIGNED_OPS else 0.0
                if not lo <= mag <= 1.0:
                    raise ValidationError(f"magnitude {mag} out of range for op {name!r}")
        w = np.asarray(self.branch_weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError("branch_weights must lie on the simplex")
        if not 0.0 <= self.skip_weight <= 1.0:
            raise ValidationError("skip_weight must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "ops": [[list(step) for step in branch] for branch in self.ops],
            "branch_weights": list(self.branch_weights),
            "skip_weight": self.skip_weight,
            "seed": self.seed,
        }


def sample_chain(
    seed: int,
    width: int = 3,
    max_depth: int = 3,
    strength: float = 0.7,
    ops: Sequence[str] = AUGMIX_OPS,
    alpha: float = 1.0,
) -> AugmentationChain:
    """Draw a random chain: Dirichlet branch weights, Beta skip weight, depth 1..max_depth."""
    rng = _rng([seed, 0xA06])
    weights = rng.dirichlet([alpha] * width)
    skip = float(rng.beta(alpha, alpha))
    branches = []
    for _ in range(width):
        depth = int(rng.integers(1, max_depth + 1))
        steps = []
        for _ in range(depth):
            name = str(ops[int(rng.integers(len(ops)))])
            mag = float(rng.uniform(0.1, 1.0) * strength)
            if name in SIGNED_OPS and rng.random() < 0.5:
                mag = -mag
            steps.append((name, mag))
        branches.append(tuple(steps))
    weights = weights / weights.sum()
    return AugmentationChain(
        depth=max_depth,
        ops=tuple(branches),
        branch_weights=tuple(float(w) for w in weights),
        skip_weight=skip,
        seed=seed,
    )


def augment_chain(image, chain: AugmentationChain) -> np.ndarray:
    """Blend ``skip_weight * image`` with the weighted mixture of transformed branches."""
    x = _check_image(image)
    if chain.skip_weight == 1.0:
        return x.astype(np.float32)
    mix = np.zeros_like(x)
    for weight, branch in zip(chain.branch_weights, chain.ops):
        y = x
        for name, mag in branch:
            y = np.clip(_OPS[name](y, mag), 0.0, 1.0)
        mix += weight * y
    out = chain.skip_weight * x + (1.0 - chain.skip_weight) * mix
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Perturbation sequences for flip-rate evaluation

_F32_SLACK = 1e-6  # per-pixel rounding when frames are stored as float32
PERTURBATION_STEPS = {"noise-walk": 0.02, "brightness-walk": 0.02, "blur-walk": 0.12}


@dataclasses.dataclass(frozen=True)
class PerturbationSequence:
    base: np.ndarray
    frames: tuple[np.ndarray, ...]
    kind: str
    length: int
    step_bound: float

    def __post_init__(self):
        if self.length < 2 or len(self.frames) != self.length:
            raise ValidationError("sequence needs at least two frames matching its length")


def build_perturbation_sequence(
    image, kind: str, length: int, seed: int, steps: Mapping[str, float] | None = None
) -> PerturbationSequence:
    """Frames of gradually increasing perturbation; frame 0 is the base image.

    ``step_bound`` is an upper bound on the L2 distance between consecutive
    frames (noise-walk, brightness-walk) or the per-frame blur-sigma increment
    (blur-walk).
    """
    if length < 2:
        raise ValidationError("perturbation sequences need length >= 2")
    steps = dict(PERTURBATION_STEPS, **(steps or {}))
    if kind not in steps:
        raise UnsupportedCorruptionError(f"unknown perturbation kind {kind!r}")
    base = _check_image(image).astype(np.float32)
    if base.ndim != 3:
        raise ValidationError("perturbation sequences take a single (C,H,W) image")
    step = steps[kind]
    rng = _rng([seed, length, 0x5E0])
    frames = [base.copy()]
    if kind == "noise-walk":
        offset = np.zeros(base.shape)
        for _ in range(length - 1):
            offset = offset + rng.uniform(-step, step, size=base.shape)
            frames.append(np.clip(base + offset, 0, 1).astype(np.float32))
        bound = (step + _F32_SLACK) * math.sqrt(base.size)
    elif kind == "brightness-walk":
        for t in range(1, length):
            frames.append(np.clip(base + t * step, 0, 1).astype(np.float32))
        bound = (step + _F32_SLACK) * math.sqrt(base.size)
    else:
        for t in range(1, length):
            blurred = _gaussian_blur(base.astype(np.float64), t * step, None)
            frames.append(np.clip(blurred, 0, 1).astype(np.float32))
        bound = step
    return PerturbationSequence(base, tuple(frames), kind, length, bound)
