"""Uncertainty-aware head selection and zero-shot logits.

For each input the clean, combined and unclean heads are sampled with dropout
active. Each candidate head ``k`` in {clean, unclean} gets the score
``U_k * KL(mean_combined || mean_k)`` where ``U_k`` aggregates the per-class
standard deviations of head ``k``'s MC samples; the lower score wins and ties
go to the clean head. The combined head is only a reference and never serves
predictions.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch

from .errors import ValidationError
from .model import MultiHeadModel

DEFAULT_MC_SAMPLES = 10
KL_EPSILON = 1e-12
VARIANTS = ("full", "no_kld", "no_umc", "max_logit")
_HEAD_ORDER = ("clean", "combined", "unclean")


@dataclasses.dataclass(frozen=True)
class PredictiveDistribution:
    mean_probs: np.ndarray
    std_probs: np.ndarray
    mc_samples: int
    head: str

    def __post_init__(self):
        if self.mc_samples < 2:
            raise ValidationError("mc_samples must be >= 2")
        if np.any(self.std_probs < 0):
            raise ValidationError("std_probs must be nonnegative")
        if abs(float(self.mean_probs.sum()) - 1.0) > 1e-6:
            raise ValidationError("mean_probs must sum to 1")


@dataclasses.dataclass(frozen=True)
class SelectionResult:
    chosen_head: str
    predicted_class: int
    score_clean: float
    score_unclean: float
    u_clean: float
    u_unclean: float
    kl_clean: float
    kl_unclean: float
    distribution_used: PredictiveDistribution

    def trace(self) -> dict:
        return {
            "chosen_head": self.chosen_head,
            "predicted_class": self.predicted_class,
            "score_clean": self.score_clean,
            "score_unclean": self.score_unclean,
            "u_clean": self.u_clean,
            "u_unclean": self.u_unclean,
            "kl_clean": self.kl_clean,
            "kl_unclean": self.kl_unclean,
        }


def _input_tensor(model, x) -> torch.Tensor:
    if isinstance(x, torch.Tensor) and x.dtype == model.dtype:
        return x
    return torch.as_tensor(np.asarray(x)).to(model.dtype)


def _check_mc(mc_samples):
    if mc_samples < 2:
        raise ValidationError("mc_samples must be >= 2")


def mc_predict(model: MultiHeadModel, x, head: str, mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> PredictiveDistribution:
    """MC-dropout predictive distribution of one head for a single input ``(C, H, W)``."""
    _check_mc(mc_samples)
    if head not in model.head_names:
        raise ValidationError(f"model has no {head!r} head")
    xt = _input_tensor(model, x)[None]
    probs = model.mc_probs(model.features(xt), [head], mc_samples, seed)[head][:, 0]
    return _distribution(probs, head)


def _sample_std(s: np.ndarray) -> np.ndarray:
    # shifting by the first sample makes identical samples give exactly 0
    return (s - s[:1]).std(axis=0)


def _distribution(samples: torch.Tensor, head: str) -> PredictiveDistribution:
    """``samples``: (mc_samples, C) softmax outputs."""
    p = samples.double().numpy()
    mean = p.mean(axis=0)
    std = _sample_std(p)
    return PredictiveDistribution(mean, std, p.shape[0], head)


def uncertainty_scalar(dist: PredictiveDistribution, aggregation: str = "mean_std") -> float:
    """Scalar uncertainty from per-class MC standard deviations.

    ``"mean_std"`` averages them over classes; ``"max_class_std"`` takes the
    standard deviation of the class with the highest mean probability.
    """
    if aggregation == "mean_std":
        return float(np.mean(dist.std_probs))
    if aggregation == "max_class_std":
        return float(dist.std_probs[int(np.argmax(dist.mean_probs))])
    raise ValidationError(f"unknown uncertainty aggregation {aggregation!r}")


def kl_divergence(p, q, epsilon: float = KL_EPSILON) -> float:
    """``sum_i p_i * ln((p_i + eps) / (q_i + eps))``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError("distributions differ in length")
    if np.any(p < 0) or np.any(q < 0):
        raise ValidationError("probabilities must be nonnegative")
    return float(np.sum(p * np.log((p + epsilon) / (q + epsilon))))


def _kl_rows(p: np.ndarray, q: np.ndarray, epsilon: float = KL_EPSILON) -> np.ndarray:
    return np.sum(p * np.log((p + epsilon) / (q + epsilon)), axis=-1)


def _uncertainty_rows(mean: np.ndarray, std: np.ndarray, aggregation: str) -> np.ndarray:
    if aggregation == "mean_std":
        return std.mean(axis=-1)
    if aggregation == "max_class_std":
        return np.take_along_axis(std, mean.argmax(axis=-1)[:, None], axis=-1)[:, 0]
    raise ValidationError(f"unknown uncertainty aggregation {aggregation!r}")


def choose(score_clean: float, score_unclean: float) -> str:
    return "unclean" if score_unclean < score_clean else "clean"


def selection_scores(stats, variant: str = "full"):
    """``(score_clean, score_unclean)`` from per-head statistics; lower wins.

    ``stats`` holds ``u_clean``, ``u_unclean``, ``kl_clean``, ``kl_unclean``
    and, for ``max_logit``, ``mean_clean`` / ``mean_unclean`` probabilities.
    """
    if variant == "full":
        return stats["u_clean"] * stats["kl_clean"], stats["u_unclean"] * stats["kl_unclean"]
    if variant == "no_kld":
        return stats["u_clean"], stats["u_unclean"]
    if variant == "no_umc":
        return stats["kl_clean"], stats["kl_unclean"]
    if variant == "max_logit":
        # larger confidence wins: negate so the argmin rule still applies
        return -np.max(stats["mean_clean"], axis=-1), -np.max(stats["mean_unclean"], axis=-1)
    raise ValidationError(f"unknown selector variant {variant!r}")


def select_batch(
    model: MultiHeadModel,
    x,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    variant: str = "full",
    aggregation: str = "mean_std",
    features: torch.Tensor | None = None,
) -> dict[str, np.ndarray]:
    """Vectorized head selection for a batch.

    The backbone runs once (or ``features`` is reused) and all MC passes for
    the three heads go through the tuned layers only.

    Returns a dict of per-example arrays: ``chosen`` (0 clean / 1 unclean),
    ``pred``, ``score_clean``, ``score_unclean``, ``u_clean``, ``u_unclean``,
    ``kl_clean``, ``kl_unclean``, plus ``mean_<head>`` and ``std_<head>``.
    """
    _check_mc(mc_samples)
    if variant not in VARIANTS:
        raise ValidationError(f"unknown selector variant {variant!r}")
    if set(model.head_names) != {"clean", "combined", "unclean"}:
        raise ValidationError("head selection needs a three-head model")
    h = features if features is not None else model.features(_input_tensor(model, x))
    probs = model.mc_probs(h, _HEAD_ORDER, mc_samples, seed)
    # one stacked pass: (heads, samples, N, C)
    s = torch.stack([probs[k] for k in _HEAD_ORDER]).double()
    mean = s.mean(dim=1).numpy()
    std = (s - s[:, :1]).std(dim=1, unbiased=False).numpy()
    out: dict[str, np.ndarray] = {}
    for i, head in enumerate(_HEAD_ORDER):
        out[f"mean_{head}"] = mean[i]
        out[f"std_{head}"] = std[i]
    for k in ("clean", "unclean"):
        out[f"u_{k}"] = _uncertainty_rows(out[f"mean_{k}"], out[f"std_{k}"], aggregation)
        out[f"kl_{k}"] = _kl_rows(out["mean_combined"], out[f"mean_{k}"])
    out["score_clean"], out["score_unclean"] = selection_scores(out, variant)
    sc, su = out["score_clean"], out["score_unclean"]
    chosen = (su < sc).astype(np.int64)
    out["chosen"] = chosen
    chosen_mean = np.where(chosen[:, None] == 1, out["mean_unclean"], out["mean_clean"])
    out["pred"] = chosen_mean.argmax(axis=-1)
    return out


def _result_from_batch(out: dict[str, np.ndarray], i: int, mc_samples: int) -> SelectionResult:
    head = "unclean" if out["chosen"][i] == 1 else "clean"
    dist = PredictiveDistribution(out[f"mean_{head}"][i], out[f"std_{head}"][i], mc_samples, head)
    return SelectionResult(
        chosen_head=head,
        predicted_class=int(out["pred"][i]),
        score_clean=float(out["score_clean"][i]),
        score_unclean=float(out["score_unclean"][i]),
        u_clean=float(out["u_clean"][i]),
        u_unclean=float(out["u_unclean"][i]),
        kl_clean=float(out["kl_clean"][i]),
        kl_unclean=float(out["kl_unclean"][i]),
        distribution_used=dist,
    )


def select_head(model: MultiHeadModel, x, mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0, aggregation: str = "mean_std") -> SelectionResult:
    """Pick the clean or unclean head for one input ``(C, H, W)`` by uncertainty-weighted KL."""
    out = select_batch(model, _input_tensor(model, x)[None], mc_samples, seed, "full", aggregation)
    return _result_from_batch(out, 0, mc_samples)


def select_head_variant(model: MultiHeadModel, x, variant: str, mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> SelectionResult:
    """Ablated selectors: ``no_kld`` (uncertainty only), ``no_umc`` (KL only), ``max_logit``."""
    if variant not in ("no_kld", "no_umc", "max_logit"):
        raise ValidationError(f"unknown selector variant {variant!r}")
    out = select_batch(model, _input_tensor(model, x)[None], mc_samples, seed, variant)
    return _result_from_batch(out, 0, mc_samples)


def write_traces(path, out: dict[str, np.ndarray], split: str) -> None:
    """One JSON record per example with scores, components, chosen head and class."""
    keys = ("score_clean", "score_unclean", "u_clean", "u_unclean", "kl_clean", "kl_unclean")
    with open(path, "w") as fh:
        for i in range(len(out["chosen"])):
            rec = {k: float(out[k][i]) for k in keys}
            rec.update(
                index=i,
                split=split,
                chosen_head="unclean" if out["chosen"][i] else "clean",
                predicted_class=int(out["pred"][i]),
            )
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def zero_shot_logits(image_embedding, class_embeddings):
    """Dot products of one image embedding ``(d,)`` (or a batch ``(N, d)``) with ``C x d`` class embeddings."""
    img = torch.as_tensor(image_embedding)
    cls = torch.as_tensor(class_embeddings)
    if cls.dim() != 2 or img.shape[-1] != cls.shape[1]:
        raise ValidationError(f"embedding dims disagree: {tuple(img.shape)} vs {tuple(cls.shape)}")
    return img @ cls.T


class RandomClassEmbeddings:
    """Stand-in for a text encoder: fixed unit-norm random embedding per class."""

    def __init__(self, num_classes: int, dim: int, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        e = torch.randn(num_classes, dim, generator=g, dtype=torch.float64)
        self.embeddings = e / e.norm(dim=1, keepdim=True)

    def __call__(self, class_ids=None):
        return self.embeddings if class_ids is None else self.embeddings[class_ids]


class ZeroShotHead(torch.nn.Module):
    """Project features to the embedding space, normalize, dot with class embeddings."""

    def __init__(self, proj: torch.nn.Module, class_embeddings: torch.Tensor):
        super().__init__()
        self.proj = proj
        self.register_buffer("class_embeddings", class_embeddings.to(next(proj.parameters()).dtype))

    def forward(self, h):
        z = self.proj(h)
        z = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return zero_shot_logits(z, self.class_embeddings)

