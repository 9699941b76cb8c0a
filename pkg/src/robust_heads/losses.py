"""Classification, distillation and gated multi-head losses.

The gated loss routes every example to a pair of heads: clean examples train
the clean and combined heads against the clean teacher, augmented examples
train the unclean and combined heads against the robust teacher. Baseline
modes reuse the same machinery with different head/teacher routing.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping

import torch
from torch.nn import functional as F

from .errors import ContractViolationError, ValidationError

MODES = ("ours", "apt", "only_kd", "combined_head", "single_teacher", "no_kd")


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    lambda_c: float = 1.0
    lambda_d: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    data_fraction: float = 0.5
    seed: int = 0
    mode: str = "ours"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.lambda_c < 0 or self.lambda_d < 0 or self.lambda_c + self.lambda_d <= 0:
            raise ValidationError("loss weights must be nonnegative with a positive sum")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValidationError("data_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")


@dataclasses.dataclass(frozen=True)
class Route:
    """Which heads an example trains and which teacher they are distilled from."""

    heads: tuple[str, ...]
    teacher: str  # "clean" or "robust"


@dataclasses.dataclass(frozen=True)
class ModeSpec:
    heads: tuple[str, ...]
    clean: Route
    aug: Route
    use_kd: bool = True


MODE_SPECS = {
    "ours": ModeSpec(("clean", "combined", "unclean"), Route(("clean", "combined"), "clean"), Route(("unclean", "combined"), "robust")),
    "single_teacher": ModeSpec(("clean", "combined", "unclean"), Route(("clean", "combined"), "robust"), Route(("unclean", "combined"), "robust")),
    "no_kd": ModeSpec(("clean", "combined", "unclean"), Route(("clean", "combined"), "clean"), Route(("unclean", "combined"), "robust"), use_kd=False),
    "combined_head": ModeSpec(("combined",), Route(("combined",), "clean"), Route(("combined",), "robust")),
    "only_kd": ModeSpec(("clean",), Route(("clean",), "robust"), Route(("clean",), "robust")),
    "apt": ModeSpec(("clean",), Route(("clean",), "clean"), Route(("clean",), "clean"), use_kd=False),
}


def heads_for_mode(mode: str) -> tuple[str, ...]:
    return MODE_SPECS[mode].heads


def prediction_head(mode: str) -> str | None:
    """Head that serves single-head modes; None means head selection is used."""
    heads = MODE_SPECS[mode].heads
    return heads[0] if len(heads) == 1 else None


def classification_loss(logits: torch.Tensor, label, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of ``softmax(logits)`` against integer labels."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label)
    if logits.dim() == 1:
        logits, label = logits[None], label.reshape(1)
    return F.cross_entropy(logits, label.long(), reduction=reduction)


def distillation_loss(student_logits, teacher_logits, temperature: float, reduction: str = "mean") -> torch.Tensor:
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))``, per example or averaged."""
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValidationError(f"logit shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    squeeze = s.dim() == 1
    if squeeze:
        s, t = s[None], t[None]
    log_p_t = F.log_softmax(t / temperature, dim=-1)
    log_p_s = F.log_softmax(s / temperature, dim=-1)
    per = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1) * temperature**2
    if reduction == "none":
        return per[0] if squeeze else per
    return per.mean()


def route_terms(
    model,
    shared_out: torch.Tensor,
    y: torch.Tensor,
    route: Route,
    teacher_logits: torch.Tensor,
    cfg: DistillConfig,
    use_kd: bool = True,
    generator=None,
):
    """Per-example ``(L_c, L_d)`` summed over the route's heads, unweighted."""
    lc = shared_out.new_zeros(shared_out.shape[0])
    ld = shared_out.new_zeros(shared_out.shape[0])
    for head in route.heads:
        logits = model.head_forward(shared_out, head, generator)
        lc = lc + classification_loss(logits, y, reduction="none")
        if use_kd and cfg.lambda_d > 0:
            ld = ld + distillation_loss(logits, teacher_logits, cfg.temperature, reduction="none")
    return lc, ld


def _check_beta(beta, expected: int, name: str):
    if beta is None:
        return
    b = torch.as_tensor(beta)
    if torch.any(b != expected):
        raise ContractViolationError(f"{name} requires beta={expected} for every example")


def _teacher_logits(teacher, x):
    return teacher.logits(x) if hasattr(teacher, "logits") else teacher(x)


def loss_clean(x, y, model, clean_teacher, cfg: DistillConfig, beta=None, generator=None) -> torch.Tensor:
    """Clean-example objective: CE + KD on the clean and combined heads vs the clean teacher."""
    _check_beta(beta, 1, "loss_clean")
    h = model.shared_forward(model.features(x), generator)
    lc, ld = route_terms(model, h, torch.as_tensor(y), MODE_SPECS["ours"].clean, _teacher_logits(clean_teacher, x), cfg, True, generator)
    return (cfg.lambda_c * lc + cfg.lambda_d * ld).mean()


def loss_aug(x, y, model, robust_teacher, cfg: DistillConfig, beta=None, generator=None) -> torch.Tensor:
    """Augmented-example objective: CE + KD on the unclean and combined heads vs the robust teacher."""
    _check_beta(beta, 0, "loss_aug")
    h = model.shared_forward(model.features(x), generator)
    lc, ld = route_terms(model, h, torch.as_tensor(y), MODE_SPECS["ours"].aug, _teacher_logits(robust_teacher, x), cfg, True, generator)
    return (cfg.lambda_c * lc + cfg.lambda_d * ld).mean()


def gated_terms(
    model,
    features: torch.Tensor,
    y: torch.Tensor,
    beta: torch.Tensor,
    teacher_logits: Mapping[str, torch.Tensor],
    cfg: DistillConfig,
    generator=None,
):
    """Per-example loss components for a mixed batch from cached backbone features.

    One shared-section pass (one dropout draw) serves both branches, so
    gradients of the clean and augmented terms accumulate into the shared
    parameters in a single step. Returns ``(total, parts)`` where ``total`` is
    the per-example gated loss and ``parts`` maps ``lc_clean, ld_clean,
    lc_aug, ld_aug`` to per-example tensors (zero where the gate is off).
    """
    spec = MODE_SPECS[cfg.mode]
    beta = torch.as_tensor(beta).to(features.dtype)
    clean_idx = torch.nonzero(beta == 1, as_tuple=True)[0]
    aug_idx = torch.nonzero(beta == 0, as_tuple=True)[0]
    shared = model.shared_forward(features, generator)
    parts = {k: features.new_zeros(features.shape[0]) for k in ("lc_clean", "ld_clean", "lc_aug", "ld_aug")}
    for idx, route, tag in ((clean_idx, spec.clean, "clean"), (aug_idx, spec.aug, "aug")):
        if len(idx) == 0:
            continue
        lc, ld = route_terms(
            model, shared[idx], y[idx], route, teacher_logits[route.teacher][idx], cfg, spec.use_kd, generator
        )
        parts[f"lc_{tag}"] = parts[f"lc_{tag}"].index_put((idx,), lc)
        parts[f"ld_{tag}"] = parts[f"ld_{tag}"].index_put((idx,), ld)
    clean_loss = cfg.lambda_c * parts["lc_clean"] + cfg.lambda_d * parts["ld_clean"]
    aug_loss = cfg.lambda_c * parts["lc_aug"] + cfg.lambda_d * parts["ld_aug"]
    total = beta * clean_loss + (1 - beta) * aug_loss
    return total, parts


def loss_total(batch, model, teachers, cfg: DistillConfig, generator=None) -> torch.Tensor:
    """Mean over the batch of ``beta * L_clean + (1 - beta) * L_aug``.

    Args:
      batch: an ``AugmentedDataset`` (or anything with ``inputs``, ``labels``
        and ``betas`` arrays) or a sequence of ``AugmentedExample``.
      teachers: mapping with ``"clean"`` and ``"robust"`` teacher handles.
    """
    if hasattr(batch, "inputs"):
        x, y, beta = batch.inputs, batch.labels, batch.betas
    else:
        batch = list(batch)
        if not batch:
            raise ValidationError("batch is empty")
        x = torch.stack([torch.as_tensor(e.input) for e in batch])
        y = torch.tensor([e.label for e in batch])
        beta = torch.tensor([e.beta for e in batch])
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(x).to(dtype)
    if len(x) == 0:
        raise ValidationError("batch is empty")
    y = torch.as_tensor(y).long()
    logits = {name: _teacher_logits(t, x) for name, t in teachers.items()}
    total, _ = gated_terms(model, model.features(x), y, torch.as_tensor(beta), logits, cfg, generator)
    return total.mean()
