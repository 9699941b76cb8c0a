"""Teacher robustification and the gated multi-head distillation loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ContractViolationError, TrainingDivergedError, ValidationError
from .losses import MODE_SPECS, DistillConfig, gated_terms
from .model import MultiHeadModel, TeacherHandle, _generator, save_checkpoint

log = logging.getLogger(__name__)

LOSS_KEYS = ("lc_clean", "ld_clean", "lc_aug", "ld_aug")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _as_tensor(a, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a)).to(dtype)


def predict_logits(model, images, batch_size: int = 512) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(_as_tensor(images[start : start + batch_size], dtype)))
    return torch.cat(out) if out else torch.empty(0)


def accuracy(model, images, labels) -> float:
    pred = predict_logits(model, images).argmax(-1).numpy()
    return float(np.mean(pred == np.asarray(labels)))


def train_classifier(model, images, labels, epochs: int, seed: int, lr: float = 1e-3, batch_size: int = 64, weight_decay: float = 0.0):
    """Full-parameter cross-entropy training with Adam; returns per-epoch mean losses."""
    dtype = next(model.parameters()).dtype
    x_all = _as_tensor(images, dtype)
    y_all = torch.as_tensor(np.asarray(labels)).long()
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA]))
    history = []
    model.train()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(y_all), batch_size, rng):
            idx = torch.as_tensor(idx)
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history


def robustify_teacher(small_model, dataset, epochs: int, seed: int, lr: float = 1e-3, batch_size: int = 64, eval_split=None):
    """Fine-tune every parameter of ``small_model`` on D^a and freeze the result.

    Args:
      small_model: classifier over the same classes as the dataset (copied, not mutated).
      dataset: ``AugmentedDataset`` of clean and augmented examples.
      eval_split: optional ``(images, labels)`` of held-out corrupted data used
        to check the run improved robustness.

    Returns:
      ``(TeacherHandle, info)``; ``info["status"]`` is ``"ok"`` or ``"warning"``
      when the held-out corrupted accuracy did not improve.
    """
    import copy

    if small_model.num_classes != dataset.num_classes:
        raise ValidationError("teacher and dataset class sets differ")
    model = copy.deepcopy(small_model)
    for p in model.parameters():
        p.requires_grad_(True)
    info = {"status": "ok"}
    if eval_split is not None:
        info["acc_before"] = accuracy(model, *eval_split)
    info["losses"] = train_classifier(model, dataset.inputs, dataset.labels, epochs, seed, lr, batch_size)
    if eval_split is not None:
        info["acc_after"] = accuracy(model, *eval_split)
        if not info["acc_after"] > info["acc_before"]:
            info["status"] = "warning"
            warnings.warn(
                f"teacher robustification did not improve corrupted accuracy "
                f"({info['acc_before']:.3f} -> {info['acc_after']:.3f})",
                RuntimeWarning,
            )
    return TeacherHandle("robust_small", model), info


@dataclasses.dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    loss_sums: dict[str, float]
    rng: np.random.Generator
    dropout_gen: torch.Generator

    def optimizer_parameter_ids(self) -> set[int]:
        return {id(p) for group in self.optimizer.param_groups for p in group["params"]}


def _features_in_chunks(model: MultiHeadModel, x: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
    return torch.cat([model.features(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def _teacher_in_chunks(teacher: TeacherHandle, x: torch.Tensor, chunk: int = 1024) -> torch.Tensor:
    out = [teacher.logits(x[i : i + chunk].to(next(teacher.model.parameters()).dtype)) for i in range(0, len(x), chunk)]
    return torch.cat(out).to(x.dtype)


def distill(model: MultiHeadModel, teachers, dataset, cfg: DistillConfig, log_path=None, checkpoint_dir=None, config_hash: str = ""):
    """Mini-batch Adam on the gated loss, updating only the shared section and heads.

    The backbone and both teachers are frozen, so backbone features and teacher
    logits are computed once for the (subsampled) dataset in dropout-off mode
    and reused every epoch. ``teachers`` maps ``"clean"`` and ``"robust"`` to
    :class:`TeacherHandle` objects; modes that never use one may omit it.

    Returns:
      ``(model, records)``: the trained model (updated in place) and one
      record per epoch with the step count, learning rate, mode and the mean
      of each loss component.
    """
    spec = MODE_SPECS[cfg.mode]
    if set(model.head_names) != set(spec.heads):
        raise ValidationError(f"mode {cfg.mode!r} needs heads {spec.heads}, model has {model.head_names}")
    needed = {spec.clean.teacher, spec.aug.teacher} if spec.use_kd and cfg.lambda_d > 0 else set()
    for name in needed:
        if name not in teachers:
            raise ValidationError(f"mode {cfg.mode!r} needs the {name} teacher")
        t = teachers[name]
        if not isinstance(t, TeacherHandle):
            raise ContractViolationError("teachers must be frozen TeacherHandle objects")
        if t.num_classes != model.num_classes:
            raise ValidationError("teacher and student class sets differ")

    data = dataset.take_fraction(cfg.data_fraction, cfg.seed)
    records = []
    params = model.tunable_parameters()
    if cfg.epochs == 0 or not params or len(data) == 0:
        return model, records

    dtype = next(model.parameters()).dtype
    x = _as_tensor(data.inputs, dtype)
    y = torch.as_tensor(np.asarray(data.labels)).long()
    beta = torch.as_tensor(np.asarray(data.betas)).long()
    feats = _features_in_chunks(model, x)
    n = len(y)
    teacher_logits = {name: _teacher_in_chunks(teachers[name], x) for name in needed}
    for name in ("clean", "robust"):
        teacher_logits.setdefault(name, torch.zeros(n, model.num_classes, dtype=dtype))
    del x

    state = TrainState(
        step=0,
        optimizer=torch.optim.Adam(params, lr=cfg.learning_rate),
        loss_sums=dict.fromkeys(LOSS_KEYS, 0.0),
        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD157])),
        dropout_gen=_generator(cfg.seed * 7919 + 17),
    )
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    if state.optimizer_parameter_ids() & backbone_ids:
        raise ContractViolationError("optimizer must not hold backbone parameters")

    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            counts = {"clean": 0, "aug": 0}
            for idx in _batches(n, cfg.batch_size, state.rng):
                idx = torch.as_tensor(idx)
                t_logits = {k: v[idx] for k, v in teacher_logits.items()}
                total, parts = gated_terms(model, feats[idx], y[idx], beta[idx], t_logits, cfg, state.dropout_gen)
                loss = total.mean()
                if not torch.isfinite(loss):
                    snapshot = {
                        "epoch": epoch,
                        "step": state.step,
                        "parts": {k: float(v.detach().sum()) for k, v in parts.items()},
                        "param_norms": [float(p.detach().norm()) for p in params],
                    }
                    raise TrainingDivergedError(f"non-finite loss at step {state.step}", snapshot)
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                model.check_backbone_untouched()
                state.optimizer.step()
                state.step += 1
                nb_clean = int(beta[idx].sum())
                counts["clean"] += nb_clean
                counts["aug"] += len(idx) - nb_clean
                for k in LOSS_KEYS:
                    sums[k] += float(parts[k].detach().sum())
            rec = {
                "epoch": epoch,
                "step": state.step,
                "lr": cfg.learning_rate,
                "mode": cfg.mode,
                "lc_clean": sums["lc_clean"] / max(counts["clean"], 1),
                "ld_clean": sums["ld_clean"] / max(counts["clean"], 1),
                "lc_aug": sums["lc_aug"] / max(counts["aug"], 1),
                "ld_aug": sums["ld_aug"] / max(counts["aug"], 1),
            }
            for k in LOSS_KEYS:
                state.loss_sums[k] += sums[k]
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            records.append(rec)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt", config_hash)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, records
