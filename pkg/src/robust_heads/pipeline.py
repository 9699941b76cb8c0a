"""Pipeline stages: pretrain, robust teacher, distillation, evaluation and ablation sweeps.

Every stage writes into ``<out>/<experiment>/<stage-hash>/`` and is skipped
when its checkpoint already exists, so sweeps that share upstream settings
reuse earlier work. Artifacts record both the full config hash of the run
that produced them and the stage hash they are keyed by.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .corruptions import build_perturbation_sequence
from .data import (
    ImageDataset,
    build_augmented_dataset,
    corrupt_dataset,
    load_dataset,
    policy_from_dict,
    split_dataset,
)
from .errors import ValidationError
from .evaluation import (
    RobustnessReport,
    TransferReport,
    ablation_table,
    evaluate_accuracy,
    format_table,
    mce,
    mfr,
    plot_ablation_bars,
    plot_severity_curves,
    severity_sweep,
    transfer_probe,
)
from .inference import select_batch, write_traces
from .losses import DistillConfig, heads_for_mode, prediction_head
from .model import (
    LayeredNet,
    MultiHeadModel,
    PartitionConfig,
    TeacherHandle,
    architecture_hash,
    build_multihead,
    clone_frozen_teacher,
    compute_split,
    load_checkpoint,
    save_checkpoint,
    student_arch,
    teacher_arch,
)
from .training import robustify_teacher, train_classifier

log = logging.getLogger(__name__)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _stamp(cfg: C.RunConfig, stage: str) -> dict:
    return {"config_hash": C.config_hash(cfg), "stage_hash": C.stage_hash(cfg, stage)}


def _check_stage(meta: dict, cfg: C.RunConfig, stage: str, path) -> None:
    got = meta.get("extra", {}).get("stage_hash")
    if got != C.stage_hash(cfg, stage):
        raise ValidationError(f"{path} was produced by a different {stage} configuration")


# ---------------------------------------------------------------------------
# data


@functools.lru_cache(maxsize=8)
def _splits(dataset: str, path: str | None, n_train: int, n_test: int, size: int, seed: int):
    if path is not None:
        data = np.load(path)
        full = ImageDataset(data["images"].astype(np.float32), data["labels"].astype(np.int64), int(data["labels"].max()) + 1, Path(path).stem)
    else:
        full = load_dataset(dataset, n_train + n_test, seed, size)
    return tuple(split_dataset(full, [n_train, n_test], seed))


def datasets(cfg: C.RunConfig) -> tuple[ImageDataset, ImageDataset]:
    """``(train, test)`` for the main dataset; deterministic in the seed."""
    d = cfg.data
    return _splits(d.dataset, d.path, d.n_train, d.n_test, d.image_size, cfg.seed)


def transfer_datasets(cfg: C.RunConfig) -> tuple[ImageDataset, ImageDataset]:
    d = cfg.data
    return _splits(d.transfer_dataset, d.transfer_path, d.n_transfer_train, d.n_transfer_test, d.image_size, cfg.seed)


def augmented_dataset(cfg: C.RunConfig):
    train, _ = datasets(cfg)
    source = train.subset(np.arange(min(cfg.data.n_augment_source, len(train))))
    aug = cfg.augmentation
    policy = policy_from_dict(
        {"kinds": aug.kinds, "severities": aug.severities, "chain_prob": aug.chain_prob, "chain_width": aug.chain_width, "chain_depth": aug.chain_depth}
    )
    return build_augmented_dataset(source, policy, aug.aug_ratio, cfg.seed)


# ---------------------------------------------------------------------------
# stages


@dataclasses.dataclass
class StageResult:
    path: Path
    cached: bool


def _num_classes(cfg):
    return datasets(cfg)[0].num_classes


def pretrain(cfg: C.RunConfig) -> dict[str, StageResult]:
    """Clean training of the large student and the small teacher."""
    out = C.run_dir(cfg, "pretrain")
    paths = {"student": out / "checkpoints" / "student.ckpt", "teacher": out / "checkpoints" / "teacher_clean.ckpt"}
    if all(p.exists() for p in paths.values()):
        log.info("cache hit: pretrain %s", out.name)
        return {k: StageResult(p, True) for k, p in paths.items()}
    train, _ = datasets(cfg)
    nc = train.num_classes
    records = {}
    for name, arch, section in (("student", student_arch(nc), cfg.student), ("teacher", teacher_arch(nc), cfg.teacher)):
        model = LayeredNet(arch, seed=cfg.seed)
        hist = train_classifier(model, train.images, train.labels, section.pretrain_epochs, cfg.seed, section.learning_rate, section.batch_size)
        records[name] = hist
        save_checkpoint(model, paths[name], C.config_hash(cfg), _stamp(cfg, "pretrain"))
    _write_json(out / "logs" / "pretrain.json", records)
    log.info("pretrain done: %s", out)
    return {k: StageResult(p, False) for k, p in paths.items()}


def _load_layered(path, cfg, stage):
    model, meta = load_checkpoint(path)
    _check_stage(meta, cfg, stage, path)
    return model


def train_teacher(cfg: C.RunConfig) -> StageResult:
    """Fine-tune the small clean teacher on D^a."""
    out = C.run_dir(cfg, "teacher")
    ckpt = out / "checkpoints" / "teacher_robust.ckpt"
    if ckpt.exists():
        log.info("cache hit: teacher %s", out.name)
        return StageResult(ckpt, True)
    base = _load_layered(pretrain(cfg)["teacher"].path, cfg, "pretrain")
    da = augmented_dataset(cfg)
    da.write_manifest(out / "logs" / "augmented_manifest.jsonl")
    _, test = datasets(cfg)
    probe = test.subset(np.arange(min(200, len(test))))
    shifted = [corrupt_dataset(probe, k, 3, cfg.evaluation.seed + 7 * i) for i, k in enumerate(cfg.evaluation.kinds)]
    eval_split = (np.concatenate([s.images for s in shifted]), np.concatenate([s.labels for s in shifted]))
    handle, info = robustify_teacher(base, da, cfg.teacher.robust_epochs, cfg.seed, cfg.teacher.learning_rate, cfg.teacher.batch_size, eval_split)
    _write_jsonl(out / "logs" / "teacher_train.jsonl", [{"epoch": i, "loss": v} for i, v in enumerate(info.pop("losses"))])
    _write_json(out / "logs" / "teacher_summary.json", info)
    save_checkpoint(handle.model, ckpt, C.config_hash(cfg), _stamp(cfg, "teacher"))
    return StageResult(ckpt, False)


def distill_config(cfg: C.RunConfig) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(
        temperature=d.temperature,
        lambda_c=d.lambda_c,
        lambda_d=d.lambda_d,
        learning_rate=d.learning_rate,
        batch_size=d.batch_size,
        epochs=d.epochs,
        data_fraction=d.data_fraction,
        seed=cfg.seed,
        mode=d.mode,
        checkpoint_every=d.checkpoint_every,
    )


def partition_config(cfg: C.RunConfig) -> PartitionConfig:
    p = cfg.partition
    return PartitionConfig(p.fraction_tuned, p.head_fraction, p.dropout_rate)


def expected_arch_hash(cfg: C.RunConfig) -> str:
    arch = student_arch(_num_classes(cfg))
    split = compute_split(len(arch), partition_config(cfg))
    part = partition_config(cfg)
    return architecture_hash(MultiHeadModel(arch, split, heads_for_mode(cfg.distill.mode), part.dropout_rate))


def distill(cfg: C.RunConfig, teacher_path=None, student_path=None) -> StageResult:
    """Build the multi-head student and distill it in the configured mode."""
    from .training import distill as run_distill

    out = C.run_dir(cfg, "distill")
    ckpt = out / "checkpoints" / "student_multihead.ckpt"
    if ckpt.exists():
        log.info("cache hit: distill %s", out.name)
        return StageResult(ckpt, True)
    if student_path is None:
        student = _load_layered(pretrain(cfg)["student"].path, cfg, "pretrain")
    else:
        student, _ = load_checkpoint(student_path)
    if teacher_path is None:
        teacher = _load_layered(train_teacher(cfg).path, cfg, "teacher")
    else:
        teacher, _ = load_checkpoint(teacher_path)
    if teacher.num_classes != student.num_classes:
        raise ValidationError(f"teacher has {teacher.num_classes} classes, student has {student.num_classes}")
    dcfg = distill_config(cfg)
    model = build_multihead(student, partition_config(cfg), cfg.seed, heads_for_mode(dcfg.mode))
    teachers = {"clean": clone_frozen_teacher(student), "robust": TeacherHandle("robust_small", teacher)}
    log_path = out / "logs" / "distill.jsonl"
    log_path.write_text("")
    model, _ = run_distill(model, teachers, augmented_dataset(cfg), dcfg, log_path, out / "checkpoints", C.config_hash(cfg))
    save_checkpoint(model, ckpt, C.config_hash(cfg), _stamp(cfg, "distill"))
    return StageResult(ckpt, False)


# ---------------------------------------------------------------------------
# evaluation


def _predictor(model: MultiHeadModel, cfg: C.RunConfig, variant: str):
    """Batch predict function returning labels, plus an optional routing hook."""
    head = prediction_head(cfg.distill.mode)
    ev = cfg.evaluation

    def predict(images, return_out=False):
        x = torch.as_tensor(np.asarray(images)).to(next(model.parameters()).dtype)
        if head is not None:
            with torch.no_grad():
                pred = model(x, head).argmax(-1).numpy()
            return (pred, None) if return_out else pred
        out = select_batch(model, x, ev.mc_samples, ev.seed, variant, ev.aggregation)
        return (out["pred"], out) if return_out else out["pred"]

    return predict


@functools.lru_cache(maxsize=4)
def _baseline_sweep(cfg_json: str):
    cfg = C.RunConfig.model_validate_json(cfg_json)
    base = _load_layered(pretrain(cfg)["student"].path, cfg, "pretrain")
    _, test = _eval_test(cfg)
    with torch.no_grad():
        fn = lambda imgs: base(torch.as_tensor(imgs)).argmax(-1).numpy()  # noqa: E731
        return evaluate_accuracy(fn, test), severity_sweep(fn, test, cfg.evaluation.kinds, cfg.evaluation.seed)


def _eval_test(cfg: C.RunConfig):
    train, test = datasets(cfg)
    n = cfg.evaluation.n_test
    if n is not None:
        test = test.subset(np.arange(min(n, len(test))))
    return train, test


def _penultimate(layers):
    def fn(images):
        x = torch.as_tensor(np.asarray(images))
        with torch.no_grad():
            for layer in layers:
                x = layer(x)
        return x.numpy()

    return fn


def evaluate(cfg: C.RunConfig, checkpoint=None, variant: str | None = None) -> Path:
    """Run every configured suite on a distilled checkpoint; returns the report path."""
    variant = variant or cfg.evaluation.selector
    ckpt = Path(checkpoint) if checkpoint else distill(cfg).path
    model, meta = load_checkpoint(ckpt)
    if meta["arch_hash"] != expected_arch_hash(cfg):
        raise ValidationError(f"checkpoint architecture {meta['arch_hash']} does not match the configuration")
    ev = cfg.evaluation
    sub = cfg.model_copy(update={"evaluation": ev.model_copy(update={"selector": variant})})
    out = C.run_dir(sub, "eval")
    _, test = _eval_test(cfg)
    predict = _predictor(model, cfg, variant)
    three_head = prediction_head(cfg.distill.mode) is None

    clean_pred, clean_out = predict(test.images, return_out=True)
    clean_acc = float(np.mean(clean_pred == test.labels))
    per_corruption: dict[str, list[float]] = {}
    shifted_outs, usage = [], {}
    for i, kind in enumerate(ev.kinds):
        row = []
        for s in range(1, 6):
            ds = corrupt_dataset(test, kind, s, ev.seed + 1000 * i)
            pred, o = predict(ds.images, return_out=True)
            row.append(float(np.mean(pred == ds.labels)))
            if o is not None:
                shifted_outs.append(o)
                usage.setdefault(kind, {"clean": 0, "unclean": 0})
                usage[kind]["unclean"] += int(o["chosen"].sum())
                usage[kind]["clean"] += int(len(o["chosen"]) - o["chosen"].sum())
        per_corruption[kind] = row

    seqs = []
    for j, kind in enumerate(ev.sequence_kinds):
        for k in range(ev.n_sequences):
            seqs.append(build_perturbation_sequence(test.images[k % len(test)], kind, ev.sequence_length, ev.seed + 97 * j + k))

    report = RobustnessReport(clean_accuracy=clean_acc, per_corruption=per_corruption, head_usage=usage)
    if seqs:
        report.mfr = mfr(predict, seqs)
    if ev.mce_baseline == "base":
        _, base_sweep = _baseline_sweep(cfg.model_dump_json())
        try:
            report.mce = mce(per_corruption, base_sweep)
        except ZeroDivisionError as exc:
            log.warning("mCE undefined: %s", exc)
    if three_head:
        shifted_trace = {k: np.concatenate([o[k] for o in shifted_outs]) for k in shifted_outs[0]}
        write_traces(out / "reports" / "traces_clean.jsonl", clean_out, "clean")
        write_traces(out / "reports" / "traces_shifted.jsonl", shifted_trace, "shifted")
        report.f_correct_clean = float(np.mean(clean_out["chosen"] == 0))
        report.f_correct_shifted = float(np.mean(shifted_trace["chosen"] == 1))
    doc = {
        "row_name": f"{cfg.distill.mode}/{variant}",
        "robustness": report.to_dict(),
        "checkpoint": {"config_hash": meta["config_hash"], "arch_hash": meta["arch_hash"]},
        **_stamp(sub, "eval"),
    }
    if ev.transfer:
        t_train, t_test = transfer_datasets(cfg)
        base = _load_layered(pretrain(cfg)["student"].path, cfg, "pretrain")
        head = prediction_head(cfg.distill.mode) or "clean"
        tuned = list(model.backbone) + list(model.shared) + list(model.heads[head])[:-1]
        tr = TransferReport(
            t_train.name,
            transfer_probe(_penultimate(list(base.layers)[:-1]), t_train, t_test, cfg.seed),
            transfer_probe(_penultimate(tuned), t_train, t_test, cfg.seed),
        )
        doc["transfer"] = tr.to_dict()
        _write_json(out / "reports" / "transfer.json", dict(tr.to_dict(), **_stamp(sub, "eval")))
    _write_json(out / "reports" / "report.json", doc)
    plot_severity_curves(per_corruption, out / "plots" / "severity.png", doc["row_name"])
    return out / "reports" / "report.json"


# ---------------------------------------------------------------------------
# ablation


def _with(cfg: C.RunConfig, **dotted) -> C.RunConfig:
    raw = cfg.model_dump(mode="json")
    for key, value in dotted.items():
        C.set_dotted(raw, key.replace("__", "."), value)
    return C.RunConfig.model_validate(raw)


def ablate(cfg: C.RunConfig) -> Path:
    """Cross-product of modes x selectors x fractions x seeds; returns the table path.

    Rows are averaged over seeds and named ``mode/selector/f<fraction>``.
    """
    ab = cfg.ablation
    rows: dict[str, list[dict]] = {}
    for seed in ab.seeds:
        for frac in ab.fractions:
            for mode in ab.modes:
                run = _with(cfg, seed=seed, partition__fraction_tuned=frac, distill__mode=mode)
                ckpt = distill(run).path
                single = prediction_head(mode) is not None
                metrics = None
                for sel in ab.selectors:
                    if metrics is None or not single:
                        # a single-head model ignores the selector, so its one evaluation fills every column
                        report = json.loads(evaluate(run, ckpt, run.evaluation.selector if single else sel).read_text())
                        metrics = dict(report["robustness"])
                        if "transfer" in report:
                            metrics["transfer_delta"] = report["transfer"]["delta"]
                    rows.setdefault(f"{mode}/{sel}/f{frac:g}", []).append(metrics)
    averaged = {}
    for name, runs in rows.items():
        keys = {k for r in runs for k, v in r.items() if isinstance(v, (int, float)) and v is not None}
        averaged[name] = {k: float(np.mean([r[k] for r in runs if r.get(k) is not None])) for k in keys}
    out = C.output_root(cfg) / cfg.experiment / ("ablate-" + C.hash_dict(C.config_dict(cfg)))
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(averaged, reference=_reference_row(averaged))
    table["config_hash"] = C.config_hash(cfg)
    table["seeds"] = list(ab.seeds)
    _write_json(out / "ablation.json", table)
    (out / "ablation.txt").write_text(format_table(table) + "\n")
    plot_ablation_bars(table, out / "ablation.png")
    return out / "ablation.json"


def _reference_row(rows):
    names = sorted(n for n in rows if n.startswith("apt/"))
    return names[0] if names else None


def fraction_table(table: dict) -> dict[float, dict[str, float]]:
    """Group ablation rows by tuned fraction: ``{fraction: {row-prefix: shifted accuracy}}``."""
    out: dict[float, dict[str, float]] = {}
    for r in table["rows"]:
        prefix, frac = r["name"].rsplit("/f", 1)
        out.setdefault(float(frac), {})[prefix] = r["shifted_accuracy"]
    return dict(sorted(out.items()))
