"""Robustness metrics: accuracy sweeps, mCE, flip rate, head-routing accuracy, linear probes."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .corruptions import PerturbationSequence
from .data import ImageDataset, corrupt_dataset
from .errors import ValidationError

PredictFn = Callable[[np.ndarray], np.ndarray]
"""Maps a batch of images ``(N, C, H, W)`` to logits/scores ``(N, C)`` or labels ``(N,)``."""


def _labels_from(pred) -> np.ndarray:
    pred = np.asarray(pred)
    return pred.argmax(axis=-1) if pred.ndim == 2 else pred.astype(np.int64)


def evaluate_accuracy(predict_fn: PredictFn, dataset: ImageDataset) -> float:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    pred = _labels_from(predict_fn(dataset.images))
    return float(np.mean(pred == np.asarray(dataset.labels)))


def severity_sweep(
    predict_fn: PredictFn, clean_test: ImageDataset, kinds: Sequence[str], seed: int, tables=None
) -> dict[str, list[float]]:
    """Accuracy at severities 1..5 for each kind, corrupting on the fly with fixed seeds."""
    table = {}
    for i, kind in enumerate(kinds):
        table[kind] = [
            evaluate_accuracy(predict_fn, corrupt_dataset(clean_test, kind, s, seed + 1000 * i, tables))
            for s in range(1, 6)
        ]
    return table


def mce(per_corruption: Mapping[str, Sequence[float]], baseline: Mapping[str, Sequence[float]]) -> float:
    """Mean over kinds of summed error relative to the baseline's summed error, x100.

    Both arguments map kind -> per-severity accuracies.
    """
    if set(per_corruption) != set(baseline):
        raise ValidationError("model and baseline were evaluated on different corruption kinds")
    if not per_corruption:
        raise ValidationError("no corruption kinds to average")
    bad = [k for k in baseline if sum(1 - a for a in baseline[k]) == 0]
    if bad:
        raise ZeroDivisionError(f"baseline has zero total error for kinds: {', '.join(sorted(bad))}")
    ratios = []
    for kind in sorted(per_corruption):
        err = sum(1.0 - a for a in per_corruption[kind])
        base = sum(1.0 - a for a in baseline[kind])
        ratios.append(err / base)
    return 100.0 * float(np.mean(ratios))


def flip_rate(predictions: Sequence[int]) -> float:
    p = np.asarray(predictions)
    if len(p) < 2:
        raise ValidationError("flip rate needs at least two frames")
    return float(np.count_nonzero(p[1:] != p[:-1]) / (len(p) - 1))


def mfr(predict_fn: PredictFn, sequences: Iterable[PerturbationSequence]) -> float:
    """Mean over sequences of the fraction of consecutive frames whose prediction changes."""
    rates = []
    for seq in sequences:
        frames = np.stack(seq.frames)
        rates.append(flip_rate(_labels_from(predict_fn(frames))))
    if not rates:
        raise ValidationError("no sequences given")
    return float(np.mean(rates))


CORRECT_HEAD = {"clean": "clean", "shifted": "unclean"}


def f_correct(selection_traces: Iterable, split: str) -> float:
    """Fraction of traces routed to the split's correct head (clean for clean, unclean for shifted)."""
    if split not in CORRECT_HEAD:
        raise ValidationError(f"split must be 'clean' or 'shifted', got {split!r}")
    heads = [t["chosen_head"] if isinstance(t, Mapping) else t.chosen_head for t in selection_traces]
    if not heads:
        raise ValidationError("no traces given")
    return float(np.mean([h == CORRECT_HEAD[split] for h in heads]))


def transfer_probe(backbone_fn, train_ds: ImageDataset, test_ds: ImageDataset, seed: int, epochs: int = 100, lr: float = 0.05) -> float:
    """Train one linear layer on frozen features; return test accuracy.

    Features are standardized with training-set statistics and the probe is
    fit by full-batch Adam, so the result is deterministic given ``seed``.
    """
    with torch.no_grad():
        f_train = torch.as_tensor(np.asarray(backbone_fn(train_ds.images)), dtype=torch.float64).flatten(1)
        f_test = torch.as_tensor(np.asarray(backbone_fn(test_ds.images)), dtype=torch.float64).flatten(1)
    mu = f_train.mean(0, keepdim=True)
    sd = f_train.std(0, keepdim=True).clamp_min(1e-6)
    f_train, f_test = (f_train - mu) / sd, (f_test - mu) / sd
    y = torch.as_tensor(np.asarray(train_ds.labels)).long()
    num_classes = max(train_ds.num_classes, int(y.max()) + 1)
    g = torch.Generator().manual_seed(seed)
    w = (torch.randn(f_train.shape[1], num_classes, generator=g, dtype=torch.float64) * 0.01).requires_grad_()
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.cross_entropy(f_train @ w + b, y) + 1e-4 * (w**2).sum()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (f_test @ w + b).argmax(-1).numpy()
    return float(np.mean(pred == np.asarray(test_ds.labels)))


@dataclasses.dataclass
class RobustnessReport:
    clean_accuracy: float
    per_corruption: dict[str, list[float]]
    mce: float | None = None
    mfr: float | None = None
    f_correct_clean: float | None = None
    f_correct_shifted: float | None = None
    head_usage: dict[str, dict[str, int]] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        fracs = [self.clean_accuracy, self.mfr, self.f_correct_clean, self.f_correct_shifted]
        fracs += [a for row in self.per_corruption.values() for a in row]
        if any(f is not None and not 0.0 <= f <= 1.0 for f in fracs):
            raise ValidationError("fractions must lie in [0, 1]")
        if any(len(row) != 5 for row in self.per_corruption.values()):
            raise ValidationError("per-severity sequences must have 5 entries")

    @property
    def shifted_accuracy(self) -> float:
        return float(np.mean([a for row in self.per_corruption.values() for a in row]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shifted_accuracy"] = self.shifted_accuracy
        return d


@dataclasses.dataclass
class TransferReport:
    dataset: str
    probe_accuracy_original: float
    probe_accuracy_distilled: float

    def __post_init__(self):
        for f in (self.probe_accuracy_original, self.probe_accuracy_distilled):
            if not 0.0 <= f <= 1.0:
                raise ValidationError("probe accuracies must lie in [0, 1]")

    @property
    def delta(self) -> float:
        return self.probe_accuracy_distilled - self.probe_accuracy_original

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["delta"] = self.delta
        return d


# ---------------------------------------------------------------------------
# Ablation tables

ABLATION_COLUMNS = ("clean_accuracy", "shifted_accuracy", "mce", "mfr", "f_correct_clean", "f_correct_shifted")


def ablation_table(rows: Mapping[str, Mapping[str, float]] | Iterable, reference: str | None = None, columns=ABLATION_COLUMNS) -> dict:
    """Collect per-run metrics into a table keyed by row name.

    ``rows`` maps a row name to its metric dict, or is an iterable of run
    directories whose ``reports/report.json`` supplies the metrics. Rows are
    sorted by name. When ``reference`` names a row, a ``delta_shifted`` column
    gives each row's shifted accuracy minus the reference's. Missing metrics
    become ``None``.
    """
    if not isinstance(rows, Mapping):
        loaded = {}
        for run_dir in rows:
            path = Path(run_dir) / "reports" / "report.json"
            data = json.loads(path.read_text())
            name = data.get("row_name") or Path(run_dir).name
            loaded[name] = dict(data.get("robustness", {}), **data.get("summary", {}))
        rows = loaded
    table = {"columns": list(columns), "rows": []}
    for name in sorted(rows):
        metrics = rows[name]
        table["rows"].append({"name": name, **{c: _num(metrics.get(c)) for c in columns}})
    if reference is not None:
        ref = next((r for r in table["rows"] if r["name"] == reference), None)
        table["columns"].append("delta_shifted")
        for r in table["rows"]:
            if ref is None or r["shifted_accuracy"] is None or ref["shifted_accuracy"] is None:
                r["delta_shifted"] = None
            else:
                r["delta_shifted"] = r["shifted_accuracy"] - ref["shifted_accuracy"]
    return table


def _num(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    return float(v)


def format_table(table: dict) -> str:
    cols = table["columns"]
    header = ["name"] + cols
    lines = [header]
    for r in table["rows"]:
        lines.append([r["name"]] + ["-" if r.get(c) is None else f"{r[c]:.4f}" for c in cols])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = []
    for j, line in enumerate(lines):
        out.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Plots


def plot_severity_curves(per_corruption: Mapping[str, Sequence[float]], path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in sorted(per_corruption):
        ax.plot(range(1, 6), per_corruption[kind], marker="o", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("accuracy")
    ax.set_xticks(range(1, 6))
    ax.set_title(title)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_ablation_bars(table: dict, path, column: str = "shifted_accuracy") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r["name"] for r in table["rows"]]
    vals = [r.get(column) or 0.0 for r in table["rows"]]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3.5))
    ax.bar(range(len(names)), vals)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(column)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
