import json
import math

import numpy as np
import pytest
import torch

from robust_heads.data import AugmentationPolicy, AugmentedDataset, build_augmented_dataset, make_shapes
from robust_heads.errors import ContractViolationError, TrainingDivergedError, ValidationError
from robust_heads.losses import DistillConfig, heads_for_mode
from robust_heads.model import (
    LayeredNet,
    PartitionConfig,
    TeacherHandle,
    build_multihead,
    clone_frozen_teacher,
    section_bytes,
)
from robust_heads.training import distill, robustify_teacher, train_classifier

from conftest import tiny_conv_arch


@pytest.fixture(scope="module")
def setup():
    ds = make_shapes(60, seed=0, size=8)
    da = build_augmented_dataset(ds, AugmentationPolicy(), 1.0, seed=0)
    base = LayeredNet(tiny_conv_arch(10), seed=0)
    train_classifier(base, ds.images, ds.labels, epochs=1, seed=0)
    small = LayeredNet(tiny_conv_arch(10), seed=1)
    teachers = {"clean": clone_frozen_teacher(base), "robust": TeacherHandle("robust_small", small)}
    return ds, da, base, teachers


def _model(base, mode="ours", frac=0.5):
    return build_multihead(base, PartitionConfig(frac, 0.4), seed=0, heads=heads_for_mode(mode))


def test_epochs_zero_leaves_parameters(setup):
    _, da, base, teachers = setup
    model = _model(base)
    before = {s: section_bytes(model, s) for s in model.section_modules()}
    model, records = distill(model, teachers, da, DistillConfig(epochs=0))
    assert records == []
    assert before == {s: section_bytes(model, s) for s in model.section_modules()}


def test_distill_is_deterministic_and_keeps_backbone(setup):
    _, da, base, teachers = setup
    cfg = DistillConfig(epochs=2, batch_size=16, seed=3)
    a = _model(base)
    bb = section_bytes(a, "backbone")
    a, rec_a = distill(a, teachers, da, cfg)
    b, rec_b = distill(_model(base), teachers, da, cfg)
    for s in a.section_modules():
        assert section_bytes(a, s) == section_bytes(b, s)
    assert rec_a == rec_b
    assert section_bytes(a, "backbone") == bb
    assert section_bytes(a, "head_u") != section_bytes(_model(base), "head_u")


def test_records_and_log(setup, tmp_path):
    _, da, base, teachers = setup
    log = tmp_path / "log.jsonl"
    _, records = distill(_model(base), teachers, da, DistillConfig(epochs=2, batch_size=16), log_path=log)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert lines == records and len(records) == 2
    assert {"epoch", "step", "lr", "mode", "lc_clean", "ld_clean", "lc_aug", "ld_aug"} <= set(records[0])
    # a = 0.5 of 120 examples at batch 16 -> 4 steps per epoch
    assert records[-1]["step"] == 8


def test_teacher_untouched_after_distill(setup):
    ds, da, base, teachers = setup
    x = torch.as_tensor(ds.images[:5])
    ref = teachers["clean"](x)
    distill(_model(base), teachers, da, DistillConfig(epochs=1, batch_size=16))
    assert torch.equal(teachers["clean"](x), ref)
    with torch.no_grad():
        assert torch.equal(base(x), ref)


def test_clean_only_data_is_plain_finetuning(setup):
    ds, da, base, teachers = setup
    clean_only = da.subset(np.flatnonzero(da.betas == 1))
    model = _model(base)
    _, records = distill(model, teachers, clean_only, DistillConfig(epochs=1, batch_size=16))
    assert records[0]["lc_aug"] == 0 and records[0]["ld_aug"] == 0
    assert section_bytes(model, "head_u") == section_bytes(_model(base), "head_u")


@pytest.mark.parametrize("mode", ["apt", "only_kd", "combined_head", "single_teacher", "no_kd"])
def test_baseline_modes_run(setup, mode):
    _, da, base, teachers = setup
    model, records = distill(_model(base, mode), teachers, da, DistillConfig(epochs=1, batch_size=32, mode=mode))
    assert len(records) == 1 and all(math.isfinite(v) for k, v in records[0].items() if k.startswith(("lc", "ld")))
    if mode in ("apt", "no_kd"):
        assert records[0]["ld_clean"] == 0 and records[0]["ld_aug"] == 0


def test_mode_head_mismatch(setup):
    _, da, base, teachers = setup
    with pytest.raises(ValidationError):
        distill(_model(base, "apt"), teachers, da, DistillConfig(mode="ours", epochs=1))


def test_teacher_must_be_handle(setup):
    _, da, base, teachers = setup
    with pytest.raises(ContractViolationError):
        distill(_model(base), {"clean": teachers["clean"], "robust": base}, da, DistillConfig(epochs=1))


def test_class_set_mismatch(setup):
    _, da, base, teachers = setup
    other = TeacherHandle("robust_small", LayeredNet(tiny_conv_arch(4)))
    with pytest.raises(ValidationError):
        distill(_model(base), {"clean": teachers["clean"], "robust": other}, da, DistillConfig(epochs=1))
    with pytest.raises(ValidationError):
        robustify_teacher(LayeredNet(tiny_conv_arch(4)), da, 1, 0)


def test_nan_aborts_with_snapshot(setup):
    _, da, base, teachers = setup
    model = _model(base)
    with torch.no_grad():
        next(iter(model.shared.parameters())).fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        distill(model, teachers, da, DistillConfig(epochs=1, batch_size=16))
    assert info.value.snapshot["step"] == 0 and "param_norms" in info.value.snapshot


def test_checkpoint_every(setup, tmp_path):
    _, da, base, teachers = setup
    distill(_model(base), teachers, da, DistillConfig(epochs=2, batch_size=32, checkpoint_every=1), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch0001.ckpt", "epoch0002.ckpt"]


def test_robustify_teacher_warning_and_copy(setup):
    ds, da, base, _ = setup
    before = section_bytes_of(base)
    with pytest.warns(RuntimeWarning):
        handle, info = robustify_teacher(base, da, epochs=0, seed=0, eval_split=(ds.images, ds.labels))
    assert info["status"] == "warning"
    assert isinstance(handle, TeacherHandle) and handle.kind == "robust_small"
    assert section_bytes_of(base) == before


def test_robustify_teacher_deterministic(setup):
    _, da, base, _ = setup
    a, _ = robustify_teacher(base, da, 1, seed=4)
    b, _ = robustify_teacher(base, da, 1, seed=4)
    assert section_bytes_of(a.model) == section_bytes_of(b.model)


def section_bytes_of(net):
    return b"".join(t.numpy().tobytes() for t in net.state_dict().values())
