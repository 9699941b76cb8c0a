import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from robust_heads.data import AugmentedExample
from robust_heads.errors import ContractViolationError, ValidationError
from robust_heads.losses import (
    MODE_SPECS,
    DistillConfig,
    classification_loss,
    distillation_loss,
    gated_terms,
    loss_aug,
    loss_clean,
    loss_total,
)
from robust_heads.model import TeacherHandle, _generator

from conftest import central_difference_check, make_mlp, make_three_head, oracle_example

CFG = DistillConfig(temperature=2.0, lambda_c=1.0, lambda_d=0.7)


# --- closed forms ----------------------------------------------------------


def test_ce_uniform_is_log_c():
    for c in (2, 5, 10):
        assert classification_loss(torch.zeros(c, dtype=torch.float64), 1).item() == pytest.approx(math.log(c), rel=1e-12)


def test_ce_closed_form():
    expected = -math.log(math.exp(2) / (math.exp(2) + 2))
    got = classification_loss(torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64), 0).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_ce_vanishes_with_margin():
    vals = [classification_loss(torch.tensor([m, 0.0, 0.0], dtype=torch.float64), 0).item() for m in (5, 20, 60)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-25


def test_kd_two_class_closed_form():
    # KL(sigma(d) || sigma(-d)) = d * tanh(d / 2); here d = 2, T = 1
    got = distillation_loss(torch.tensor([0.0, 2.0]), torch.tensor([2.0, 0.0]), 1.0).item()
    assert got == pytest.approx(2 * math.tanh(1.0), rel=1e-6)


def test_kd_temperature_scaling():
    s, t = torch.tensor([0.0, 2.0], dtype=torch.float64), torch.tensor([2.0, 0.0], dtype=torch.float64)
    # at T the logits are divided by T and the KL is multiplied by T^2
    assert distillation_loss(s, t, 2.0).item() == pytest.approx(4 * math.tanh(0.5), rel=1e-12)


def test_kd_zero_for_equal_and_shifted():
    x = torch.randn(4, 5, dtype=torch.float64)
    assert distillation_loss(x, x, 2.0).item() == 0.0
    assert abs(distillation_loss(x, x + 3.7, 2.0).item()) < 1e-12


def test_kd_validates():
    with pytest.raises(ValidationError):
        distillation_loss(torch.zeros(3), torch.zeros(4), 1.0)
    with pytest.raises(ValidationError):
        distillation_loss(torch.zeros(3), torch.zeros(3), 0.0)
    with pytest.raises(ValidationError):
        DistillConfig(temperature=-1)
    with pytest.raises(ValidationError):
        DistillConfig(lambda_c=0, lambda_d=0)
    with pytest.raises(ValidationError):
        DistillConfig(mode="lora")


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(0.5, 5.0), st.integers(0, 100))
@settings(max_examples=60, deadline=None)
def test_kd_nonnegative(values, temperature, seed):
    s = torch.tensor(values, dtype=torch.float64)
    t = s + torch.randn(len(values), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert distillation_loss(s, t, temperature).item() >= -1e-12


# --- finite differences ----------------------------------------------------


def _batch(n=6, seed=0, classes=4):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 6, generator=g, dtype=torch.float64), torch.randint(0, classes, (n,), generator=g)


def test_fd_classification_loss():
    x, y = _batch()
    logits = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    central_difference_check(lambda: classification_loss(logits * x[:, :4], y), [logits])


def test_fd_distillation_loss():
    s = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
    t = torch.randn(6, 5, dtype=torch.float64)
    central_difference_check(lambda: distillation_loss(s, t, 2.5), [s])


@pytest.mark.parametrize("dropout_seed", [None, 5])
def test_fd_loss_clean(dropout_seed):
    model, teachers, _ = make_three_head(seed=1)
    x, y = _batch(seed=2)

    def fn():
        g = None if dropout_seed is None else _generator(dropout_seed)
        return loss_clean(x, y, model, teachers["clean"], CFG, generator=g)

    central_difference_check(fn, model.tunable_parameters())


@pytest.mark.parametrize("dropout_seed", [None, 5])
def test_fd_loss_aug(dropout_seed):
    model, teachers, _ = make_three_head(seed=3)
    x, y = _batch(seed=4)

    def fn():
        g = None if dropout_seed is None else _generator(dropout_seed)
        return loss_aug(x, y, model, teachers["robust"], CFG, generator=g)

    central_difference_check(fn, model.tunable_parameters())


def test_fd_loss_total():
    model, teachers, _ = make_three_head(seed=5)
    x, y = _batch(n=8, seed=6)
    batch = [AugmentedExample(x[i].numpy(), int(y[i]), i % 2) for i in range(8)]
    central_difference_check(lambda: loss_total(batch, model, teachers, CFG, _generator(1)), model.tunable_parameters())


# --- gradient routing ------------------------------------------------------


def _grads(loss, model):
    for p in model.parameters():
        p.grad = None
    loss.backward()
    return {name: [p.grad for p in mod.parameters()] for name, mod in model.section_modules().items()}


def _is_zero(grads):
    return all(g is None or bool(torch.all(g == 0)) for g in grads)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_routing(seed):
    model, teachers, _ = make_three_head(seed=seed)
    x, y = _batch(n=7, seed=seed)
    g = _grads(loss_clean(x, y, model, teachers["clean"], CFG, generator=_generator(seed)), model)
    assert _is_zero(g["head_u"]) and _is_zero(g["backbone"])
    assert not _is_zero(g["head_c"]) and not _is_zero(g["head_m"])
    g = _grads(loss_aug(x, y, model, teachers["robust"], CFG, generator=_generator(seed)), model)
    assert _is_zero(g["head_c"]) and _is_zero(g["backbone"])
    assert not _is_zero(g["head_u"]) and not _is_zero(g["head_m"])
    model.check_backbone_untouched()


def test_beta_contracts():
    model, teachers, _ = make_three_head()
    x, y = _batch(n=3)
    with pytest.raises(ContractViolationError):
        loss_clean(x, y, model, teachers["clean"], CFG, beta=[1, 0, 1])
    with pytest.raises(ContractViolationError):
        loss_aug(x, y, model, teachers["robust"], CFG, beta=[0, 1, 0])


# --- degenerate weights ------------------------------------------------------


def test_lambda_d_zero_is_two_head_ce():
    model, teachers, _ = make_three_head(seed=2)
    x, y = _batch(seed=8)
    cfg = DistillConfig(lambda_c=1.0, lambda_d=0.0)
    h = model.features(x)
    expected = (classification_loss(model.tail(h, "clean"), y, "none") + classification_loss(model.tail(h, "combined"), y, "none")).mean()
    assert loss_clean(x, y, model, teachers["clean"], cfg).item() == pytest.approx(expected.item(), rel=1e-12)
    expected = (classification_loss(model.tail(h, "unclean"), y, "none") + classification_loss(model.tail(h, "combined"), y, "none")).mean()
    assert loss_aug(x, y, model, teachers["robust"], cfg).item() == pytest.approx(expected.item(), rel=1e-12)


def test_fresh_model_kd_zero_against_clean_teacher():
    model, teachers, _ = make_three_head(seed=2, perturb=False)
    x, y = _batch(seed=8)
    cfg = DistillConfig(lambda_c=0.0, lambda_d=1.0)
    assert abs(loss_clean(x, y, model, teachers["clean"], cfg).item()) < 1e-12


def test_kd_zero_when_unclean_head_copies_robust_teacher():
    model, _, base = make_three_head(seed=2, perturb=False)
    teacher_net = copy.deepcopy(base)
    nb = model.split.n_backbone
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for layer in list(teacher_net.layers)[nb:]:
            for p in layer.parameters():
                p.add_(0.5 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    tail = list(teacher_net.layers)[nb:]
    ns = model.split.n_shared
    for src, dst in zip(tail[:ns], model.shared):
        dst.load_state_dict(src.state_dict())
    for head in ("unclean", "combined"):
        for src, dst in zip(tail[ns:], model.heads[head]):
            dst.load_state_dict(src.state_dict())
    x, y = _batch(seed=9)
    cfg = DistillConfig(lambda_c=0.0, lambda_d=1.0)
    assert abs(loss_aug(x, y, model, TeacherHandle("robust_small", teacher_net), cfg).item()) < 1e-12


# --- gate exactness --------------------------------------------------------


def test_gate_matches_brute_force_over_random_batches():
    model, teachers, _ = make_three_head(seed=11)
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        x = torch.as_tensor(rng.normal(size=(n, 6)))
        y = rng.integers(0, 4, n)
        beta = rng.integers(0, 2, n)
        batch = [AugmentedExample(x[i].numpy(), int(y[i]), int(beta[i])) for i in range(n)]
        got = loss_total(batch, model, teachers, CFG).item()
        want = np.mean([oracle_example(model, teachers, CFG, x[i], int(y[i]), int(beta[i])) for i in range(n)])
        assert got == pytest.approx(want, rel=1e-6), trial


def test_gate_degenerate_batches():
    model, teachers, _ = make_three_head(seed=12)
    x, y = _batch(n=5, seed=1)
    clean = [AugmentedExample(x[i].numpy(), int(y[i]), 1) for i in range(5)]
    aug = [AugmentedExample(x[i].numpy(), int(y[i]), 0) for i in range(5)]
    assert loss_total(clean, model, teachers, CFG).item() == pytest.approx(loss_clean(x, y, model, teachers["clean"], CFG).item(), rel=1e-12)
    assert loss_total(aug, model, teachers, CFG).item() == pytest.approx(loss_aug(x, y, model, teachers["robust"], CFG).item(), rel=1e-12)
    with pytest.raises(ValidationError):
        loss_total([], model, teachers, CFG)


@pytest.mark.parametrize("mode", sorted(MODE_SPECS))
def test_modes_route_to_declared_heads(mode):
    from robust_heads.model import PartitionConfig, build_multihead

    base = make_mlp(0)
    spec = MODE_SPECS[mode]
    model = build_multihead(base, PartitionConfig(0.5, 0.4), heads=spec.heads)
    x, y = _batch(n=6)
    beta = torch.tensor([1, 0, 1, 0, 1, 0])
    t = {"clean": torch.randn(6, 4, dtype=torch.float64), "robust": torch.randn(6, 4, dtype=torch.float64)}
    cfg = DistillConfig(mode=mode)
    total, parts = gated_terms(model, model.features(x), y, beta, t, cfg)
    total.mean().backward()
    if not spec.use_kd:
        assert torch.all(parts["ld_clean"] == 0) and torch.all(parts["ld_aug"] == 0)
    assert set(model.head_names) == set(spec.heads)
    for head in spec.heads:
        assert any(p.grad is not None for p in model.heads[head].parameters())
