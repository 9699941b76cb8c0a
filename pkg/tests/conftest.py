import numpy as np
import pytest
import torch

from robust_heads.model import LayeredNet, PartitionConfig, build_multihead, clone_frozen_teacher, mlp_arch, TeacherHandle


def tiny_conv_arch(num_classes=4):
    return [
        {"type": "conv", "cin": 1, "cout": 4, "stride": 2},
        {"type": "conv", "cin": 4, "cout": 6, "stride": 2, "pool": True},
        {"type": "res", "dim": 6},
        {"type": "res", "dim": 6},
        {"type": "res", "dim": 6},
        {"type": "linear", "din": 6, "dout": num_classes},
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def images(rng):
    return rng.random((6, 1, 8, 8)).astype(np.float32)


def make_mlp(seed=0, din=6, width=5, depth=6, classes=4, dtype=torch.float64):
    return LayeredNet(mlp_arch(din, width, depth, classes), seed=seed, dtype=dtype)


def make_three_head(seed=0, fraction=0.5, head_fraction=0.4, dropout=0.25, dtype=torch.float64, perturb=True):
    """Three-head MLP whose heads differ, plus clean and robust teachers."""
    base = make_mlp(seed, dtype=dtype)
    model = build_multihead(base, PartitionConfig(fraction, head_fraction, dropout), seed)
    if perturb:
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for p in model.tunable_parameters():
                p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    robust = TeacherHandle("robust_small", make_mlp(seed + 1, dtype=dtype))
    return model, {"clean": clone_frozen_teacher(base), "robust": robust}, base


def central_difference_check(loss_fn, params, h=1e-6, tol=1e-4):
    """Compare autograd gradients with central differences on every coordinate."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - h
            with torch.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * h)
        denom = max(numeric.abs().max().item(), analytic.abs().max().item(), 1e-8)
        worst = max(worst, (numeric - analytic).abs().max().item() / denom)
    assert worst <= tol, worst
    return worst


def oracle_example(model, teachers, cfg, x, y, beta):
    """Per-example loss from numpy softmax algebra on the head logits."""
    h = model.features(x[None])
    teacher = teachers["clean" if beta == 1 else "robust"](x[None])[0].numpy()
    heads = ("clean", "combined") if beta == 1 else ("unclean", "combined")
    T = cfg.temperature
    total = 0.0
    for head in heads:
        z = model.tail(h, head)[0].detach().numpy()
        ce = np.log(np.sum(np.exp(z - z.max()))) + z.max() - z[y]
        pt = np.exp(teacher / T - teacher.max() / T)
        pt /= pt.sum()
        ls = z / T - (np.log(np.sum(np.exp(z / T - z.max() / T))) + z.max() / T)
        kd = T * T * np.sum(pt * (np.log(pt) - ls))
        total += cfg.lambda_c * ce + cfg.lambda_d * kd
    return total


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
