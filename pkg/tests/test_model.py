import numpy as np
import pytest
import torch

from robust_heads.errors import ConfigurationError, ImmutabilityError, ValidationError
from robust_heads.model import (
    HEADS,
    LayeredNet,
    PartitionConfig,
    build_multihead,
    clone_frozen_teacher,
    compute_split,
    count_parameters,
    forward_head,
    load_checkpoint,
    mlp_arch,
    read_checkpoint_metadata,
    save_checkpoint,
    section_bytes,
    student_arch,
    teacher_arch,
)

from conftest import make_mlp, tiny_conv_arch


def test_desk_architectures_sizes():
    assert 90_000 <= count_parameters(LayeredNet(student_arch())) <= 120_000
    assert 20_000 <= count_parameters(LayeredNet(teacher_arch())) <= 35_000


def test_split_rule_example():
    s = compute_split(10, PartitionConfig(0.20, 0.5))
    assert (s.n_backbone, s.n_shared, s.n_head) == (8, 1, 1)


@pytest.mark.parametrize(
    "depth,frac,head,expected",
    [
        (20, 0.10, 0.2, (18, 1, 1)),
        (20, 0.05, 0.2, (19, 0, 1)),
        (20, 0.20, 0.2, (16, 3, 1)),
        (10, 0.25, 0.2, (8, 1, 1)),  # 2.5 layers: tie goes to fewer
        (20, 1.00, 0.2, (0, 16, 4)),
    ],
)
def test_split_table(depth, frac, head, expected):
    s = compute_split(depth, PartitionConfig(frac, head))
    assert (s.n_backbone, s.n_shared, s.n_head) == expected
    assert s.n_backbone + s.n_shared + s.n_head == depth


def test_split_fraction_zero_is_frozen():
    s = compute_split(20, PartitionConfig(0.0))
    assert s.frozen and s.n_tuned == 0


def test_split_rounding_to_zero_rejected():
    with pytest.raises(ConfigurationError):
        compute_split(10, PartitionConfig(0.04, 0.2))


def test_partition_config_validation():
    with pytest.raises(ValidationError):
        PartitionConfig(1.5)
    with pytest.raises(ValidationError):
        PartitionConfig(0.1, 0.0)
    with pytest.raises(ValidationError):
        PartitionConfig(0.1, 0.2, 1.0)


@pytest.fixture
def conv_pair():
    base = LayeredNet(tiny_conv_arch(), seed=2)
    model = build_multihead(base, PartitionConfig(0.5, 0.4, 0.3), seed=0)
    return base, model


def test_fresh_heads_equal_base(conv_pair, images):
    base, model = conv_pair
    x = torch.as_tensor(images)
    with torch.no_grad():
        ref = base(x)
    for head in HEADS:
        assert torch.equal(forward_head(model, x, head), ref)


def test_build_is_deterministic(conv_pair):
    base, model = conv_pair
    again = build_multihead(base, PartitionConfig(0.5, 0.4, 0.3), seed=0)
    for section in model.section_modules():
        assert section_bytes(model, section) == section_bytes(again, section)


def test_stochastic_forward_is_seeded(conv_pair, images):
    _, model = conv_pair
    x = torch.as_tensor(images)
    a = forward_head(model, x, "unclean", dropout_seed=3)
    b = forward_head(model, x, "unclean", dropout_seed=3)
    c = forward_head(model, x, "unclean", dropout_seed=4)
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_zero_dropout_stochastic_equals_off(images):
    base = LayeredNet(tiny_conv_arch(), seed=2)
    model = build_multihead(base, PartitionConfig(0.5, 0.4, 0.0))
    x = torch.as_tensor(images)
    assert torch.equal(forward_head(model, x, "clean", dropout_seed=9), forward_head(model, x, "clean"))


def test_forward_head_validates(conv_pair):
    _, model = conv_pair
    with pytest.raises(ValidationError):
        forward_head(model, torch.zeros(2, 3, 8, 8), "clean")
    with pytest.raises(ValidationError):
        forward_head(model, torch.zeros(2, 1, 8, 8), "middle")


def test_backbone_frozen_and_optimizable_set(conv_pair):
    _, model = conv_pair
    assert all(not p.requires_grad for p in model.backbone.parameters())
    tunable = {id(p) for p in model.tunable_parameters()}
    assert tunable.isdisjoint(id(p) for p in model.backbone.parameters())
    assert len(tunable) == sum(1 for _ in model.shared.parameters()) + sum(
        1 for h in HEADS for _ in model.heads[h].parameters()
    )


def test_mc_probs_shapes_and_repeatability(conv_pair, images):
    _, model = conv_pair
    h = model.features(torch.as_tensor(images))
    probs = model.mc_probs(h, HEADS, 5, seed=1)
    for head, p in probs.items():
        assert p.shape == (5, len(images), 4)
        torch.testing.assert_close(p.sum(-1), torch.ones(5, len(images)))
    again = model.mc_probs(h, HEADS, 5, seed=1)
    assert all(torch.equal(probs[k], again[k]) for k in HEADS)


def test_frozen_model_has_no_tunable_parameters():
    base = LayeredNet(tiny_conv_arch(), seed=2)
    model = build_multihead(base, PartitionConfig(0.0))
    assert model.frozen_model and model.tunable_parameters() == []


# --- teachers -------------------------------------------------------------


def test_teacher_is_read_only(images):
    base = LayeredNet(tiny_conv_arch(), seed=1)
    teacher = clone_frozen_teacher(base)
    x = torch.as_tensor(images)
    with torch.no_grad():
        assert torch.equal(teacher(x), base(x))
    with pytest.raises(ImmutabilityError):
        teacher.kind = "robust_small"
    with pytest.raises(ImmutabilityError):
        teacher.load_state_dict(base.state_dict())
    with torch.no_grad():
        next(teacher.model.parameters()).add_(1.0)
    with pytest.raises(ImmutabilityError):
        teacher.logits(x)


def test_teacher_is_a_copy(images):
    base = LayeredNet(tiny_conv_arch(), seed=1)
    teacher = clone_frozen_teacher(base)
    x = torch.as_tensor(images)
    ref = teacher(x)
    with torch.no_grad():
        for p in base.parameters():
            p.mul_(0.0)
    assert torch.equal(teacher(x), ref)


# --- checkpoints ----------------------------------------------------------


def test_checkpoint_roundtrip_and_determinism(conv_pair, tmp_path, images):
    _, model = conv_pair
    h1 = save_checkpoint(model, tmp_path / "a.ckpt", "cfg123")
    h2 = save_checkpoint(model, tmp_path / "b.ckpt", "cfg123")
    assert h1 == h2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt", expected_config_hash="cfg123")
    assert meta["config_hash"] == "cfg123" == read_checkpoint_metadata(tmp_path / "a.ckpt")["config_hash"]
    x = torch.as_tensor(images)
    for head in HEADS:
        assert torch.equal(forward_head(loaded, x, head), forward_head(model, x, head))
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "a.ckpt", expected_config_hash="other")


def test_layered_checkpoint_roundtrip(tmp_path):
    net = make_mlp(3)
    save_checkpoint(net, tmp_path / "n.ckpt")
    loaded, meta = load_checkpoint(tmp_path / "n.ckpt")
    assert meta["kind"] == "layered"
    x = torch.randn(3, 6, dtype=torch.float64)
    assert torch.equal(loaded(x), net(x))
    assert loaded.arch == mlp_arch(6, 5, 6, 4)
