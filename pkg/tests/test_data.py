import numpy as np
import pytest

from robust_heads.data import (
    AugmentationPolicy,
    AugmentedExample,
    ImageDataset,
    build_augmented_dataset,
    corrupt_dataset,
    load_dataset,
    make_shapes,
    read_manifest,
    split_dataset,
)
from robust_heads.errors import ValidationError


@pytest.fixture(scope="module")
def shapes():
    return make_shapes(100, seed=0)


def test_shapes_balanced_and_in_range(shapes):
    assert shapes.images.shape == (100, 1, 16, 16)
    assert np.bincount(shapes.labels).tolist() == [10] * 10
    assert shapes.images.min() >= 0 and shapes.images.max() <= 1


def test_shapes_deterministic():
    a, b = make_shapes(30, 4), make_shapes(30, 4)
    assert a.images.tobytes() == b.images.tobytes()


def test_digits_loads():
    ds = load_dataset("digits", 50, 0)
    assert len(ds) == 50 and ds.images.shape[1:] == (1, 16, 16)


def test_split_disjoint():
    ds = ImageDataset(np.arange(20, dtype=np.float32)[:, None, None, None] / 20, np.arange(20) % 2, 2)
    a, b = split_dataset(ds, [12, 8], 0)
    assert set(a.images.ravel()).isdisjoint(b.images.ravel())
    with pytest.raises(ValidationError):
        split_dataset(ds, [15, 8], 0)


@pytest.mark.parametrize("ratio,total", [(1.0, 200), (0.5, 150)])
def test_augmented_counts(shapes, ratio, total):
    da = build_augmented_dataset(shapes, AugmentationPolicy(), ratio, seed=1)
    assert len(da) == total
    assert int(da.betas.sum()) == 100
    assert np.array_equal(da.inputs[:100], shapes.images)
    assert all(p is None for p, b in zip(da.provenance, da.betas) if b == 1)
    assert all(p is not None for p, b in zip(da.provenance, da.betas) if b == 0)


def test_augmented_class_balance_tracks_clean(shapes):
    da = build_augmented_dataset(shapes, AugmentationPolicy(), 0.5, seed=1)
    aug = da.labels[da.betas == 0]
    assert np.bincount(aug, minlength=10).tolist() == [5] * 10


def test_augmented_deterministic_and_threaded(shapes):
    a = build_augmented_dataset(shapes, AugmentationPolicy(), 1.0, seed=2)
    b = build_augmented_dataset(shapes, AugmentationPolicy(), 1.0, seed=2, workers=4)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.provenance == b.provenance


def test_chain_probability_respected(shapes):
    da = build_augmented_dataset(shapes, AugmentationPolicy(chain_prob=1.0), 1.0, seed=2)
    assert all("chain" in p for p in da.provenance[100:])
    da = build_augmented_dataset(shapes, AugmentationPolicy(chain_prob=0.0), 1.0, seed=2)
    assert all("corruption" in p for p in da.provenance[100:])


def test_take_fraction_half(shapes):
    da = build_augmented_dataset(shapes, AugmentationPolicy(), 1.0, seed=3)
    half = da.take_fraction(0.5, seed=0)
    assert len(half) == 100
    again = da.take_fraction(0.5, seed=0)
    assert half.inputs.tobytes() == again.inputs.tobytes()
    assert da.take_fraction(1.0, 0) is da
    with pytest.raises(ValidationError):
        da.take_fraction(0.0, 0)


def test_manifest_roundtrip(shapes, tmp_path):
    da = build_augmented_dataset(shapes.subset(range(10)), AugmentationPolicy(), 1.0, seed=3)
    da.write_manifest(tmp_path / "m.jsonl")
    recs = read_manifest(tmp_path / "m.jsonl")
    assert [r["beta"] for r in recs] == da.betas.tolist()
    assert recs[15]["provenance"] == da.provenance[15]


def test_example_gate_invariant():
    with pytest.raises(ValidationError):
        AugmentedExample(np.zeros((1, 2, 2)), 0, 1, {"corruption": {}})
    with pytest.raises(ValidationError):
        AugmentedExample(np.zeros((1, 2, 2)), 0, 2)


def test_corrupt_dataset_identity(shapes):
    out = corrupt_dataset(shapes.subset(range(5)), "identity", 3, 0)
    np.testing.assert_array_equal(out.images, shapes.images[:5])
