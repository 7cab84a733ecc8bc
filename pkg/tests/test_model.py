"""Model construction, training behavior, prediction, checkpoint IO."""

import numpy as np
import pytest

from trojanscan.data import LabeledImageSet, synthetic_dataset
from trojanscan.errors import ConfigError, FormatError, ShapeError
from trojanscan.model import (
    ArchitectureConfig,
    TrainConfig,
    accuracy,
    build_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)


def _default_arch(classes=10, hw=(32, 32)):
    return ArchitectureConfig(input_hw=hw, classes=classes)


def test_parameter_count_matches_hand_arithmetic():
    # same-padded maps: 32 -> pool 16 -> pool 8, so the flatten dim is 8*8*64
    # conv(3->32, 3x3) + conv(32->64, 3x3) + dense(4096->256) + dense(256->10)
    model = build_model(_default_arch(), seed=0)
    count = sum(v.size for v in model.params.values())
    expected = (32 * 3 * 3 * 3 + 32) + (64 * 32 * 3 * 3 + 64) + (4096 * 256 + 256) + (256 * 10 + 10)
    assert count == expected
    # valid-padded variant: 32 -> 30 -> 15 -> 13 -> 6, flatten 6*6*64
    valid = build_model(ArchitectureConfig(padding="valid"), seed=0)
    count = sum(v.size for v in valid.params.values())
    expected = (32 * 3 * 3 * 3 + 32) + (64 * 32 * 3 * 3 + 64) + (2304 * 256 + 256) + (256 * 10 + 10)
    assert count == expected


def test_same_seed_identical_parameters():
    a = build_model(_default_arch(), seed=42)
    b = build_model(_default_arch(), seed=42)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_single_class_rejected():
    with pytest.raises(ConfigError):
        ArchitectureConfig(classes=1)


def _toy_set(n, seed, hw=16, separable=True):
    # two classes separated by overall brightness
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    base = np.where(labels[:, None, None, None] == 0, 0.15, 0.75)
    images = np.clip(base + rng.normal(0, 0.05, size=(n, hw, hw, 3)), 0, 1).astype(np.float32)
    return LabeledImageSet(images, labels, 2)


def test_training_reaches_high_accuracy_on_separable_toy():
    arch = ArchitectureConfig(input_hw=(16, 16), conv_channels=(8, 16), dense_widths=(32,), classes=2)
    model = build_model(arch, seed=1)
    ds = _toy_set(200, seed=2)
    val = _toy_set(64, seed=3)
    trained, trace = train(model, ds, val, TrainConfig(lr=1e-3, batch=32, epochs=20, seed=4))
    assert trace[-1]["train_acc"] >= 0.99
    assert trace[-1]["train_loss"] < trace[0]["train_loss"]


def test_zero_epochs_returns_initial_checkpoint():
    arch = ArchitectureConfig(input_hw=(16, 16), conv_channels=(8, 16), dense_widths=(32,), classes=10)
    model = build_model(arch, seed=1)
    ds = synthetic_dataset(400, classes=10, seed=6, hw=16)
    trained, trace = train(model, ds, ds, TrainConfig(epochs=0, seed=7))
    assert trace == []
    for k in model.params:
        assert np.array_equal(trained.params[k], model.params[k])
    assert abs(accuracy(trained, ds) - 0.1) < 0.05  # chance on balanced data


def test_untrained_model_near_chance_on_balanced_data():
    ds = synthetic_dataset(400, classes=10, seed=8)
    model = build_model(_default_arch(), seed=9)
    acc = accuracy(model, ds)
    assert abs(acc - 0.1) < 0.05


def test_predict_rows_are_probabilities():
    ds = synthetic_dataset(40, classes=10, seed=10)
    model = build_model(_default_arch(), seed=11)
    probs = predict(model, ds.images)
    assert probs.shape == (40, 10)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_predict_batch_independence():
    ds = synthetic_dataset(30, classes=10, seed=12)
    model = build_model(_default_arch(), seed=13)
    full = predict(model, ds.images)
    one = predict(model, ds.images[7:8])
    assert np.allclose(full[7], one[0], atol=1e-6)
    # also across an internal batch boundary
    chunked = predict(model, ds.images, batch=8)
    assert np.allclose(full, chunked, atol=1e-6)


def test_predict_is_pure():
    ds = synthetic_dataset(16, classes=10, seed=14)
    model = build_model(_default_arch(), seed=15)
    a = predict(model, ds.images)
    b = predict(model, ds.images)
    assert np.array_equal(a, b)


def test_predict_shape_mismatch():
    model = build_model(_default_arch(), seed=16)
    with pytest.raises(ShapeError):
        predict(model, np.zeros((2, 16, 16, 3), dtype=np.float32))


def test_label_out_of_range_rejected():
    images = np.zeros((4, 32, 32, 3), dtype=np.float32)
    with pytest.raises(FormatError):
        LabeledImageSet(images, np.array([0, 1, 2, 10]), 10)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(_default_arch(), seed=17)
    model.meta["is_trojan"] = True
    path = tmp_path / "m.stsm"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == model.arch
    assert loaded.meta == model.meta
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
        assert loaded.params[k].dtype == model.params[k].dtype
    # a second save produces identical bytes
    path2 = tmp_path / "m2.stsm"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.stsm"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = build_model(_default_arch(), seed=18)
    path = tmp_path / "m.stsm"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
