import math

import numpy as np
import pytest

from semflow.data import (
    IGNORE,
    SegSample,
    augment,
    frequency_bounds,
    gen_synthetic,
    load_dataset,
    resize_image,
    save_dataset,
    stack,
)
from semflow.errors import ConfigError, DataError


def test_same_seed_bitwise_identical():
    a, b = gen_synthetic(3, 6, 32, 4), gen_synthetic(3, 6, 32, 4)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()
    c = gen_synthetic(4, 6, 32, 4)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_two_classes_single_rectangle():
    for s in gen_synthetic(0, 10, 32, 2, shapes_per_image=(1, 1), kinds=("rect",)):
        values = np.unique(s.labels)
        assert values.tolist() == [0, 1]
        ys, xs = np.nonzero(s.labels)
        # the painted region is exactly its bounding box
        assert len(ys) == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)


def test_frequencies_within_declared_bounds():
    count, size, k = 100, 64, 6
    samples = gen_synthetic(7, count, size, k)
    labels = np.stack([s.labels for s in samples])
    freq = np.bincount(labels.ravel(), minlength=k) / labels.size
    bounds = frequency_bounds(count, size, k)
    assert np.all(freq >= bounds[:, 0]) and np.all(freq <= bounds[:, 1])
    for s in samples:
        assert s.image.dtype == np.float32 and s.image.min() >= 0 and s.image.max() <= 1
        assert s.labels.max() < k


@pytest.mark.parametrize("count,k", [(100, 6), (512, 6), (128, 6), (60, 4), (20, 2)])
def test_every_class_appears_often_enough(count, k):
    labels = [s.labels for s in gen_synthetic(11, count, 32, k)]
    for c in range(k):
        assert sum(bool((l == c).any()) for l in labels) >= math.ceil(count / k)


def test_size_fraction_of_shapes():
    for s in gen_synthetic(5, 20, 64, 2, shapes_per_image=(1, 1), kinds=("rect",)):
        ys, xs = np.nonzero(s.labels)
        for extent in (ys.max() - ys.min() + 1, xs.max() - xs.min() + 1):
            assert 7 <= extent <= 25


def test_generator_preconditions():
    for args in ((0, 1, 32, 1), (0, 1, 48, 3), (0, 1, 16, 3)):
        with pytest.raises(ConfigError):
            gen_synthetic(*args)


def test_sample_validation():
    with pytest.raises(DataError):
        SegSample(np.zeros((1, 4, 4), np.float32), np.zeros((4, 4), np.uint8))
    with pytest.raises(DataError):
        SegSample(np.zeros((3, 4, 4), np.float32), np.zeros((4, 5), np.uint8))


def test_disk_round_trip(tmp_path):
    samples = gen_synthetic(2, 3, 32, 5)
    save_dataset(samples, tmp_path, seed=2, num_classes=5)
    assert (tmp_path / "meta.txt").read_text() == "num_classes=5\ncount=3\nsize=32\nseed=2\n"
    assert (tmp_path / "images" / "00000.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")
    assert (tmp_path / "labels" / "00002.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    loaded, meta = load_dataset(tmp_path)
    assert meta == {"num_classes": 5, "count": 3, "size": 32, "seed": 2}
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.labels, b.labels)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_load_rejects_out_of_range_labels(tmp_path):
    samples = gen_synthetic(2, 1, 32, 5)
    save_dataset(samples, tmp_path, seed=2, num_classes=3)
    if samples[0].labels.max() >= 3:
        with pytest.raises(DataError):
            load_dataset(tmp_path)


def test_augment_shapes_and_determinism():
    s = gen_synthetic(0, 1, 32, 6)[0]
    a = augment(s, np.random.default_rng(5))
    b = augment(s, np.random.default_rng(5))
    assert a.image.shape == (3, 32, 32) and a.labels.shape == (32, 32)
    assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    seen = set()
    for seed in range(30):
        out = augment(s, np.random.default_rng(seed))
        assert set(np.unique(out.labels)) <= set(np.unique(s.labels)) | {IGNORE}
        seen.add(bool((out.labels == IGNORE).any()))
    assert seen == {True, False}  # shrinking pads with ignore, enlarging crops


def test_augment_identity_scale_flip():
    s = gen_synthetic(1, 1, 32, 6)[0]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        flip = np.random.default_rng(seed).random() < 0.5
        out = augment(s, rng, scale_range=(1.0, 1.0))
        ref = s.labels[:, ::-1] if flip else s.labels
        assert np.array_equal(out.labels, ref)


def test_resize_image_identity_and_stack():
    img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    assert np.array_equal(resize_image(img, 8), img)
    images, labels = stack(gen_synthetic(0, 2, 32, 3))
    assert images.shape == (2, 3, 32, 32) and labels.dtype == np.int64
