import struct

import numpy as np
import pytest

from nnpassport.data import (idx_dataset, load_dataset, read_idx, read_ppm, resize_nearest, synthetic_dataset,
                             write_idx)
from nnpassport.errors import DataError, FormatError


def test_synthetic_is_reproducible():
    a = synthetic_dataset(num_classes=3, samples_per_class=20, image_size=8, seed=5)
    b = synthetic_dataset(num_classes=3, samples_per_class=20, image_size=8, seed=5)
    c = synthetic_dataset(num_classes=3, samples_per_class=20, image_size=8, seed=6)
    assert a.split_hash == b.split_hash
    assert a.test_hash == b.test_hash
    assert a.split_hash != c.split_hash


def test_synthetic_shapes_and_range():
    d = synthetic_dataset(num_classes=4, samples_per_class=25, image_size=12, seed=0)
    assert len(d.train_y) + len(d.test_y) == 100
    assert len(d.test_y) == 25
    assert d.train_x.shape[1:] == (1, 12, 12) and d.image_shape == (1, 12, 12)
    assert d.train_x.dtype == np.float32
    assert set(np.unique(np.concatenate([d.train_y, d.test_y]))) == {0, 1, 2, 3}
    assert d.chance == 25.0


def test_single_class_is_accepted():
    d = synthetic_dataset(num_classes=1, samples_per_class=8, image_size=8)
    assert d.chance == 100.0


def test_bad_synthetic_arguments():
    with pytest.raises(DataError):
        synthetic_dataset(num_classes=0)
    with pytest.raises(DataError):
        synthetic_dataset(test_fraction=1.0)
    with pytest.raises(DataError):
        load_dataset({"kind": "synthetic", "classes": 3})
    with pytest.raises(DataError):
        load_dataset({"kind": "imagenet"})


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(6, 5, 4)).astype(np.uint8)
    labels = np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8)
    write_idx(tmp_path / "x.idx", images)
    write_idx(tmp_path / "y.idx", labels)
    raw = (tmp_path / "x.idx").read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == 0x00000803
    assert struct.unpack(">3I", raw[4:16]) == (6, 5, 4)
    np.testing.assert_array_equal(read_idx(tmp_path / "x.idx"), images)
    np.testing.assert_array_equal(read_idx(tmp_path / "y.idx"), labels)


def test_idx_dataset(tmp_path):
    rng = np.random.default_rng(1)
    write_idx(tmp_path / "x.idx", rng.integers(0, 256, size=(8, 4, 4)))
    write_idx(tmp_path / "y.idx", np.arange(8) % 2)
    d = idx_dataset(str(tmp_path / "x.idx"), str(tmp_path / "y.idx"), test_fraction=0.25)
    assert d.num_classes == 2 and len(d.test_y) == 2 and len(d.train_y) == 6
    assert d.train_x.shape[1:] == (1, 4, 4)
    assert d.train_x.max() <= 1.0
    same = load_dataset({"kind": "idx", "images": str(tmp_path / "x.idx"), "labels": str(tmp_path / "y.idx"),
                         "test_fraction": 0.25})
    assert same.split_hash == d.split_hash


def test_malformed_idx(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        read_idx(bad)
    bad.write_bytes(struct.pack(">I", 0x00000D03) + struct.pack(">3I", 1, 1, 1) + b"\0")
    with pytest.raises(FormatError, match="magic"):
        read_idx(bad)
    bad.write_bytes(struct.pack(">I", 0x00000801) + struct.pack(">I", 5) + b"\0\0")
    with pytest.raises(FormatError, match="payload"):
        read_idx(bad)
    write_idx(tmp_path / "x.idx", np.zeros((3, 2, 2)))
    write_idx(tmp_path / "y.idx", np.zeros(4))
    with pytest.raises(FormatError):
        idx_dataset(str(tmp_path / "x.idx"), str(tmp_path / "y.idx"))


def test_read_ppm(tmp_path):
    pix = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n# comment\n3 2\n255\n" + pix.tobytes())
    img = read_ppm(path)
    assert img.shape == (3, 2, 3)
    np.testing.assert_allclose(img, pix.transpose(2, 0, 1) / 255.0)
    gray = tmp_path / "img.pgm"
    gray.write_bytes(b"P5 2 2 255\n" + bytes([0, 255, 255, 0]))
    np.testing.assert_array_equal(read_ppm(gray), [[[0, 1], [1, 0]]])
    gray.write_bytes(b"P5 2 2 255\n" + bytes([0, 255]))
    with pytest.raises(FormatError):
        read_ppm(gray)
    gray.write_bytes(b"P3 2 2 255\n0 0 0 0")
    with pytest.raises(FormatError):
        read_ppm(gray)


def test_resize_nearest():
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    np.testing.assert_array_equal(resize_nearest(img, (1, 2, 2)), [[[0, 2], [8, 10]]])
    up = resize_nearest(img[:, :2, :2], (1, 4, 4))
    np.testing.assert_array_equal(up[0, :2, :2], np.zeros((2, 2)))
    rgb = np.stack([img[0], img[0] + 3, img[0] - 3])
    np.testing.assert_array_equal(resize_nearest(rgb, (1, 4, 4)), img)
    assert resize_nearest(img, (3, 4, 4)).shape == (3, 4, 4)
