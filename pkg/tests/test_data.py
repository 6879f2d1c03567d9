import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advattrib import data as D
from advattrib import victims as V
from advattrib.errors import ConsistencyError, FormatError, TruncatedFileError


def test_synthetic_counts_and_determinism():
    a = D.generate_synthetic(3, 10, side=16, seed=7)
    b = D.generate_synthetic(3, 10, side=16, seed=7)
    assert len(a.train) == 30 and a.train_x.shape == (30, 1, 16, 16)
    assert a.train_x.tobytes() == b.train_x.tobytes() and a.test_x.tobytes() == b.test_x.tobytes()
    assert np.array_equal(np.bincount(a.train_y), [10, 10, 10])
    c = D.generate_synthetic(3, 10, side=16, seed=8)
    assert c.train_x.tobytes() != a.train_x.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 10), st.integers(1, 6), st.integers(8, 20), st.integers(0, 2**31))
def test_synthetic_pixel_range_and_balance(k, per_class, side, seed):
    s = D.generate_synthetic(k, per_class, side=side, seed=seed)
    for x in (s.train_x, s.test_x):
        assert x.min() >= 0.0 and x.max() <= 1.0
        # 8-bit levels, as in IDX files
        assert np.allclose(np.round(x * 255), x * 255, atol=1e-9)
    assert np.array_equal(np.bincount(s.train_y, minlength=k), [per_class] * k)
    assert s.num_classes == k and s.image_shape == (1, side, side)


def test_synthetic_argument_errors():
    with pytest.raises(ValueError):
        D.generate_synthetic(1, 5)
    with pytest.raises(ValueError):
        D.generate_synthetic(3, 5, side=7)


def test_train_and_test_images_differ():
    s = D.generate_synthetic(4, 20, side=16, seed=1)
    train = {x.tobytes() for x in s.train_x}
    assert not any(x.tobytes() in train for x in s.test_x)


def test_small_cnn_separates_classes():
    s = D.generate_synthetic(4, 500, side=16, seed=3)
    model = V.train_victim(V.descriptor_by_name("cnn_small", 16, 4), s, epochs=5, lr=0.05, seed=0)
    assert model.trained_accuracy >= 0.95


def _idx_images(n, h, w, pixels: bytes) -> bytes:
    return struct.pack(">IIII", 0x803, n, h, w) + pixels


def _idx_labels(labels) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def test_parse_hand_built_idx(tmp_path):
    pixels = bytes(range(32))
    (tmp_path / "img").write_bytes(_idx_images(2, 4, 4, pixels))
    (tmp_path / "lab").write_bytes(_idx_labels([3, 1]))
    split = D.parse_idx(tmp_path / "img", tmp_path / "lab")
    recs = split.train
    assert len(recs) == 2 and [r.label for r in recs] == [3, 1]
    assert recs[0].pixels.shape == (1, 4, 4)
    assert np.allclose(recs[1].pixels.ravel(), np.arange(16, 32) / 255.0)


def test_idx_errors(tmp_path):
    (tmp_path / "img").write_bytes(_idx_images(2, 4, 4, bytes(32)))
    (tmp_path / "lab3").write_bytes(_idx_labels([0, 1, 2]))
    with pytest.raises(ConsistencyError):
        D.parse_idx(tmp_path / "img", tmp_path / "lab3")
    (tmp_path / "bad").write_bytes(struct.pack(">IIII", 0x801, 2, 4, 4) + bytes(32))
    with pytest.raises(FormatError):
        D.read_idx_images(tmp_path / "bad")
    (tmp_path / "short").write_bytes(_idx_images(2, 4, 4, bytes(20)))
    with pytest.raises(TruncatedFileError):
        D.read_idx_images(tmp_path / "short")
    with pytest.raises(OSError):  # truncation is an I/O error too
        D.read_idx_images(tmp_path / "short")
    (tmp_path / "hdr").write_bytes(b"\x00\x00\x08")
    with pytest.raises(TruncatedFileError):
        D.read_idx_labels(tmp_path / "hdr")


def test_idx_round_trip(tmp_path):
    s = D.generate_synthetic(3, 6, side=12, seed=5)
    D.write_idx_split(tmp_path, s)
    assert D.has_idx_split(tmp_path)
    r = D.load_idx_split(tmp_path)
    assert np.array_equal(r.train_x, s.train_x) and np.array_equal(r.test_x, s.test_x)
    assert np.array_equal(r.train_y, s.train_y) and np.array_equal(r.test_y, s.test_y)
    assert r.num_classes == 3
