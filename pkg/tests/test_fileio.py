import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cpl.fileio import (
    TensorFileError,
    parse_tensor,
    pixmap_bytes,
    read_pixmap,
    read_tensor,
    tensor_bytes,
    write_pixmap,
    write_tensor,
)


class TestTensorFiles:
    @settings(max_examples=100, deadline=None)
    @given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
    def test_round_trip(self, arr):
        back = parse_tensor(tensor_bytes(arr))
        assert back.shape == arr.shape
        assert back.tobytes() == np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()

    def test_file(self, tmp_path):
        a = np.arange(12, dtype=np.float32).reshape(3, 4)
        np.testing.assert_array_equal(read_tensor(write_tensor(tmp_path / "a.tensor", a)), a)

    def test_big_endian_input_stored_little(self):
        a = np.arange(4, dtype=">f8")
        buf = tensor_bytes(a)
        assert buf.endswith(np.arange(4, dtype="<f8").tobytes())
        np.testing.assert_array_equal(parse_tensor(buf), a)

    def test_errors(self):
        good = tensor_bytes(np.zeros(3))
        with pytest.raises(TensorFileError):
            parse_tensor(b"NOTATENSOR" + good)
        with pytest.raises(TensorFileError):
            parse_tensor(good[:-1])
        with pytest.raises(TensorFileError):
            parse_tensor(good.replace(b'"version": 1', b'"version": 9'))
        with pytest.raises(TensorFileError):
            tensor_bytes(np.array(["a"]))


class TestPixmaps:
    def test_gray_round_trip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        p = write_pixmap(tmp_path / "a.pgm", img)
        assert p.read_bytes().startswith(b"P5\n4 3\n255\n")
        np.testing.assert_array_equal(read_pixmap(p), img)

    def test_color_float(self, tmp_path):
        img = np.random.default_rng(0).random((3, 5, 4))
        back = read_pixmap(write_pixmap(tmp_path / "a.ppm", img))
        assert back.shape == (3, 5, 4)
        np.testing.assert_array_equal(back, np.round(img * 255).astype(np.uint8))

    def test_clips_and_rejects(self):
        assert pixmap_bytes(np.array([[2.0, -1.0]])).endswith(bytes([255, 0]))
        with pytest.raises(ValueError):
            pixmap_bytes(np.zeros((2, 4, 4)))
