"""PGM serialization round trips and malformed-input handling."""

import numpy as np
import pytest

from mdseg.errors import DataError, FilesystemError
from mdseg.pgm import read_image, read_mask, read_pgm, write_mask_pgm, write_pgm


def test_uint8_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 11), dtype=np.uint8)
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    np.testing.assert_array_equal(read_pgm(p), img)


def test_header_layout(tmp_path):
    p = tmp_path / "x.pgm"
    write_pgm(p, np.zeros((2, 3), dtype=np.uint8))
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert len(raw) == len(b"P5\n3 2\n255\n") + 6


def test_float_image_scaled(tmp_path):
    img = np.array([[0.0, 0.5, 1.0]])
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    np.testing.assert_array_equal(read_pgm(p), [[0, 128, 255]])


def test_float_out_of_range_rejected(tmp_path):
    with pytest.raises(DataError):
        write_pgm(tmp_path / "x.pgm", np.array([[1.5]]))


def test_mask_written_as_0_255(tmp_path):
    mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    p = tmp_path / "m.pgm"
    write_mask_pgm(p, mask)
    np.testing.assert_array_equal(read_pgm(p), [[0, 255], [255, 0]])
    np.testing.assert_array_equal(read_mask(p), mask)


def test_read_image_normalizes(tmp_path):
    p = tmp_path / "x.pgm"
    write_pgm(p, np.array([[0, 255]], dtype=np.uint8))
    img = read_image(p)
    assert img.dtype == np.float32
    np.testing.assert_allclose(img, [[0.0, 1.0]])


def test_comments_in_header_skipped(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n\x07\x09")
    np.testing.assert_array_equal(read_pgm(p), [[7, 9]])


def test_wrong_magic_rejected(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DataError, match="P5|binary"):
        read_pgm(p)


def test_truncated_raster_rejected(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(DataError, match="raster"):
        read_pgm(p)


def test_unsupported_maxval_rejected(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(DataError, match="maxval"):
        read_pgm(p)


def test_non_2d_write_rejected(tmp_path):
    with pytest.raises(DataError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def test_missing_file_read_error(tmp_path):
    with pytest.raises(FilesystemError, match="nope"):
        read_pgm(tmp_path / "nope.pgm")


def test_unwritable_path_write_error(tmp_path):
    with pytest.raises(FilesystemError, match="missing"):
        write_pgm(tmp_path / "missing" / "x.pgm", np.zeros((2, 2), np.uint8))
