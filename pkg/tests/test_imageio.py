import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainforge.errors import FormatError, InvalidArgumentError
from rainforge.imageio import (
    encode_png, format_boxes, parse_boxes, read_image, read_manifest, read_rain_png, write_image,
    write_manifest, write_rain_png,
)
from rainforge.rain import RainLayer


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3]))
def test_8bit_roundtrip_within_quantisation(tmp_path_factory, seed, channels):
    img = np.random.default_rng(seed).random((9, 13, channels)).astype(np.float32)
    path = tmp_path_factory.mktemp("png") / "x.png"
    write_image(path, img)
    back = read_image(path)
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.abs(back - img).max() <= 1 / 255


def test_16bit_rain_roundtrip(tmp_path):
    values = np.random.default_rng(1).random((20, 17, 1)).astype(np.float32)
    write_rain_png(tmp_path / "r.png", RainLayer(values))
    back = read_rain_png(tmp_path / "r.png")
    assert np.abs(back.values - values).max() <= 1 / 65535


def test_grayscale_reads_single_channel(tmp_path):
    cv2.imwrite(str(tmp_path / "g.png"), np.full((4, 5), 128, np.uint8))
    img = read_image(tmp_path / "g.png")
    assert img.shape == (4, 5, 1)
    assert img[0, 0, 0] == pytest.approx(128 / 255)


def test_channel_order_is_rgb(tmp_path):
    img = np.zeros((2, 2, 3), np.float32)
    img[..., 0] = 1.0  # red
    write_image(tmp_path / "red.png", img)
    raw = cv2.imread(str(tmp_path / "red.png"))
    assert raw[0, 0].tolist() == [0, 0, 255]  # OpenCV stores BGR
    np.testing.assert_array_equal(read_image(tmp_path / "red.png"), img)


def test_png_bytes_deterministic():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert encode_png(img) == encode_png(img.copy())


def test_rgba_rejected_with_name(tmp_path):
    path = tmp_path / "rgba.png"
    cv2.imwrite(str(path), np.zeros((3, 3, 4), np.uint8))
    with pytest.raises(FormatError, match="rgba.png"):
        read_image(path)


@pytest.mark.parametrize("name, data", [("x.jpg", b"\xff\xd8"), ("bad.png", b"not a png"), ("missing.png", None)])
def test_unreadable_rejected_with_name(tmp_path, name, data):
    path = tmp_path / name
    if data is not None:
        path.write_bytes(data)
    with pytest.raises(FormatError, match=name.replace(".", r"\.")):
        read_image(path)


def test_bad_bit_depth():
    with pytest.raises(InvalidArgumentError):
        encode_png(np.zeros((2, 2)), bit_depth=32)


def test_manifest_roundtrip_and_relative_paths(tmp_path):
    rows = [{"id": "a", "clean": "c/a.png", "rainy": "/abs/r.png"}, {"id": "b", "clean": "c/b.png", "rainy": ""}]
    write_manifest(tmp_path / "m.tsv", ("id", "clean", "rainy"), rows)
    m = read_manifest(tmp_path / "m.tsv", required=("id", "clean"))
    assert m.rows == rows
    assert m.path(rows[0], "clean") == tmp_path / "c" / "a.png"
    assert str(m.path(rows[0], "rainy")) == "/abs/r.png"
    assert m.path(rows[1], "rainy") is None


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("id\tclean\n")
    with pytest.raises(FormatError, match="header"):
        read_manifest(p)
    p.write_text("#id\tclean\na\n")
    with pytest.raises(FormatError, match="fields"):
        read_manifest(p)
    p.write_text("#id\n")
    with pytest.raises(FormatError, match="clean"):
        read_manifest(p, required=("id", "clean"))


def test_boxes_roundtrip():
    boxes = [(1.5, 2.0, 10.25, 12.0), (0.0, 0.0, 3.0, 4.0)]
    assert parse_boxes(format_boxes(boxes)) == boxes
    assert parse_boxes("") == []
    with pytest.raises(FormatError):
        parse_boxes("1,2,3")
