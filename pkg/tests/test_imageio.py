import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from ditail import imageio as io


def test_value_mapping_endpoints():
    img = np.array([-1.0, 0.0, 1.0, -2.0, 3.0], np.float32).reshape(1, 1, 5).repeat(3, axis=0)
    b = io.to_bytes8(img)
    assert b.shape == (1, 5, 3)
    assert list(b[0, :, 0]) == [0, 128, 255, 0, 255]


@given(arrays(np.uint8, (5, 7, 3)))
@settings(max_examples=50, deadline=None)
def test_bytes_roundtrip_exact(px):
    assert np.array_equal(io.to_bytes8(io.from_bytes8(px)), px)
    assert np.array_equal(io.decode_ppm(io.encode_ppm(px)), px)


def test_ppm_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = io.from_bytes8(rng.integers(0, 256, (24, 24, 3), dtype=np.uint8))
    io.write_image(tmp_path / "a.ppm", img)
    back = io.read_image(tmp_path / "a.ppm")
    assert np.array_equal(back, img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n24 24\n255\n")


def test_png_roundtrip(tmp_path):
    pytest.importorskip("PIL")
    img = io.from_bytes8(np.random.default_rng(1).integers(0, 256, (8, 6, 3), dtype=np.uint8))
    io.write_image(tmp_path / "a.png", img)
    assert np.array_equal(io.read_image(tmp_path / "a.png"), img)


def test_header_comments_and_whitespace():
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    blob = b"P6 # made by hand\n3\t2 # size\n255\n" + px.tobytes()
    assert np.array_equal(io.decode_ppm(blob), px)


def test_truncated_payload_reports_counts():
    px = np.zeros((4, 4, 3), np.uint8)
    blob = io.encode_ppm(px)[:-5]
    with pytest.raises(io.CodecError, match="expected 48 bytes, got 43"):
        io.decode_ppm(blob)


@pytest.mark.parametrize("blob,match", [
    (b"P3\n1 1\n255\n\x00\x00\x00", "magic"),
    (b"P6\n1 x\n255\n\x00\x00\x00", "bad token"),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
    (b"P6\n1", "truncated|separator"),
])
def test_header_errors(blob, match):
    with pytest.raises(io.CodecError, match=match):
        io.decode_ppm(blob)


def test_encode_rejects_wrong_layout():
    with pytest.raises(io.CodecError):
        io.encode_ppm(np.zeros((3, 4, 4), np.uint8))
    with pytest.raises(io.CodecError):
        io.encode_ppm(np.zeros((4, 4, 3), np.float32))


def test_mask_reading(tmp_path):
    px = np.zeros((4, 4, 3), np.uint8)
    px[:2] = 255
    (tmp_path / "m.ppm").write_bytes(io.encode_ppm(px))
    m = io.read_mask(tmp_path / "m.ppm")
    assert m.shape == (4, 4)
    assert np.array_equal(m[:2], np.ones((2, 4))) and np.array_equal(m[2:], np.zeros((2, 4)))


def test_grid_preserves_cells_exactly():
    rng = np.random.default_rng(2)
    cells = [[rng.uniform(-1, 1, (3, 5, 4)).astype(np.float32) for _ in range(3)] for _ in range(2)]
    g = io.assemble_grid(cells, pad=2)
    assert g.shape == (3, 2 * 5 + 3 * 2, 3 * 4 + 4 * 2)
    for i in range(2):
        for j in range(3):
            assert np.array_equal(io.grid_cell(g, i, j, 5, 4), cells[i][j])
    assert np.all(g[:, :2, :] == 1.0)
    with pytest.raises(ValueError):
        io.assemble_grid([cells[0], cells[1][:2]])
