"""Binary PPM (P6) codec, grayscale mask loading and image grids.

Tensor values map to bytes by ``round_half_away((x + 1) * 127.5)`` clamped to
[0, 255], so -1 -> 0, 0 -> 128 (127.5 rounds away from zero), +1 -> 255.
Bytes map back by ``b / 127.5 - 1``.
"""

from __future__ import annotations

import os

import numpy as np

from .denoiser import atomic_write


class CodecError(ValueError):
    pass


def to_bytes8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    x = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    x = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(x, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_bytes8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5) - np.float32(1.0))


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise CodecError(f"PPM needs (H, W, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _tokens(blob: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, honouring ``#`` comments."""
    out, i, n = [], 2, len(blob)
    while len(out) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace() and blob[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise CodecError(f"PPM header truncated at byte offset {i}")
        tok = blob[start:i]
        if not tok.isdigit():
            raise CodecError(f"PPM header: bad token {tok!r} at byte offset {start}")
        out.append(int(tok))
    if i >= n or not blob[i:i + 1].isspace():
        raise CodecError(f"PPM header: missing separator at byte offset {i}")
    return out, i + 1


def decode_ppm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P6":
        raise CodecError(f"not a binary PPM: magic {blob[:2]!r} at byte offset 0")
    (w, h, maxval), off = _tokens(blob, 3)
    if w <= 0 or h <= 0:
        raise CodecError(f"PPM header: bad size {w}x{h}")
    if maxval != 255:
        raise CodecError(f"PPM header: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    have = len(blob) - off
    if have < need:
        raise CodecError(f"PPM payload truncated at byte offset {len(blob)}: expected {need} bytes, got {have}")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray):
    atomic_write(path, encode_ppm(to_bytes8(image)))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes8(decode_ppm(fh.read()))


def write_png(path, image: np.ndarray):
    from PIL import Image

    tmp = f"{os.fspath(path)}.tmp{os.getpid()}.png"
    Image.fromarray(to_bytes8(image), "RGB").save(tmp)
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return from_bytes8(np.asarray(im.convert("RGB"), dtype=np.uint8))


def write_image(path, image):
    (write_png if os.fspath(path).lower().endswith(".png") else write_ppm)(path, image)


def read_image(path) -> np.ndarray:
    return (read_png if os.fspath(path).lower().endswith(".png") else read_ppm)(path)


def read_mask(path) -> np.ndarray:
    """Grayscale mask from a PPM/PNG: 255 -> inject (1.0), 0 -> keep (0.0)."""
    if os.fspath(path).lower().endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
    else:
        with open(path, "rb") as fh:
            px = decode_ppm(fh.read())
    return px.astype(np.float32).mean(axis=2) / np.float32(255.0)


def assemble_grid(cells, pad: int = 2, pad_value: float = 1.0) -> np.ndarray:
    """Row-major grid of (3, H, W) images separated by ``pad`` pixels."""
    rows, cols = len(cells), len(cells[0])
    C, H, W = cells[0][0].shape
    out = np.full((C, rows * H + (rows + 1) * pad, cols * W + (cols + 1) * pad), pad_value, dtype=np.float32)
    for i, row in enumerate(cells):
        if len(row) != cols:
            raise ValueError("ragged grid")
        for j, cell in enumerate(row):
            y, x = grid_offset(i, j, H, W, pad)
            out[:, y:y + H, x:x + W] = cell
    return out


def grid_offset(i: int, j: int, H: int, W: int, pad: int = 2) -> tuple[int, int]:
    return pad + i * (H + pad), pad + j * (W + pad)


def grid_cell(grid: np.ndarray, i: int, j: int, H: int, W: int, pad: int = 2) -> np.ndarray:
    y, x = grid_offset(i, j, H, W, pad)
    return grid[:, y:y + H, x:x + W]
