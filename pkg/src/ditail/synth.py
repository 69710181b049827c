"""Procedural shape images in a handful of drawing styles, with captions."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, derive_seed
from .schedule import ConfigurationError

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.10, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.98, 0.55, 0.05),
}
SHAPES = ("circle", "square", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class StyleSpec:
    """How a shape is drawn: background colour, fill rule and stroke width."""

    name: str
    background: tuple[float, float, float]
    fill: str  # solid | none | stripes | checker
    stroke: float = 0.0  # outline width in pixels, 0 for none
    period: int = 3
    alt: tuple[float, float, float] = (1.0, 1.0, 1.0)
    palette: dict = field(default_factory=lambda: dict(PALETTE), compare=False, hash=False)


STYLES = {
    "filled": StyleSpec("filled", (0.88, 0.88, 0.85), "solid"),
    "outline": StyleSpec("outline", (0.08, 0.08, 0.12), "none", stroke=1.75),
    "stripes": StyleSpec("stripes", (0.97, 0.93, 0.78), "stripes", period=3, alt=(1.0, 1.0, 1.0)),
    "checker": StyleSpec("checker", (0.45, 0.45, 0.48), "checker", period=3, alt=(0.05, 0.05, 0.05)),
}
SHIPPED_STYLES = ("filled", "outline", "stripes")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [-1, 1]
    caption: str
    content: dict


def _inside(shape: str, x, y, cx, cy, r):
    dx, dy = x - cx, y - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        s = 0.82 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "triangle":
        # apex up at (0, -r), base at y = +0.8r from -r..r
        top, base = -r, 0.8 * r
        half = r * (dy - top) / (base - top)
        return (dy >= top) & (dy <= base) & (np.abs(dx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render(style: StyleSpec, shape: str, color: str, cx: float, cy: float, r: float,
           size: int = 24) -> np.ndarray:
    """Rasterise one shape; pure function of its arguments. Returns (3, size, size) in [-1, 1]."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    inner = _inside(shape, x, y, cx, cy, r)
    rgb = np.asarray(style.palette[color], dtype=np.float64)
    alt = np.asarray(style.alt, dtype=np.float64)
    img = np.empty((n, n, 3))
    img[:] = style.background
    if style.fill == "solid":
        img[inner] = rgb
    elif style.fill == "none":
        ring = inner & ~_inside(shape, x, y, cx, cy, r - style.stroke)
        img[ring] = rgb
    elif style.fill == "stripes":
        band = (np.floor((x + y) / style.period) % 2) == 0
        img[inner & band] = rgb
        img[inner & ~band] = alt
    elif style.fill == "checker":
        cell = (np.floor(x / style.period) + np.floor(y / style.period)) % 2 == 0
        img[inner & cell] = rgb
        img[inner & ~cell] = alt
    else:
        raise ValueError(f"unknown fill rule {style.fill!r}")
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (img.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)


def content_params(rng: Rng, size: int = 24) -> dict:
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    color = list(PALETTE)[int(rng.integers(0, len(PALETTE)))]
    u = rng.uniform((3,))
    r = size * (0.20 + 0.10 * u[0])
    margin = r + 1.0
    cx = margin + (size - 2 * margin) * u[1]
    cy = margin + (size - 2 * margin) * u[2]
    return {"shape": shape, "color": color, "cx": float(cx), "cy": float(cy), "r": float(r)}


def caption_for(content: dict, style: str | None) -> str:
    words = [content["color"], content["shape"]]
    if style:
        words.append(style)
    return " ".join(words)


def datagen(style: StyleSpec | str, n: int, size: int = 24, seed: int = 0, patch: int = 4,
            style_word_rate: float = 0.5) -> list[Sample]:
    """``n`` deterministic samples; sample ``i`` depends only on (style, size, seed, i)."""
    if isinstance(style, str):
        style = STYLES[style]
    if size % patch:
        raise ConfigurationError(f"image size {size} not divisible by patch {patch}")
    out = []
    for i in range(n):
        rng = Rng(derive_seed(seed, style.name, size, i))
        content = content_params(rng, size)
        with_style = rng.uniform() < style_word_rate
        img = render(style, content["shape"], content["color"], content["cx"], content["cy"],
                     content["r"], size)
        out.append(Sample(img, caption_for(content, style.name if with_style else None),
                          dict(content, style=style.name)))
    return out


def mixed_datagen(styles, n_per_style: int, size: int = 24, seed: int = 0) -> list[Sample]:
    data = []
    for name in styles:
        data.extend(datagen(name, n_per_style, size, seed))
    return data


def write_dataset(samples: list[Sample], directory, style: StyleSpec | str):
    """One PPM per sample plus ``manifest.json`` (captions, content, style)."""
    from .imageio import write_ppm

    if isinstance(style, str):
        style = STYLES[style]
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:05d}.ppm"
        write_ppm(os.path.join(directory, name), s.image)
        entries.append({"file": name, "caption": s.caption, "content": s.content})
    manifest = {
        "style": {"name": style.name, "background": list(style.background), "fill": style.fill,
                  "stroke": style.stroke, "period": style.period, "alt": list(style.alt)},
        "samples": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_dataset(directory) -> list[Sample]:
    from .imageio import read_ppm

    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    return [Sample(read_ppm(os.path.join(directory, e["file"])), e["caption"], e["content"])
            for e in manifest["samples"]]


def dominant_hue(image: np.ndarray) -> float | None:
    """Saturation-weighted circular mean hue (degrees) of the colourful pixels."""
    rgb = (np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0
    rgb = np.clip(rgb, 0.0, 1.0).reshape(-1, 3)
    mx, mn = rgb.max(axis=1), rgb.min(axis=1)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    keep = (sat > 0.35) & (mx > 0.25)
    if not np.any(keep):
        return None
    r, g, b = rgb[keep].T
    mxk, d = mx[keep], (mx - mn)[keep]
    h = np.where(mxk == r, ((g - b) / d) % 6, np.where(mxk == g, (b - r) / d + 2, (r - g) / d + 4)) * 60.0
    w = sat[keep]
    ang = np.deg2rad(h)
    return float(np.rad2deg(np.arctan2((w * np.sin(ang)).sum(), (w * np.cos(ang)).sum())) % 360.0)


HUES = {"red": 0.0, "orange": 30.0, "yellow": 55.0, "green": 120.0, "cyan": 185.0,
        "blue": 230.0, "purple": 280.0, "pink": 330.0}


def hue_distance(h: float | None, color: str) -> float:
    if h is None:
        return 180.0
    d = abs(h - HUES[color]) % 360.0
    return min(d, 360.0 - d)


def hue_name(h: float | None) -> str | None:
    if h is None:
        return None
    return min(HUES, key=lambda c: hue_distance(h, c))
