"""Desk-scale stand-ins for prompt compliance, structure and style distance.

* compliance: cosine between a linear map of an image descriptor and the prompt
  embedding.  The map is a ridge fit from descriptors of a seeded synthetic
  corpus onto the embeddings of their content captions.
* structure: Frobenius distance between cosine self-similarity maps of the
  self-attention keys of a frozen probe model.
* style: Frechet distance between descriptor sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .conditioner import Vocabulary, encode_prompt
from .denoiser import DenoiserModel, DimensionError, atomic_write, predict_noise

HIST_BINS = 8
DESCRIPTOR_LEN = 3 * HIST_BINS + 5 + 4
PROBE_LAYER = 7
PROBE_FRACTION = 0.1
FRECHET_EPS = 1e-6


def descriptor(image: np.ndarray) -> np.ndarray:
    """Fixed-length (33) description of an image in [-1, 1].

    Layout: 8-bin histogram per channel (24), foreground centroid (2) and
    second central moments xx, yy, xy (3), edge density per quadrant (4).
    """
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    C, H, W = x.shape
    hist = []
    for ch in range(C):
        h, _ = np.histogram(x[ch], bins=HIST_BINS, range=(-1.0, 1.0))
        hist.append(h / (H * W))
    # foreground weight: colour distance from the mean border colour
    border = np.concatenate([x[:, 0, :], x[:, -1, :], x[:, 1:-1, 0], x[:, 1:-1, -1]], axis=1).mean(axis=1)
    w = np.sqrt(((x - border[:, None, None]) ** 2).sum(axis=0))
    total = w.sum()
    ys, xs = np.mgrid[0:H, 0:W]
    ys, xs = (ys + 0.5) / H, (xs + 0.5) / W
    if total > 1e-12:
        cy, cx = (w * ys).sum() / total, (w * xs).sum() / total
        mxx = (w * (xs - cx) ** 2).sum() / total
        myy = (w * (ys - cy) ** 2).sum() / total
        mxy = (w * (xs - cx) * (ys - cy)).sum() / total
    else:
        cy = cx = 0.5
        mxx = myy = mxy = 0.0
    lum = x.mean(axis=0)
    gy = np.zeros_like(lum)
    gx = np.zeros_like(lum)
    gy[:-1] = np.abs(np.diff(lum, axis=0))
    gx[:, :-1] = np.abs(np.diff(lum, axis=1))
    g = gx + gy
    h2, w2 = H // 2, W // 2
    edges = [g[:h2, :w2].mean(), g[:h2, w2:].mean(), g[h2:, :w2].mean(), g[h2:, w2:].mean()]
    return np.concatenate([np.concatenate(hist), [cx, cy, mxx, myy, mxy], edges])


def descriptors(images) -> np.ndarray:
    return np.stack([descriptor(im) for im in images])


# --------------------------------------------------------------------------
# compliance
# --------------------------------------------------------------------------

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine of {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


_PROJECTIONS: dict = {}


def projection(vocab: Vocabulary, seed: int = 0, per_style: int = 96, ridge: float = 1e-3) -> np.ndarray:
    """Descriptor -> embedding map, (DESCRIPTOR_LEN, d_c); deterministic per (vocab, seed)."""
    from .synth import STYLES, caption_for, datagen

    key = (vocab.digest(), seed, per_style, ridge)
    if key not in _PROJECTIONS:
        feats, targets = [], []
        for name in STYLES:
            for s in datagen(name, per_style, seed=seed + 7919, style_word_rate=0.0):
                feats.append(descriptor(s.image))
                targets.append(encode_prompt(caption_for(s.content, None), vocab).astype(np.float64))
        X, Y = np.stack(feats), np.stack(targets)
        A = X.T @ X + ridge * len(X) * np.eye(X.shape[1])
        _PROJECTIONS[key] = np.linalg.solve(A, X.T @ Y)
    return _PROJECTIONS[key]


def compliance_from_descriptor(desc: np.ndarray, prompt_embedding: np.ndarray, proj: np.ndarray) -> float:
    return cosine(np.asarray(desc, dtype=np.float64) @ proj, prompt_embedding)


def compliance_score(image: np.ndarray, prompt: str, vocab: Vocabulary) -> float:
    """Cosine in [-1, 1] between the projected image descriptor and the prompt embedding."""
    e = encode_prompt(prompt, vocab)
    return compliance_from_descriptor(descriptor(image), e, projection(vocab))


# --------------------------------------------------------------------------
# structure
# --------------------------------------------------------------------------

def structure_map(image: np.ndarray, probe: DenoiserModel, t_probe: int | None = None,
                  layer: int = PROBE_LAYER) -> np.ndarray:
    """Cosine Gram matrix (tokens x tokens) of the probe layer's self-attention keys."""
    cfg = probe.config
    image = np.asarray(image)
    if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(f"image {image.shape} does not match probe grid "
                             f"{(cfg.channels, cfg.image_size, cfg.image_size)}")
    t = t_probe if t_probe is not None else int(round(PROBE_FRACTION * cfg.T_train))
    _, taps = predict_noise(probe, image.astype(probe.dtype), t, probe.vocab.null, capture=True)
    k = taps.k[layer].astype(np.float64)
    k = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-12)
    return k @ k.T


def map_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / a.shape[0])


def structure_distance(image_a: np.ndarray, image_b: np.ndarray, probe: DenoiserModel,
                       t_probe: int | None = None) -> float:
    """Frobenius distance between structure maps, divided by the token count."""
    return map_distance(structure_map(image_a, probe, t_probe), structure_map(image_b, probe, t_probe))


# --------------------------------------------------------------------------
# Frechet
# --------------------------------------------------------------------------

@dataclass
class FrechetResult:
    value: float
    regularized: bool

    def __float__(self):
        return self.value


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^(1/2))`` via the symmetric form.

    ``tr (A B)^(1/2) = tr (A^(1/2) B A^(1/2))^(1/2)``, evaluated by eigendecomposition.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    ra = _psd_sqrt(cov_a)
    inner = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt, 0.0))


def stats(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mu = x.mean(axis=0)
    if len(x) < 2:
        return mu, np.zeros((x.shape[1], x.shape[1]))
    return mu, np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def frechet_distance(set_a, set_b) -> FrechetResult:
    """Frechet distance between two descriptor sets (rows are samples).

    Sets smaller than ``dim + 1`` get ``FRECHET_EPS * I`` added to both
    covariances, reported through ``regularized``.
    """
    a, b = np.asarray(set_a, dtype=np.float64), np.asarray(set_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"descriptor widths differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, cov_a = stats(a)
    mu_b, cov_b = stats(b)
    dim = a.shape[1]
    regularized = min(len(a), len(b)) < dim + 1
    if regularized:
        cov_a = cov_a + FRECHET_EPS * np.eye(dim)
        cov_b = cov_b + FRECHET_EPS * np.eye(dim)
    return FrechetResult(frechet_from_stats(mu_a, cov_a, mu_b, cov_b), regularized)


def write_report(path, pairs: list[dict], aggregates: dict):
    atomic_write(path, json.dumps({"pairs": pairs, "aggregates": aggregates}, indent=1, sort_keys=True).encode())
