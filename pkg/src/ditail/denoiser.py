"""Token-transformer noise predictor with per-layer activation taps.

The image (pixel space doubles as the latent space) is cut into non-overlapping
``patch x patch`` tiles.  Each of the ``L`` layers runs, in order:

1. a residual feed-forward block  -> tap ``f``
2. self-attention over the tokens -> taps ``q``, ``k``, ``v``
3. cross-attention onto the single condition token -> layer output tap ``h``

With a single key, the cross-attention softmax is identically 1, so that block
reduces to its value/output projections of the condition vector.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .conditioner import Vocabulary
from .numerics import EVAL, DimensionError, Rng, derive_seed
from .schedule import Schedule, make_schedule

MAGIC = b"DTL1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 24
    channels: int = 3
    patch: int = 4
    width: int = 64
    layers: int = 8
    ff_mult: int = 2
    cond_dim: int = 32
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 50

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def validate(self):
        if self.image_size % self.patch:
            raise DimensionError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if min(self.width, self.layers, self.cond_dim, self.ff_mult) < 1:
            raise ValueError(f"degenerate model config {self}")

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        d, dc, p, hid = self.width, self.cond_dim, self.patch_dim, self.ff_mult * self.width
        s = OrderedDict()
        s["patch_in.w"] = (p, d)
        s["patch_in.b"] = (d,)
        s["pos"] = (self.tokens, d)
        s["time.w"] = (d, d)
        s["time.b"] = (d,)
        for l in range(self.layers):
            s[f"l{l}.ln1.g"] = (d,)
            s[f"l{l}.ln1.b"] = (d,)
            s[f"l{l}.ff1.w"] = (d, hid)
            s[f"l{l}.ff1.b"] = (hid,)
            s[f"l{l}.ff2.w"] = (hid, d)
            s[f"l{l}.ff2.b"] = (d,)
            s[f"l{l}.ln2.g"] = (d,)
            s[f"l{l}.ln2.b"] = (d,)
            s[f"l{l}.q.w"] = (d, d)
            s[f"l{l}.k.w"] = (d, d)
            s[f"l{l}.v.w"] = (d, d)
            s[f"l{l}.o.w"] = (d, d)
            s[f"l{l}.o.b"] = (d,)
            s[f"l{l}.cv.w"] = (dc, d)
            s[f"l{l}.co.w"] = (d, d)
            s[f"l{l}.co.b"] = (d,)
        s["ln_out.g"] = (d,)
        s["ln_out.b"] = (d,)
        s["out.w"] = (d, p)
        s["out.b"] = (p,)
        return s


def time_features(T_train: int, width: int) -> np.ndarray:
    """Fixed sinusoidal features for timesteps 0..T_train, shape (T_train + 1, width)."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.arange(T_train + 1, dtype=np.float64)[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < width:
        feats = np.pad(feats, ((0, 0), (0, width - feats.shape[1])))
    return feats


@dataclass
class DenoiserModel:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    vocab: Vocabulary
    provenance: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0,
             vocab: Vocabulary | None = None) -> "DenoiserModel":
        config = config or ModelConfig()
        config.validate()
        vocab = vocab or Vocabulary.build(dim=config.cond_dim)
        if vocab.dim != config.cond_dim:
            raise DimensionError(f"vocabulary width {vocab.dim} != cond_dim {config.cond_dim}")
        rng = Rng(derive_seed(seed, "denoiser-init"))
        branch = 1.0 / math.sqrt(2 * config.layers)
        params = OrderedDict()
        for name, shape in config.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "pos":
                arr = 0.5 * rng.normal(shape, np.float64)
            elif leaf == "g":
                arr = np.ones(shape)
            elif leaf == "b" or name == "out.w":
                arr = np.zeros(shape)
            else:
                arr = rng.normal(shape, np.float64) / math.sqrt(shape[0])
                if name.endswith(("ff2.w", "o.w", "co.w")):
                    arr = arr * branch
            params[name] = arr.astype(np.float32)
        return cls(config, params, vocab, {"init_seed": int(seed)})

    @property
    def schedule(self) -> Schedule:
        c = self.config
        key = (c.T_train, c.beta_start, c.beta_end, c.sample_steps)
        if key not in _SCHEDULE_CACHE:
            _SCHEDULE_CACHE[key] = make_schedule(*key)
        return _SCHEDULE_CACHE[key]

    @property
    def dtype(self):
        return self.params["pos"].dtype

    def astype(self, dtype) -> "DenoiserModel":
        params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        return DenoiserModel(self.config, params, self.vocab, dict(self.provenance))

    def copy(self) -> "DenoiserModel":
        return self.astype(self.dtype)

    def _time_table(self) -> np.ndarray:
        key = (self.config.T_train, self.config.width, self.dtype.str)
        cache = _TIME_CACHE.get(key)
        if cache is None:
            cache = time_features(self.config.T_train, self.config.width).astype(self.dtype)
            _TIME_CACHE[key] = cache
        return cache

    def identity(self) -> str:
        """Hash of configuration and weights."""
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        h.update(self.vocab.digest().encode())
        return h.hexdigest()[:16]

    def architecture(self) -> str:
        """Hash of the shapes only; equal for models that can exchange features."""
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        h.update(" ".join(self.vocab.words).encode())
        return h.hexdigest()[:16]


_TIME_CACHE: dict = {}
_SCHEDULE_CACHE: dict = {}


# --------------------------------------------------------------------------
# image <-> tokens
# --------------------------------------------------------------------------

def patchify(z: np.ndarray, patch: int) -> np.ndarray:
    """(..., C, H, W) -> (..., tokens, C * patch * patch), tokens row-major."""
    *lead, C, H, W = z.shape
    if H % patch or W % patch:
        raise DimensionError(f"image {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = z.reshape(*lead, C, gh, patch, gw, patch)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, gh * gw, C * patch * patch)


def unpatchify(x: np.ndarray, patch: int, channels: int, size: int) -> np.ndarray:
    *lead, T, P = x.shape
    g = size // patch
    y = x.reshape(*lead, g, g, channels, patch, patch)
    n = len(lead)
    y = y.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return y.reshape(*lead, channels, size, size)


# --------------------------------------------------------------------------
# layer pieces, written once against the ops backend
# --------------------------------------------------------------------------

def embed(ops, P, cfg: ModelConfig, tokens, tfeat):
    """Input projection plus positional table; returns (h, time embedding)."""
    h = ops.add(ops.linear(tokens, P["patch_in.w"], P["patch_in.b"]), P["pos"])
    temb = ops.linear(tfeat, P["time.w"], P["time.b"])
    return h, temb


def residual_block(ops, P, l, h, temb):
    u = ops.add(ops.layer_norm(h, P[f"l{l}.ln1.g"], P[f"l{l}.ln1.b"]), temb)
    u = ops.silu(ops.linear(u, P[f"l{l}.ff1.w"], P[f"l{l}.ff1.b"]))
    return ops.add(h, ops.linear(u, P[f"l{l}.ff2.w"], P[f"l{l}.ff2.b"]))


def qkv(ops, P, l, f):
    x = ops.layer_norm(f, P[f"l{l}.ln2.g"], P[f"l{l}.ln2.b"])
    return ops.linear(x, P[f"l{l}.q.w"]), ops.linear(x, P[f"l{l}.k.w"]), ops.linear(x, P[f"l{l}.v.w"])


def attention_block(ops, P, l, f, q, k, v):
    return ops.add(f, ops.linear(ops.attention(q, k, v), P[f"l{l}.o.w"], P[f"l{l}.o.b"]))


def cross_block(ops, P, l, h, c):
    # single condition token: softmax over one key is 1, output = o(v(c))
    return ops.add(h, ops.linear(ops.linear(c, P[f"l{l}.cv.w"]), P[f"l{l}.co.w"], P[f"l{l}.co.b"]))


def preconditioning(sched: Schedule, t):
    """Fixed ``(c_skip, c_out)`` with ``eps_hat = c_skip * z_t + c_out * net``.

    ``c_skip = sqrt(1 - abar_t)`` and ``c_out = sqrt(abar_t)``: the network
    predicts ``v = sqrt(abar) eps - sqrt(1 - abar) z_0``, so its error reaches the
    clean-image estimate unamplified even where ``abar_t`` is tiny.
    """
    if np.ndim(t):
        ab = np.array([sched.alpha_bar(int(x)) for x in t])
        return np.sqrt(1.0 - ab), np.sqrt(ab)
    ab = sched.alpha_bar(int(t))
    return math.sqrt(1.0 - ab), math.sqrt(ab)


def readout(ops, P, h):
    return ops.linear(ops.layer_norm(h, P["ln_out.g"], P["ln_out.b"]), P["out.w"], P["out.b"])


# --------------------------------------------------------------------------
# inference forward
# --------------------------------------------------------------------------

@dataclass
class LayerTaps:
    f: list = field(default_factory=list)
    q: list = field(default_factory=list)
    k: list = field(default_factory=list)
    v: list = field(default_factory=list)
    h: list = field(default_factory=list)


class InjectionHooks(Protocol):
    """Called between chunks during :func:`forward_batched3`.

    ``src`` arguments are the source-chunk activations, or the stored ones when
    the source chunk is not forwarded.  Implementations return new pos/neg
    values and must never modify the source values.
    """

    def residual(self, layer, f_src, f_pos, f_neg): ...

    def attention(self, layer, q_src, q_pos, q_neg, k_src, k_pos, k_neg): ...

    def stored(self, layer: int, kind: str): ...


def _check_input(model: DenoiserModel, z: np.ndarray, t: int):
    c = model.config
    if z.shape != (c.channels, c.image_size, c.image_size):
        if z.ndim == 3 and (z.shape[1] % c.patch or z.shape[2] % c.patch):
            raise DimensionError(f"latent {z.shape[1:]} not divisible by patch {c.patch}")
        raise DimensionError(f"latent shape {z.shape} != {(c.channels, c.image_size, c.image_size)}")
    if not (1 <= int(t) <= c.T_train):
        raise DimensionError(f"timestep {t} outside [1, {c.T_train}]")


def _forward_chunks(model, zs, t, conds, hooks=None, capture=False):
    """Layer-interleaved forward over up to three chunks (src, pos, neg).

    Every chunk runs exactly the op sequence of a lone forward; hooks only see
    the values between blocks.
    """
    cfg, P = model.config, model.params
    live = [i for i, z in enumerate(zs) if z is not None]
    tfeat = model._time_table()[int(t)]
    h, temb = {}, {}
    for i in live:
        h[i], temb[i] = embed(EVAL, P, cfg, patchify(zs[i], cfg.patch), tfeat)
    taps = {i: LayerTaps() for i in live} if capture else None
    for l in range(cfg.layers):
        f = {i: residual_block(EVAL, P, l, h[i], temb[i]) for i in live}
        if hooks is not None:
            f_src = f[0] if 0 in f else hooks.stored(l, "f")
            f[1], f[2] = hooks.residual(l, f_src, f[1], f[2])
        q, k, v = {}, {}, {}
        for i in live:
            q[i], k[i], v[i] = qkv(EVAL, P, l, f[i])
        if hooks is not None:
            q_src = q[0] if 0 in q else hooks.stored(l, "q")
            k_src = k[0] if 0 in k else hooks.stored(l, "k")
            q[1], q[2], k[1], k[2] = hooks.attention(l, q_src, q[1], q[2], k_src, k[1], k[2])
        for i in live:
            a = attention_block(EVAL, P, l, f[i], q[i], k[i], v[i])
            h[i] = cross_block(EVAL, P, l, a, conds[i])
            if capture:
                tp = taps[i]
                tp.f.append(f[i])
                tp.q.append(q[i])
                tp.k.append(k[i])
                tp.v.append(v[i])
                tp.h.append(h[i])
    eps = [None] * len(zs)
    c_skip, c_out = (model.dtype.type(c) for c in preconditioning(model.schedule, t))
    for i in live:
        net = unpatchify(readout(EVAL, P, h[i]), cfg.patch, cfg.channels, cfg.image_size)
        eps[i] = c_skip * zs[i] + c_out * net
    return eps, taps


def predict_noise(model: DenoiserModel, z_t: np.ndarray, t: int, c: np.ndarray,
                  capture: bool = False):
    """Noise estimate for one latent; returns ``(eps_hat, taps or None)``."""
    _check_input(model, z_t, t)
    eps, taps = _forward_chunks(model, [z_t], t, [c], capture=capture)
    return eps[0], (taps[0] if capture else None)


def forward_batched3(model: DenoiserModel, z_triple, t: int, c_tilde, hooks=None, capture=False):
    """Forward the (src, pos, neg) triple under (n, e_pos, e_neg).

    ``z_triple[0]`` may be ``None`` when ``hooks`` supplies stored source
    features; the source noise estimate is then ``None`` too.
    """
    if len(z_triple) != 3 or len(c_tilde) != 3:
        raise UsageError(f"expected 3 chunks and 3 conditions, got {len(z_triple)} and {len(c_tilde)}")
    if z_triple[1] is None or z_triple[2] is None:
        raise UsageError("pos and neg chunks are required")
    if z_triple[0] is None and hooks is None:
        raise UsageError("source chunk missing and no stored features supplied")
    for z in z_triple:
        if z is not None:
            _check_input(model, z, t)
    eps, taps = _forward_chunks(model, list(z_triple), t, list(c_tilde), hooks=hooks, capture=capture)
    if capture:
        return tuple(eps), taps
    return tuple(eps)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

def _header(model: DenoiserModel) -> dict:
    arrays = [{"name": n, "shape": list(a.shape)} for n, a in model.params.items()]
    arrays.append({"name": "vocab.table", "shape": list(model.vocab.table.shape)})
    payload = sum(4 * int(np.prod(a["shape"])) for a in arrays)
    return {
        "format": "DTL1",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "vocab": {"words": list(model.vocab.words), "seed": model.vocab.seed},
        "provenance": model.provenance,
        "arrays": arrays,
        "dtype": "<f4",
        "payload_bytes": payload,
    }


def to_bytes(model: DenoiserModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, indent=1).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for arr in model.params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.vocab.table, dtype="<f4").tobytes())
    return b"".join(parts)


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save(model: DenoiserModel, path):
    atomic_write(path, to_bytes(model))


def read_container(blob: bytes, magic: bytes, what: str) -> tuple[dict, bytes]:
    """Split a ``magic | u32 header length | JSON header | payload`` blob."""
    if len(blob) < 8:
        raise FormatError(f"{what}: file too short ({len(blob)} bytes) for magic and header length")
    if blob[:4] != magic:
        raise FormatError(f"{what}: bad magic {blob[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise FormatError(f"{what}: header: expected {hlen} bytes, file has {len(blob) - 8}")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header is not valid JSON: {exc}") from None
    payload = blob[8 + hlen:]
    expected = header.get("payload_bytes")
    if expected != len(payload):
        raise FormatError(f"{what}: payload_bytes: expected {expected} bytes, found {len(payload)}")
    return header, payload


def from_bytes(blob: bytes) -> DenoiserModel:
    header, payload = read_container(blob, MAGIC, "checkpoint")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"checkpoint: version: unsupported {header.get('version')!r}")
    try:
        config = ModelConfig(**header["config"])
    except TypeError as exc:
        raise FormatError(f"checkpoint: config: {exc}") from None
    expected = config.param_shapes()
    expected["vocab.table"] = (len(header["vocab"]["words"]) + 1, config.cond_dim)
    names = [a["name"] for a in header["arrays"]]
    if names != list(expected):
        missing = sorted(set(expected) - set(names)) or sorted(set(names) - set(expected))
        raise FormatError(f"checkpoint: arrays: layout disagrees with config near {missing[:3]}")
    arrays, off = {}, 0
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != tuple(expected[name]):
            raise FormatError(f"checkpoint: {name}: shape {shape} disagrees with config {expected[name]}")
        n = 4 * int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=off).reshape(shape).astype(np.float32)
        off += n
    table = arrays.pop("vocab.table")
    table.flags.writeable = False
    vocab = Vocabulary(tuple(header["vocab"]["words"]), table, header["vocab"].get("seed", 0))
    return DenoiserModel(config, OrderedDict(arrays), vocab, header.get("provenance", {}))


def load(path) -> DenoiserModel:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
