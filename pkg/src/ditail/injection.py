"""Content injection: source capture, masked substitution and the Ditail loop."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .conditioner import bundle
from .denoiser import (DenoiserModel, FormatError, atomic_write, forward_batched3, predict_noise,
                       read_container)
from .numerics import DimensionError
from .schedule import ConfigurationError, ddim_step

TRAJ_MAGIC = b"DTRJ"
LATENT = "latent"
FEATURE = "feature"


class ProvenanceError(ValueError):
    pass


# --------------------------------------------------------------------------
# masks and config
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InjectionMask:
    """Pixel-grid mask in [0, 1]; 1 means take the source value."""

    pixels: np.ndarray

    @classmethod
    def full(cls, size: int = 24, value: float = 1.0) -> "InjectionMask":
        return cls(np.full((size, size), float(value), dtype=np.float32))

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    def tokens(self, patch: int) -> np.ndarray:
        """Area-maximum downsample to the token grid, shape (tokens, 1)."""
        H, W = self.pixels.shape
        if H % patch or W % patch:
            raise DimensionError(f"mask {H}x{W} not divisible by patch {patch}")
        g = self.pixels.reshape(H // patch, patch, W // patch, patch).max(axis=(1, 3))
        return g.reshape(-1, 1)


@dataclass(frozen=True)
class InjectionConfig:
    residual_layers: tuple[int, ...] = (3,)
    attention_layers: tuple[int, ...] = (3, 4, 5, 6, 7)
    thresh_res_frac: float = 0.8
    thresh_attn_frac: float = 0.5
    omega: float = 7.5
    mask: InjectionMask | None = None
    mode: str = LATENT

    def __post_init__(self):
        for name in ("thresh_res_frac", "thresh_attn_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.mode not in (LATENT, FEATURE):
            raise ConfigurationError(f"mode must be {LATENT!r} or {FEATURE!r}, got {self.mode!r}")
        object.__setattr__(self, "residual_layers", tuple(sorted(set(self.residual_layers))))
        object.__setattr__(self, "attention_layers", tuple(sorted(set(self.attention_layers))))

    def validate_for(self, model: DenoiserModel):
        L = model.config.layers
        bad = [l for l in self.residual_layers + self.attention_layers if not 0 <= l < L]
        if bad:
            raise ConfigurationError(f"layer indices {bad} invalid for a {L}-layer model")

    def token_mask(self, model: DenoiserModel) -> np.ndarray:
        cfg = model.config
        mask = self.mask or InjectionMask.full(cfg.image_size)
        if mask.pixels.shape != (cfg.image_size, cfg.image_size):
            raise DimensionError(f"mask {mask.pixels.shape} does not match image size {cfg.image_size}")
        return mask.tokens(cfg.patch).astype(model.dtype)

    def without_injection(self) -> "InjectionConfig":
        return replace(self, residual_layers=(), attention_layers=())


# --------------------------------------------------------------------------
# block-level substitution
# --------------------------------------------------------------------------

def _blend(mask, src, x):
    return mask * src + (1 - mask) * x


def inj_forward_res(h_src, h_pos, h_neg, mask):
    """Residual-output substitution; ``h_src`` itself is returned untouched."""
    if not (h_src.shape == h_pos.shape == h_neg.shape):
        raise DimensionError(f"residual chunks differ: {h_src.shape}, {h_pos.shape}, {h_neg.shape}")
    return _blend(mask, h_src, h_pos), _blend(mask, h_src, h_neg)


def inj_forward_attn(q_src, q_pos, q_neg, k_src, k_pos, k_neg, mask):
    """Query/key substitution; values are never passed in, hence never changed."""
    shapes = {a.shape for a in (q_src, q_pos, q_neg, k_src, k_pos, k_neg)}
    if len(shapes) != 1:
        raise DimensionError(f"attention chunks differ in shape: {sorted(shapes)}")
    return (_blend(mask, q_src, q_pos), _blend(mask, q_src, q_neg),
            _blend(mask, k_src, k_pos), _blend(mask, k_src, k_neg))


def guidance_combine(eps_pos: np.ndarray, eps_neg: np.ndarray, omega: float) -> np.ndarray:
    """Classifier-free guidance ``eps_neg + omega (eps_pos - eps_neg)``.

    Evaluated in the affine form ``(1 - omega) eps_neg + omega eps_pos`` so that
    omega = 0 / 1 return the branches exactly and swapping the branches with
    omega -> 1 - omega is exact; entries where both branches agree are passed
    through unchanged.
    """
    if eps_pos.shape != eps_neg.shape:
        raise DimensionError(f"guidance branches differ: {eps_pos.shape} vs {eps_neg.shape}")
    omega = float(omega)
    out = (1.0 - omega) * eps_neg + omega * eps_pos
    return np.where(eps_pos == eps_neg, eps_pos, out)


def should_inject(step_index: int, kind: str, config: InjectionConfig, total_steps: int) -> bool:
    """Gate for step ``step_index`` of a ``total_steps`` loop.

    The step's timestep in loop units runs ``total_steps, ..., 1``; injection is
    on while it exceeds ``frac * total_steps``.
    """
    if not 0 <= step_index < total_steps:
        raise IndexError(f"step index {step_index} outside [0, {total_steps})")
    frac = {"residual": config.thresh_res_frac, "attention": config.thresh_attn_frac}[kind]
    t = total_steps - step_index
    return t > frac * total_steps


class _StepHooks:
    def __init__(self, config: InjectionConfig, mask, res_on: bool, attn_on: bool, stored=None):
        self.res_layers = set(config.residual_layers) if res_on else set()
        self.attn_layers = set(config.attention_layers) if attn_on else set()
        self.mask = mask
        self._stored = stored or {}

    @property
    def active(self) -> bool:
        return bool(self.res_layers or self.attn_layers)

    def stored(self, layer, kind):
        return self._stored.get(layer, {}).get(kind)

    def residual(self, layer, f_src, f_pos, f_neg):
        if layer in self.res_layers:
            return inj_forward_res(f_src, f_pos, f_neg, self.mask)
        return f_pos, f_neg

    def attention(self, layer, q_src, q_pos, q_neg, k_src, k_pos, k_neg):
        if layer in self.attn_layers:
            return inj_forward_attn(q_src, q_pos, q_neg, k_src, k_pos, k_neg, self.mask)
        return q_pos, q_neg, k_pos, k_neg


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Captured source state for every sampling step.

    Latent mode keeps ``latents[i]`` = source latent at ``steps[i]``.  Feature
    mode keeps only the starting latent plus ``features[i][layer]`` holding
    ``f`` for residual layers and ``q``/``k`` for attention layers.
    """

    mode: str
    steps: tuple[int, ...]
    latents: list
    features: list | None = None
    residual_layers: tuple[int, ...] = ()
    attention_layers: tuple[int, ...] = ()
    header: dict = field(default_factory=dict)

    @property
    def z_T(self) -> np.ndarray:
        return self.latents[0]

    def check(self):
        if list(self.steps) != sorted(self.steps, reverse=True) or len(set(self.steps)) != len(self.steps):
            raise FormatError("trajectory steps must be strictly decreasing")
        if self.mode == LATENT and len(self.latents) != len(self.steps):
            raise FormatError(f"latent trajectory has {len(self.latents)} latents for {len(self.steps)} steps")
        if self.mode == FEATURE:
            if len(self.latents) != 1 or self.features is None or len(self.features) != len(self.steps):
                raise FormatError("feature trajectory needs one start latent and one feature set per step")

    def payload_bytes(self) -> int:
        return expected_payload_bytes(self.mode, len(self.steps), self.latents[0].shape,
                                      self._token_shape(), len(self.residual_layers),
                                      len(self.attention_layers))

    def _token_shape(self):
        if self.mode == FEATURE and self.features:
            for per_layer in self.features[0].values():
                for arr in per_layer.values():
                    return arr.shape
        return (0, 0)


def expected_payload_bytes(mode, S, latent_shape, token_shape, n_res, n_attn) -> int:
    """Analytic payload size (32-bit scalars).

    latent:  4 * S * prod(latent)
    feature: 4 * (prod(latent) + S * (n_res + 2 n_attn) * tokens * width)
    """
    lat = int(np.prod(latent_shape))
    if mode == LATENT:
        return 4 * S * lat
    return 4 * (lat + S * (n_res + 2 * n_attn) * int(np.prod(token_shape)))


def _traj_arrays(traj: Trajectory):
    if traj.mode == LATENT:
        yield from traj.latents
        return
    yield traj.latents[0]
    for step in traj.features:
        for l in traj.residual_layers:
            yield step[l]["f"]
        for l in traj.attention_layers:
            yield step[l]["q"]
            yield step[l]["k"]


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    traj.check()
    token_shape = list(traj._token_shape())
    header = {
        "format": "DTRJ",
        "version": 1,
        "mode": traj.mode,
        "steps": list(traj.steps),
        "latent_shape": list(traj.latents[0].shape),
        "token_shape": token_shape,
        "residual_layers": list(traj.residual_layers),
        "attention_layers": list(traj.attention_layers),
        "provenance": traj.header,
        "dtype": "<f4",
        "payload_bytes": traj.payload_bytes(),
    }
    blob = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    parts = [TRAJ_MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _traj_arrays(traj)]
    return b"".join(parts)


def trajectory_from_bytes(blob: bytes) -> Trajectory:
    h, payload = read_container(blob, TRAJ_MAGIC, "trajectory")
    mode, steps = h["mode"], tuple(h["steps"])
    lat_shape, tok_shape = tuple(h["latent_shape"]), tuple(h["token_shape"])
    res, attn = tuple(h["residual_layers"]), tuple(h["attention_layers"])
    want = expected_payload_bytes(mode, len(steps), lat_shape, tok_shape, len(res), len(attn))
    if want != len(payload):
        raise FormatError(f"trajectory: payload: expected {want} bytes from header shapes, found {len(payload)}")
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        return arr

    if mode == LATENT:
        latents, features = [take(lat_shape) for _ in steps], None
    else:
        latents, features = [take(lat_shape)], []
        for _ in steps:
            step = {}
            for l in res:
                step.setdefault(l, {})["f"] = take(tok_shape)
            for l in attn:
                d = step.setdefault(l, {})
                d["q"] = take(tok_shape)
                d["k"] = take(tok_shape)
            features.append(step)
    traj = Trajectory(mode, steps, latents, features, res, attn, h.get("provenance", {}))
    traj.check()
    return traj


def save_trajectory(traj: Trajectory, path):
    atomic_write(path, trajectory_to_bytes(traj))


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        return trajectory_from_bytes(fh.read())


def capture_features(model: DenoiserModel, z: np.ndarray, t: int, n: np.ndarray,
                     residual_layers, attention_layers) -> dict:
    """Taps of a null-condition forward, i.e. what the src chunk would compute."""
    _, taps = predict_noise(model, z, t, n, capture=True)
    out = {}
    for l in residual_layers:
        out.setdefault(l, {})["f"] = taps.f[l]
    for l in attention_layers:
        d = out.setdefault(l, {})
        d["q"] = taps.q[l]
        d["k"] = taps.k[l]
    return out


# --------------------------------------------------------------------------
# the Ditail loop
# --------------------------------------------------------------------------

def decode(z: np.ndarray) -> np.ndarray:
    """Identity latent space; clamp to the displayable range."""
    return np.clip(z, -1.0, 1.0)


def check_provenance(traj: Trajectory, target: DenoiserModel):
    sched = target.schedule
    if traj.header.get("schedule") != sched.digest() or tuple(traj.steps) != sched.sample_steps:
        raise ProvenanceError(
            f"trajectory schedule {traj.header.get('schedule')} ({len(traj.steps)} steps) does not match "
            f"target schedule {sched.digest()} ({sched.S} steps)")


def ditail(traj: Trajectory, p_pos: str, p_neg: str, target: DenoiserModel,
           config: InjectionConfig = InjectionConfig()) -> np.ndarray:
    """Inject the captured source into ``target`` while sampling; returns the image."""
    return ditail_latent(traj, p_pos, p_neg, target, config)[0]


def ditail_latent(traj, p_pos, p_neg, target, config=InjectionConfig()):
    check_provenance(traj, target)
    config.validate_for(target)
    feature_mode = traj.mode == FEATURE
    if feature_mode:
        if traj.header.get("architecture") != target.architecture():
            raise ConfigurationError("feature trajectory was captured from a different architecture")
        missing_r = set(config.residual_layers) - set(traj.residual_layers)
        missing_a = set(config.attention_layers) - set(traj.attention_layers)
        if missing_r or missing_a:
            raise ConfigurationError(
                f"feature trajectory lacks layers residual={sorted(missing_r)} attention={sorted(missing_a)}")
    cond = bundle(p_pos, p_neg, 1.0, 0.0, target.vocab)
    c_tilde = cond.c_tilde
    mask = config.token_mask(target)
    sched = target.schedule
    S = sched.S
    z = traj.z_T.astype(target.dtype, copy=True)
    for i, t in enumerate(sched.sample_steps):
        hooks = _StepHooks(config, mask,
                           should_inject(i, "residual", config, S),
                           should_inject(i, "attention", config, S),
                           traj.features[i] if feature_mode else None)
        if feature_mode or not hooks.active:
            # src chunk only feeds the hooks; skip its forward when nothing reads it
            z_src = None
        else:
            z_src = traj.latents[i].astype(target.dtype, copy=False)
        _, eps_pos, eps_neg = forward_batched3(target, (z_src, z, z), t, c_tilde, hooks=hooks)
        eps = guidance_combine(eps_pos, eps_neg, config.omega)
        z = ddim_step(z, eps, t, sched.prev_step(i), sched)
    return decode(z), z
