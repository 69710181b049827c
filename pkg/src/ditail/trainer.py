"""Denoising score-matching training with plain SGD on the recorded tape."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .conditioner import encode_prompt
from .numerics import Tape, backward, derive_seed, Rng
from .synth import STYLES, Sample, StyleSpec, datagen

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: dn.DenoiserModel
    losses: list = field(default_factory=list)


def batch_loss(model: dn.DenoiserModel, images: np.ndarray, conds: np.ndarray, ts: np.ndarray,
               eps: np.ndarray, tape: Tape | None = None):
    """Mean ``|eps - eps_hat(z_t, t, c)|^2 / abar_t`` over a batch.

    ``images``/``eps`` are (B, C, H, W), ``conds`` (B, d_c), ``ts`` (B,) ints.
    With a tape, returns ``(loss_var, {param name: leaf})``; otherwise a float.
    """
    cfg = model.config
    sched = model.schedule
    ab = np.array([sched.alpha_bar(int(t)) for t in ts])
    dt = model.dtype
    a = np.sqrt(ab).astype(dt)[:, None, None, None]
    s = np.sqrt(1.0 - ab).astype(dt)[:, None, None, None]
    z_t = a * images + s * eps
    tokens = dn.patchify(z_t, cfg.patch)
    # v target: |net - v|^2 equals the noise error weighted by 1 / abar_t
    target = dn.patchify(a * eps - s * images, cfg.patch)
    tfeat = model._time_table()[ts][:, None, :]
    c = conds.astype(dt)[:, None, :]
    ops = tape if tape is not None else dn.EVAL
    if tape is not None:
        P = OrderedDict((k, tape.leaf(v, trainable=True, name=k)) for k, v in model.params.items())
    else:
        P = model.params
    h, temb = dn.embed(ops, P, cfg, tokens, tfeat)
    for l in range(cfg.layers):
        f = dn.residual_block(ops, P, l, h, temb)
        q, k, v = dn.qkv(ops, P, l, f)
        h = dn.cross_block(ops, P, l, dn.attention_block(ops, P, l, f, q, k, v), c)
    loss = ops.mean_square(dn.readout(ops, P, h), target)
    if tape is not None:
        return loss, P
    return float(loss)


def draw_batch(data: list[Sample], model: dn.DenoiserModel, batch: int, seed: int, step: int):
    """Indices, timesteps and noise for one step; derived from (seed, step) only."""
    rng = Rng(derive_seed(seed, "train-step", step))
    idx = rng.integers(0, len(data), (batch,))
    ts = rng.integers(1, model.config.T_train + 1, (batch,))
    c = model.config
    eps = rng.normal((batch, c.channels, c.image_size, c.image_size), model.dtype)
    return idx, ts, eps


def _stack(data, vocab, dtype):
    images = np.stack([s.image for s in data]).astype(dtype)
    cache = {}
    for s in data:
        if s.caption not in cache:
            cache[s.caption] = encode_prompt(s.caption, vocab)
    conds = np.stack([cache[s.caption] for s in data]).astype(dtype)
    return images, conds


def train(model: dn.DenoiserModel, data: list[Sample], steps: int, lr: float, seed: int,
          batch: int = 32, log_every: int = 100) -> TrainResult:
    """SGD on the epsilon-prediction loss; returns a new model, input untouched."""
    if not data:
        raise TrainingError("training data is empty")
    if not lr > 0:
        raise TrainingError(f"learning rate must be positive, got {lr}")
    model = model.copy()
    images, conds = _stack(data, model.vocab, model.dtype)
    losses = []
    for step in range(steps):
        idx, ts, eps = draw_batch(data, model, batch, seed, step)
        tape = Tape()
        loss, leaves = batch_loss(model, images[idx], conds[idx], ts, eps, tape)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        grads = backward(tape, loss)
        for name, leaf in leaves.items():
            g = grads[leaf.index]
            model.params[name] = (model.params[name] - np.asarray(lr, model.dtype) * g).astype(model.dtype)
        losses.append(value)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.5f", step, value)
    prov = dict(model.provenance)
    prov.setdefault("training", []).append(
        {"steps": steps, "lr": lr, "seed": seed, "batch": batch, "samples": len(data),
         "final_loss": losses[-1] if losses else None})
    model.provenance = prov
    return TrainResult(model, losses)


def finetune(base: dn.DenoiserModel, style: StyleSpec | str, steps: int, lr: float, seed: int,
             n_samples: int = 512, batch: int = 32, data_seed: int | None = None) -> TrainResult:
    """Continue training ``base`` on one style's data."""
    if isinstance(style, str):
        style = STYLES[style]
    data = datagen(style, n_samples, base.config.image_size,
                   seed if data_seed is None else data_seed, base.config.patch)
    result = train(base, data, steps, lr, seed, batch)
    prov = dict(result.model.provenance)
    prov["finetune"] = {"style": style.name, "base": base.identity(), "steps": steps, "lr": lr, "seed": seed}
    prov["style"] = style.name
    result.model.provenance = prov
    return result
