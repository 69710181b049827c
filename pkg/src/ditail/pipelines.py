"""End-to-end procedures built on the Ditail loop."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .conditioner import bundle
from .denoiser import DenoiserModel, DimensionError, predict_noise
from .injection import (FEATURE, LATENT, InjectionConfig, ProvenanceError, Trajectory,
                        capture_features, decode, ditail, guidance_combine)
from .numerics import Rng, derive_seed
from .schedule import ConfigurationError, ddim_invert_step, ddim_step, even_steps


class CodecError(DimensionError):
    """Image does not fit the model's patch grid."""


@dataclass
class GenerationRecord:
    image: np.ndarray
    z0: np.ndarray
    trajectory: Trajectory | None
    prompts: tuple[str, str]
    seed: int
    model: str
    omega: float


def initial_latent(model: DenoiserModel, seed: int) -> np.ndarray:
    c = model.config
    return Rng(derive_seed(seed, "z_T")).normal((c.channels, c.image_size, c.image_size), model.dtype)


def _provenance(model: DenoiserModel, kind: str, **extra) -> dict:
    out = {"kind": kind, "source_model": model.identity(), "architecture": model.architecture(),
           "schedule": model.schedule.digest()}
    out.update(extra)
    return out


def sample(model: DenoiserModel, z_T: np.ndarray, p_pos: str, p_neg: str, omega: float,
           capture: str | None = None, config: InjectionConfig = InjectionConfig()):
    """Guided DDIM sampling from ``z_T``; optionally records the source state.

    Returns ``(z0, latents, features)`` where the last two are ``None`` unless
    captured.
    """
    cond = bundle(p_pos, p_neg, 1.0, 0.0, model.vocab)
    sched = model.schedule
    z = z_T.astype(model.dtype, copy=True)
    latents = [] if capture == LATENT else None
    features = [] if capture == FEATURE else None
    for i, t in enumerate(sched.sample_steps):
        if latents is not None:
            latents.append(z.copy())
        if features is not None:
            features.append(capture_features(model, z, t, cond.n, config.residual_layers,
                                             config.attention_layers))
        eps_pos, _ = predict_noise(model, z, t, cond.e_pos)
        eps_neg, _ = predict_noise(model, z, t, cond.e_neg)
        z = ddim_step(z, guidance_combine(eps_pos, eps_neg, omega), t, sched.prev_step(i), sched)
    return z, latents, features


def generate(model: DenoiserModel, p_pos: str, p_neg: str = "", seed: int = 0, omega: float = 7.5,
             capture: bool = False, mode: str = LATENT,
             config: InjectionConfig = InjectionConfig()) -> GenerationRecord:
    z_T = initial_latent(model, seed)
    z0, latents, features = sample(model, z_T, p_pos, p_neg, omega, mode if capture else None, config)
    traj = None
    if capture:
        header = _provenance(model, "generate", prompts=[p_pos, p_neg], seed=int(seed), omega=float(omega))
        if mode == LATENT:
            traj = Trajectory(LATENT, model.schedule.sample_steps, latents, header=header)
        else:
            traj = Trajectory(FEATURE, model.schedule.sample_steps, [z_T.astype(model.dtype)], features,
                              config.residual_layers, config.attention_layers, header)
    return GenerationRecord(decode(z0), z0, traj, (p_pos, p_neg), int(seed), model.identity(), float(omega))


def encode_image(model: DenoiserModel, image: np.ndarray) -> np.ndarray:
    c = model.config
    image = np.asarray(image)
    if image.shape != (c.channels, c.image_size, c.image_size):
        raise CodecError(f"image shape {image.shape} does not match model grid "
                         f"{(c.channels, c.image_size, c.image_size)}")
    return image.astype(model.dtype)


def invert(image: np.ndarray, model: DenoiserModel, p_pos: str = "", p_neg: str = "",
           alpha: float = 2.0, beta: float = 0.5, inversion_steps: int | None = None,
           mode: str = LATENT, config: InjectionConfig = InjectionConfig()) -> Trajectory:
    """DDIM inversion under the scaled condition ``alpha e_pos - beta e_neg``.

    The noise estimate is re-evaluated at each current latent (no guidance).
    With ``inversion_steps`` finer than the sampling grid, the latents at the
    sampling timesteps are kept.
    """
    sched = model.schedule
    n_inv = inversion_steps or sched.S
    grid = sorted(even_steps(sched.T_train, n_inv))
    keep = set(sched.sample_steps)
    if not keep <= set(grid):
        raise ConfigurationError(f"{n_inv} inversion steps do not cover the {sched.S} sampling steps")
    cond = bundle(p_pos, p_neg, alpha, beta, model.vocab)
    z = encode_image(model, image).copy()
    t_prev = 0
    kept = {}
    for t in grid:
        eps, _ = predict_noise(model, z, t, cond.c_scaled)
        z = ddim_invert_step(z, eps, t_prev, t, sched)
        t_prev = t
        if t in keep:
            kept[t] = z.copy()
    latents = [kept[t] for t in sched.sample_steps]
    header = _provenance(model, "invert", prompts=[p_pos, p_neg], seed=0, alpha=float(alpha),
                         beta=float(beta), inversion_steps=n_inv)
    if mode == LATENT:
        return Trajectory(LATENT, sched.sample_steps, latents, header=header)
    feats = [capture_features(model, z_t, t, cond.n, config.residual_layers, config.attention_layers)
             for z_t, t in zip(latents, sched.sample_steps)]
    return Trajectory(FEATURE, sched.sample_steps, latents[:1], feats, config.residual_layers,
                      config.attention_layers, header)


def style_transfer(image: np.ndarray, inversion_model: DenoiserModel, target_model: DenoiserModel,
                   p_pos: str = "", p_neg: str = "", alpha: float = 2.0, beta: float = 0.5,
                   config: InjectionConfig = InjectionConfig(),
                   inversion_steps: int | None = None) -> np.ndarray:
    """Invert ``image`` with one model, then inject it into the target model."""
    traj = invert(image, inversion_model, p_pos, p_neg, alpha, beta, inversion_steps, config.mode, config)
    return ditail(traj, p_pos, p_neg, target_model, config)


def stylized_edit(image: np.ndarray, inversion_model: DenoiserModel, target_model: DenoiserModel,
                  p_edit_pos: str, p_edit_neg: str = "", alpha: float = 2.0, beta: float = 0.5,
                  omega: float = 7.5, config: InjectionConfig = InjectionConfig(),
                  inversion_prompts: tuple[str, str] = ("", ""),
                  inversion_steps: int | None = None) -> np.ndarray:
    """Style transfer whose sampling stage follows the edit prompts.

    Inversion uses ``inversion_prompts`` (caption or empty); with edit prompts
    equal to those, this is exactly :func:`style_transfer`.
    """
    inv_pos, inv_neg = inversion_prompts
    config = replace(config, omega=omega)
    traj = invert(image, inversion_model, inv_pos, inv_neg, alpha, beta, inversion_steps, config.mode, config)
    return ditail(traj, p_edit_pos, p_edit_neg, target_model, config)


def _check_family(models):
    digests = {m.schedule.digest() for m in models}
    if len(digests) != 1:
        raise ProvenanceError(f"models use different schedules: {sorted(digests)}")
    if len({m.architecture() for m in models}) != 1:
        raise ConfigurationError("models differ in architecture")


def novel_generation(p_pos: str, p_neg: str, model1: DenoiserModel, model2: DenoiserModel,
                     seed: int = 0, config: InjectionConfig = InjectionConfig()):
    """Two plain generations, then each one's content injected into the other model."""
    _check_family([model1, model2])
    r1 = generate(model1, p_pos, p_neg, seed, config.omega, capture=True, mode=config.mode, config=config)
    r2 = generate(model2, p_pos, p_neg, seed, config.omega, capture=True, mode=config.mode, config=config)
    i12 = ditail(r1.trajectory, p_pos, p_neg, model2, config)
    i21 = ditail(r2.trajectory, p_pos, p_neg, model1, config)
    return r1.image, r2.image, i12, i21


def transfer_matrix(models, p_pos: str, p_neg: str = "", seed: int = 0,
                    config: InjectionConfig = InjectionConfig()):
    """m x m cells: (i, i) plain generation of model i; (i, j) model i's content in model j."""
    if not models:
        raise ValueError("need at least one model")
    _check_family(models)
    records = [generate(m, p_pos, p_neg, seed, config.omega, capture=True, mode=config.mode, config=config)
               for m in models]
    grid = []
    for i, rec in enumerate(records):
        row = []
        for j, target in enumerate(models):
            row.append(rec.image if i == j else ditail(rec.trajectory, p_pos, p_neg, target, config))
        grid.append(row)
    return grid
