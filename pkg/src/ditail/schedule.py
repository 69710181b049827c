"""Variance schedule, forward noising and the DDPM / DDIM update rules."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    pass


class TimestepRangeError(IndexError):
    pass


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Linear-beta schedule over ``T_train`` steps plus an inference step subset.

    ``alphas[t - 1]`` is the retention factor of step ``t`` (1-based).  Timestep 0
    denotes clean data, so :meth:`alpha_bar` returns 1.0 there.
    """

    T_train: int
    beta_start: float
    beta_end: float
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sample_steps: tuple[int, ...]

    def alpha(self, t: int) -> float:
        self._check(t, allow_zero=False)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def _check(self, t, allow_zero):
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T_train) or int(t) != t:
            raise TimestepRangeError(f"timestep {t} outside [{lo}, {self.T_train}]")

    @property
    def S(self) -> int:
        return len(self.sample_steps)

    def prev_step(self, i: int) -> int:
        """Timestep reached after sampling step ``i`` (0 after the last one)."""
        return self.sample_steps[i + 1] if i + 1 < self.S else 0

    def with_steps(self, S: int) -> "Schedule":
        return make_schedule(self.T_train, self.beta_start, self.beta_end, S)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.T_train}:{self.beta_start!r}:{self.beta_end!r}:".encode())
        h.update(",".join(map(str, self.sample_steps)).encode())
        return h.hexdigest()[:16]


def even_steps(T_train: int, S: int) -> tuple[int, ...]:
    """``S`` evenly spaced timesteps, descending, ending at ``T_train / S``-ish."""
    return tuple(int(round(T_train * (S - i) / S)) for i in range(S))


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                  S: int = 50) -> Schedule:
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not (1 <= S <= T_train):
        raise ConfigurationError(f"need 1 <= S <= T_train, got S={S}, T_train={T_train}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alphas.flags.writeable = False
    alpha_bars.flags.writeable = False
    return Schedule(T_train, float(beta_start), float(beta_end), alphas, alpha_bars,
                    even_steps(T_train, S))


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = sched.alpha_bar(t)
    if t == 0:
        return z0.copy()
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def forward_step(z_prev: np.ndarray, t: int, eps: np.ndarray, sched: Schedule) -> np.ndarray:
    """One Markov step of the forward chain: ``sqrt(a_t) z_{t-1} + sqrt(1 - a_t) eps``."""
    a = sched.alpha(t)
    return math.sqrt(a) * z_prev + math.sqrt(1.0 - a) * eps


def ddpm_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: Schedule) -> np.ndarray:
    """Posterior-mean update ``(z_t - (1 - a_t) / sqrt(1 - abar_t) eps) / sqrt(a_t)``.

    Kept as a reference; the pipelines sample with :func:`ddim_step`.
    """
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {z_t.shape} vs {eps_hat.shape}")
    a = sched.alpha(t)
    ab = sched.alpha_bar(t)
    return (1.0 / math.sqrt(a)) * (z_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: Schedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from ``t`` down to ``t_prev``."""
    if not t > t_prev >= 0:
        raise OrderingError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {z_t.shape} vs {eps_hat.shape}")
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_invert_step(z_prev: np.ndarray, eps_hat: np.ndarray, t_prev: int, t: int,
                     sched: Schedule) -> np.ndarray:
    """Algebraic inverse of :func:`ddim_step` for a fixed noise estimate."""
    if not t > t_prev >= 0:
        raise OrderingError(f"ddim_invert_step needs t > t_prev >= 0, got t_prev={t_prev}, t={t}")
    if z_prev.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {z_prev.shape} vs {eps_hat.shape}")
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    z0_hat = (z_prev - math.sqrt(1.0 - ab_prev) * eps_hat) / math.sqrt(ab_prev)
    return math.sqrt(ab) * z0_hat + math.sqrt(1.0 - ab) * eps_hat
