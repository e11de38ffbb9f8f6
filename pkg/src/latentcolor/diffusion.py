"""Noise schedules and the forward / reverse diffusion steps.

Schedule arrays are float64 numpy arrays. The step functions only multiply
their inputs by python scalars, so they accept numpy arrays and torch tensors
alike; :func:`q_closed` additionally accepts a batch of timesteps as a
``torch.LongTensor`` for use inside the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise variances and their derived products.

    ``timesteps`` maps schedule positions to the timestep the denoiser was
    trained on; it is ``arange(T)`` for a training schedule and a strided
    subsequence for an inference schedule.
    """

    betas: np.ndarray
    timesteps: np.ndarray = field(default=None)  # type: ignore[assignment]
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigurationError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ConfigurationError("every beta must lie strictly inside (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

        timesteps = self.timesteps
        if timesteps is None:
            timesteps = np.arange(betas.size)
        timesteps = np.asarray(timesteps, dtype=np.int64)
        if timesteps.shape != betas.shape:
            raise ConfigurationError("timesteps and betas must have the same length")
        if np.any(np.diff(timesteps) <= 0) or timesteps[0] < 0:
            raise ConfigurationError("timesteps must be non-negative and strictly increasing")
        timesteps.setflags(write=False)
        object.__setattr__(self, "timesteps", timesteps)

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alphas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ConfigurationError(f"timestep {t} outside [0, {self.T})")
        return t

    def to_dict(self) -> dict[str, Any]:
        return {"betas": self.betas.tolist(), "timesteps": self.timesteps.tolist()}


def linear_schedule(T: int, start: float, end: float) -> NoiseSchedule:
    """Betas spaced linearly from ``start`` to ``end`` inclusive.

    ``T == 1`` yields the single beta ``start``.
    """
    if int(T) != T or T < 1:
        raise ConfigurationError(f"step count must be a positive integer, got {T}")
    if not 0.0 < start <= end < 1.0:
        raise ConfigurationError(f"need 0 < start <= end < 1, got start={start}, end={end}")
    return NoiseSchedule(np.linspace(start, end, int(T), dtype=np.float64))


def strided_schedule(train: NoiseSchedule, T_infer: int) -> NoiseSchedule:
    """Select ``T_infer`` evenly spaced training timesteps for sampling.

    The selected positions are ``round((i + 1) * T / T_infer) - 1`` so the
    final training timestep is always kept. Betas are re-derived from the
    cumulative products so that ``alpha_bars`` at the kept timesteps are
    unchanged.
    """
    if int(T_infer) != T_infer or T_infer < 1:
        raise ConfigurationError(f"inference step count must be >= 1, got {T_infer}")
    if T_infer > train.T:
        raise ConfigurationError(
            f"cannot stride {train.T} training steps into {T_infer} inference steps"
        )
    if T_infer == train.T:
        return train
    positions = np.round(np.arange(1, T_infer + 1) * train.T / T_infer).astype(np.int64) - 1
    kept = train.alpha_bars[positions]
    previous = np.concatenate([[1.0], kept[:-1]])
    betas = 1.0 - kept / previous
    return NoiseSchedule(betas, timesteps=train.timesteps[positions])


def _check_same_shape(a: Any, b: Any, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_step(x_prev, t: int, sched: NoiseSchedule, noise):
    """One forward noising step: ``sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * noise``."""
    _check_same_shape(x_prev, noise, "q_step")
    t = sched.check_step(t)
    beta = float(sched.betas[t])
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def q_closed(x0, t, sched: NoiseSchedule, noise):
    """Jump straight from ``x0`` to step ``t``.

    ``t`` is either an int or a 1-D LongTensor holding one timestep per
    batch element (leading dimension of ``x0``).
    """
    _check_same_shape(x0, noise, "q_closed")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != x0.shape[0]:
            raise ShapeError(f"got {t.shape[0]} timesteps for a batch of {x0.shape[0]}")
        ab = torch.tensor(sched.alpha_bars, dtype=x0.dtype, device=x0.device)[t]
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    t = sched.check_step(t)
    ab = float(sched.alpha_bars[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def posterior_mean(x_t, x0, t: int, sched: NoiseSchedule):
    """Mean of ``q(x_{t-1} | x_t, x0)``; at ``t == 0`` this is ``x0``."""
    t = sched.check_step(t)
    if t == 0:
        return x0 * 1.0
    ab = float(sched.alpha_bars[t])
    ab_prev = float(sched.alpha_bars[t - 1])
    beta = float(sched.betas[t])
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(float(sched.alphas[t])) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t


def p_step(x_t, eps_hat, t: int, sched: NoiseSchedule, noise=None):
    """One reverse step using a noise prediction and fixed variance ``beta_t``.

    No noise is added at ``t == 0`` regardless of ``noise``.
    """
    _check_same_shape(x_t, eps_hat, "p_step")
    t = sched.check_step(t)
    beta = float(sched.betas[t])
    alpha = float(sched.alphas[t])
    ab = float(sched.alpha_bars[t])
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t == 0 or noise is None:
        return mean
    _check_same_shape(x_t, noise, "p_step")
    return mean + math.sqrt(beta) * noise
