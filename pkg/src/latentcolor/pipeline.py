"""Autoregressive video colorization.

Each frame is sampled by running the reverse diffusion process from pure
Gaussian noise in latent space, conditioned on the grayscale frame and on
the previously emitted color frame. The first frame is conditioned either on
a user-supplied exemplar or on a neutral-chroma copy of itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .color_space import check_gray, check_rgb, gray_to_rgb3, luminance_overlay
from .dataset import from_chw, to_chw
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, linear_schedule, p_step, strided_schedule
from .errors import ConfigurationError, ShapeError
from .trainer import freeze, load_checkpoint
from .vqvae import LatentNorm, VQVAE

CONDITION_MODES = ("autoregressive", "zeroed")

FrameHook = Callable[[int, "np.ndarray | None", np.ndarray], None]


@dataclass
class ColorizerModels:
    vae: VQVAE
    denoiser: Denoiser
    train_schedule: NoiseSchedule
    latent_norm: LatentNorm = field(default_factory=LatentNorm)

    def __post_init__(self) -> None:
        if self.vae is None or self.denoiser is None:
            raise ConfigurationError("both an autoencoder and a denoiser are required")
        freeze(self.vae)
        freeze(self.denoiser)

    @property
    def image_size(self) -> int:
        return self.vae.cfg.image_size


def load_models(vae_path: str | Path, denoiser_path: str | Path) -> ColorizerModels:
    vae_ckpt = load_checkpoint(vae_path, "vqvae")
    den_ckpt = load_checkpoint(denoiser_path, "denoiser")
    sched = den_ckpt.meta["schedule"]
    return ColorizerModels(
        vae_ckpt.model,  # type: ignore[arg-type]
        den_ckpt.model,  # type: ignore[arg-type]
        linear_schedule(sched["steps_train"], sched["linear_start"], sched["linear_end"]),
        LatentNorm.from_dict(den_ckpt.meta["latent_norm"]),
    )


def frame_generator(seed: int, frame_index: int) -> torch.Generator:
    """Generator seeded from ``(seed, frame_index)`` only, independent of clip length."""
    state = np.random.SeedSequence([int(seed), int(frame_index)]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


@torch.no_grad()
def _encode(models: ColorizerModels, img: np.ndarray) -> torch.Tensor:
    return models.latent_norm.apply(models.vae.encode(to_chw(img)[None]))


@torch.no_grad()
def sample_latent(
    models: ColorizerModels,
    z_bw: torch.Tensor,
    z_prev: torch.Tensor,
    sched_infer: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Reverse diffusion from Gaussian noise under fixed conditioning latents."""
    z = torch.randn(z_bw.shape, generator=generator)
    for i in reversed(range(sched_infer.T)):
        eps = models.denoiser.predict_noise(z, z_bw, z_prev, int(sched_infer.timesteps[i]))
        noise = torch.randn(z.shape, generator=generator) if i > 0 else None
        z = p_step(z, eps, i, sched_infer, noise)
    return z


@torch.no_grad()
def decode_latent(models: ColorizerModels, z: torch.Tensor) -> np.ndarray:
    codes = models.vae.quantize(models.latent_norm.invert(z)).codes
    return from_chw(models.vae.decode(codes)[0])


def _check_frame(models: ColorizerModels, gray: np.ndarray) -> np.ndarray:
    gray = check_gray(np.asarray(gray, dtype=np.float64), "gray")
    s = models.image_size
    if gray.shape != (s, s):
        raise ShapeError(f"frames must be {s}x{s} for this model, got {gray.shape}")
    return gray


def colorize_frame(
    gray: np.ndarray,
    prev_color: np.ndarray | None,
    models: ColorizerModels,
    sched_infer: NoiseSchedule,
    generator: torch.Generator,
) -> np.ndarray:
    """Sample one color frame for ``gray`` conditioned on ``prev_color``.

    Passing ``prev_color=None`` replaces the previous-frame latent with zeros
    (the ablation without temporal conditioning).
    """
    gray = _check_frame(models, gray)
    z_bw = _encode(models, gray_to_rgb3(gray))
    if prev_color is None:
        z_prev = torch.zeros_like(z_bw)
    else:
        prev_color = check_rgb(np.asarray(prev_color, dtype=np.float64), "prev_color")
        if prev_color.shape[:2] != gray.shape:
            raise ShapeError(f"previous frame {prev_color.shape[:2]} does not match {gray.shape}")
        z_prev = _encode(models, prev_color)
    z0 = sample_latent(models, z_bw, z_prev, sched_infer, generator)
    return decode_latent(models, z0)


def bootstrap_first_frame(
    gray: np.ndarray,
    models: ColorizerModels,
    sched_infer: NoiseSchedule,
    generator: torch.Generator,
) -> np.ndarray:
    """Colorize a frame with no predecessor, using its own gray copy as the condition."""
    gray = _check_frame(models, gray)
    return colorize_frame(gray, gray_to_rgb3(gray), models, sched_infer, generator)


@dataclass
class ColorizeRequest:
    gray_frames: Sequence[np.ndarray]
    exemplar: np.ndarray | None = None
    seed: int = 0
    steps_infer: int = 50
    overlay: bool = False
    condition: str = "autoregressive"

    def __post_init__(self) -> None:
        if len(self.gray_frames) < 1:
            raise ConfigurationError("a colorize request needs at least one frame")
        shapes = {np.shape(f) for f in self.gray_frames}
        if len(shapes) != 1:
            raise ShapeError(f"frames differ in size: {sorted(shapes)}")
        if self.exemplar is not None:
            check_rgb(self.exemplar, "exemplar")
            if np.shape(self.exemplar)[:2] != next(iter(shapes)):
                raise ShapeError(
                    f"exemplar {np.shape(self.exemplar)[:2]} does not match frames {next(iter(shapes))}"
                )
        if self.condition not in CONDITION_MODES:
            raise ConfigurationError(f"condition must be one of {CONDITION_MODES}")


@dataclass
class ColorizeResult:
    color_frames: list[np.ndarray]
    per_frame_runtime: list[float] = field(default_factory=list)


def colorize_video(
    req: ColorizeRequest,
    models: ColorizerModels,
    on_frame: FrameHook | None = None,
) -> ColorizeResult:
    """Colorize frames in order, each conditioned on the one emitted before it.

    ``on_frame(index, condition, output)`` is called after every frame with
    the color image used as the previous-frame condition (``None`` when the
    condition is zeroed) and the emitted frame.
    """
    sched = strided_schedule(models.train_schedule, req.steps_infer)
    outputs: list[np.ndarray] = []
    runtimes: list[float] = []
    for i, gray in enumerate(req.gray_frames):
        gray = _check_frame(models, gray)
        start = time.perf_counter()
        if req.condition == "zeroed":
            condition = None
        elif i > 0:
            condition = outputs[-1]
        elif req.exemplar is not None:
            condition = np.asarray(req.exemplar, dtype=np.float64)
        else:
            condition = gray_to_rgb3(gray)
        frame = colorize_frame(gray, condition, models, sched, frame_generator(req.seed, i))
        if req.overlay:
            frame = luminance_overlay(frame, gray)
        runtimes.append(time.perf_counter() - start)
        outputs.append(frame)
        if on_frame is not None:
            on_frame(i, condition, frame)
    return ColorizeResult(outputs, runtimes)
