"""Optimization loops for the autoencoder and the latent denoiser.

Training runs in two phases: the VQ-VAE is trained first, then frozen while
the denoiser learns to predict the noise added to its latents. Every random
draw (batch indices, timesteps, noise) comes from one ``torch.Generator``
owned by the trainer, and its state is stored in checkpoints so a resumed run
continues exactly where the interrupted one stopped.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .denoiser import CONCAT_ORDER, Denoiser, DenoiserConfig, build_denoiser
from .diffusion import NoiseSchedule, linear_schedule, q_closed
from .errors import CheckpointError, ConfigurationError, NumericalError
from .vqvae import DOWNSAMPLE_FACTOR, LatentNorm, VQLoss, VQVAE, VQVAEConfig, vqvae_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    The defaults are desk-scale. The full-scale values are batch 256,
    350 epochs and learning rate 1.25e-7.
    """

    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    learning_rate: float = 1e-4
    seed: int = 0
    image_size: int = 128
    steps_train: int = 200
    linear_start: float = 1.5e-3
    linear_end: float = 0.0195
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be positive, got {self.max_steps}")
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.image_size < 1 or self.steps_train < 1:
            raise ConfigurationError("image_size and steps_train must be positive")
        if not 0.0 < self.linear_start <= self.linear_end < 1.0:
            raise ConfigurationError("need 0 < linear_start <= linear_end < 1")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.steps_train, self.linear_start, self.linear_end)

    def total_steps(self, n_samples: int) -> int:
        steps = self.epochs * math.ceil(n_samples / self.batch_size)
        return min(steps, self.max_steps) if self.max_steps is not None else steps


def build_vqvae(cfg: VQVAEConfig | None = None, seed: int = 0) -> VQVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VQVAE(cfg)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def parameter_checksum(model: nn.Module) -> float:
    with torch.no_grad():
        return float(sum(p.double().abs().sum() + p.double().sum() for p in model.parameters()))


# ------------------------------------------------------------------- steps


def vae_train_step(batch: torch.Tensor, vae: VQVAE, optimizer: torch.optim.Optimizer) -> VQLoss:
    """One Adam step on the VQ-VAE loss; returns detached loss components."""
    vae.train()
    x_hat, z, q = vae(batch)
    loss = vqvae_loss(batch, x_hat, z, q.codes, vae.cfg.commitment_weight)
    if not torch.isfinite(loss.total):
        raise NumericalError(
            f"non-finite autoencoder loss {loss.total.item()} "
            f"(batch mean {batch.mean().item():.4g}, latent std {z.std().item():.4g})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return VQLoss(*(v.detach() for v in loss))


@torch.no_grad()
def encode_batch(
    vae: VQVAE,
    color: torch.Tensor,
    gray3: torch.Tensor,
    previous: torch.Tensor,
    norm: LatentNorm | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Normalized latents ``(z_gt, z_bw, z_prev)``; the target is quantized, conditions are not."""
    norm = norm or LatentNorm()
    z_gt = vae.quantize(vae.encode(color)).codes
    return norm.apply(z_gt), norm.apply(vae.encode(gray3)), norm.apply(vae.encode(previous))


def denoising_loss(
    model: Denoiser,
    z_gt: torch.Tensor,
    z_bw: torch.Tensor,
    z_prev: torch.Tensor,
    t: torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """MSE between injected noise and the model's prediction of it."""
    z_t = q_closed(z_gt, t, sched, noise)
    return F.mse_loss(model.predict_noise(z_t, z_bw, z_prev, t), noise)


def diffusion_train_step(
    batch: Sequence[torch.Tensor],
    model: Denoiser,
    vae: VQVAE,
    sched: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    norm: LatentNorm | None = None,
) -> float:
    """One Adam step of teacher-forced denoiser training.

    ``batch`` is ``(color, gray3, previous)`` with ground-truth previous
    frames. The autoencoder is used read-only.
    """
    color, gray3, previous = batch
    z_gt, z_bw, z_prev = encode_batch(vae, color, gray3, previous, norm)
    t = torch.randint(0, sched.T, (z_gt.shape[0],), generator=generator)
    noise = torch.randn(z_gt.shape, generator=generator, dtype=z_gt.dtype)
    model.train()
    loss = denoising_loss(model, z_gt, z_bw, z_prev, t, noise, sched)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite denoising loss {loss.item()} at timesteps {t.tolist()} "
            f"(z_gt mean {z_gt.mean().item():.4g} std {z_gt.std().item():.4g})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def estimate_latent_norm(vae: VQVAE, images: torch.Tensor) -> LatentNorm:
    """Per-channel mean and reciprocal overall std of quantized latents over ``images``."""
    codes = vae.quantize(vae.encode(images)).codes.double()
    mean = codes.mean(dim=(0, 2, 3))
    std = float((codes - mean.view(1, -1, 1, 1)).std())
    if not math.isfinite(std):
        raise NumericalError(f"non-finite latent spread {std}; cannot normalize latents")
    if std == 0.0:
        # Every vector maps to one code (e.g. a barely trained autoencoder).
        logger.warning("all latents share one codebook entry; using latent scale 1")
        return LatentNorm(tuple(mean.tolist()), 1.0)
    return LatentNorm(tuple(mean.tolist()), 1.0 / std)


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    kind: str
    model: nn.Module
    meta: dict[str, Any]
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    step: int = 0


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(
    path: str | Path,
    kind: str,
    model: nn.Module,
    meta: dict[str, Any],
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    step: int = 0,
) -> Path:
    """Write ``path`` (tensor blob) and ``path.json`` (human-readable sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": generator.get_state() if generator is not None else None,
        "step": step,
    }
    torch.save(blob, path)
    sidecar = {"version": CHECKPOINT_VERSION, "kind": kind, "step": step, **meta}
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def vqvae_meta(vae: VQVAE) -> dict[str, Any]:
    cfg = vae.cfg
    return {
        "config": cfg.to_dict(),
        "K": cfg.codebook_size,
        "d": cfg.latent_dim,
        "downsample_factor": DOWNSAMPLE_FACTOR,
        "image_size": cfg.image_size,
    }


def denoiser_meta(model: Denoiser, sched_cfg: TrainConfig, norm: LatentNorm) -> dict[str, Any]:
    return {
        "config": model.cfg.to_dict(),
        "concat_order": list(CONCAT_ORDER),
        "schedule": {
            "steps_train": sched_cfg.steps_train,
            "linear_start": sched_cfg.linear_start,
            "linear_end": sched_cfg.linear_end,
        },
        "latent_norm": norm.to_dict(),
    }


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    """Rebuild a model from its blob and sidecar.

    Raises:
        CheckpointError: missing files, unreadable sidecar, version or kind
            mismatch, or parameters that do not fit the recorded config.
    """
    path = Path(path)
    side = _sidecar(path)
    if not path.is_file() or not side.is_file():
        raise CheckpointError(f"checkpoint {path} or its sidecar {side} is missing")
    try:
        meta = json.loads(side.read_text())
        version = meta["version"]
        kind = meta["kind"]
        config = meta["config"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted checkpoint sidecar {side}: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}; this build reads {CHECKPOINT_VERSION}"
        )
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"checkpoint {path} holds a {kind!r}, expected {expect_kind!r}")
    try:
        if kind == "vqvae":
            model: nn.Module = VQVAE(VQVAEConfig(**config))
        elif kind == "denoiser":
            if tuple(meta.get("concat_order", ())) != CONCAT_ORDER:
                raise CheckpointError(
                    f"checkpoint {path} was trained with concat order {meta.get('concat_order')}"
                )
            model = Denoiser(DenoiserConfig(**config))
        else:
            raise CheckpointError(f"unknown checkpoint kind {kind!r} in {side}")
    except (TypeError, ConfigurationError) as exc:
        raise CheckpointError(f"invalid model config in {side}: {exc}") from exc
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(blob["model"])
    except (RuntimeError, KeyError, OSError) as exc:
        raise CheckpointError(f"cannot restore parameters from {path}: {exc}") from exc
    return Checkpoint(kind, model, meta, blob.get("optimizer"), blob.get("rng"), int(blob.get("step", 0)))


# ----------------------------------------------------------------- trainers


class _BaseTrainer:
    kind = ""

    def __init__(self, model: nn.Module, cfg: TrainConfig, log_path: str | Path | None = None):
        self.model = model
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step_count = 0
        self.log_path = Path(log_path) if log_path is not None else None
        self._t0 = time.monotonic()

    def sample_indices(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)[: min(self.cfg.batch_size, n)]

    def _log(self, record: dict[str, Any]) -> None:
        record = {"step": self.step_count, **record, "lr": self.cfg.learning_rate,
                  "wallclock": round(time.monotonic() - self._t0, 3)}
        if self.step_count % max(self.cfg.log_every, 1) == 0:
            logger.info("%s step %d: %s", self.kind, self.step_count, record)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def save(self, path: str | Path) -> Path:
        raise NotImplementedError

    def _maybe_checkpoint(self, path: str | Path | None) -> None:
        every = self.cfg.checkpoint_every
        if path is not None and every and self.step_count % every == 0:
            self.save(path)

    def _restore(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.model.state_dict())
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            self.generator.set_state(ckpt.rng_state)
        self.step_count = ckpt.step


def _collate(dataset, indices: torch.Tensor) -> tuple[torch.Tensor, ...]:
    items = [dataset[int(i)] for i in indices]
    return tuple(torch.stack(parts) for parts in zip(*items))


class VAETrainer(_BaseTrainer):
    """Trains a VQ-VAE on the color frames of a dataset."""

    kind = "vqvae"

    def __init__(self, vae: VQVAE, cfg: TrainConfig, log_path: str | Path | None = None):
        super().__init__(vae, cfg, log_path)
        self.vae = vae

    def step(self, batch: torch.Tensor) -> VQLoss:
        loss = vae_train_step(batch, self.vae, self.optimizer)
        self.step_count += 1
        self._log({k: float(v) for k, v in loss._asdict().items()})
        return loss

    def fit(self, dataset, steps: int | None = None, checkpoint_path: str | Path | None = None,
            callback: Callable[[int, VQLoss], None] | None = None) -> list[float]:
        steps = steps if steps is not None else self.cfg.total_steps(len(dataset))
        history = []
        for _ in range(steps):
            color = _collate(dataset, self.sample_indices(len(dataset)))[0]
            loss = self.step(color)
            history.append(float(loss.total))
            if callback is not None:
                callback(self.step_count, loss)
            self._maybe_checkpoint(checkpoint_path)
        return history

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.kind, self.vae, vqvae_meta(self.vae),
                               self.optimizer, self.generator, self.step_count)

    @classmethod
    def resume(cls, path: str | Path, cfg: TrainConfig, log_path: str | Path | None = None) -> "VAETrainer":
        ckpt = load_checkpoint(path, "vqvae")
        trainer = cls(ckpt.model, cfg, log_path)  # type: ignore[arg-type]
        trainer._restore(ckpt)
        return trainer


class DiffusionTrainer(_BaseTrainer):
    """Trains a denoiser on latents of a frozen VQ-VAE."""

    kind = "denoiser"

    def __init__(self, model: Denoiser, vae: VQVAE, cfg: TrainConfig, norm: LatentNorm | None = None,
                 log_path: str | Path | None = None):
        super().__init__(model, cfg, log_path)
        self.denoiser = model
        self.vae = freeze(vae)
        self.schedule = cfg.schedule()
        self.latent_norm = norm or LatentNorm()

    def step(self, batch: Sequence[torch.Tensor]) -> float:
        loss = diffusion_train_step(batch, self.denoiser, self.vae, self.schedule, self.optimizer,
                                    self.generator, self.latent_norm)
        self.step_count += 1
        self._log({"loss": loss})
        return loss

    def fit(self, dataset, steps: int | None = None, checkpoint_path: str | Path | None = None,
            callback: Callable[[int, float], None] | None = None) -> list[float]:
        steps = steps if steps is not None else self.cfg.total_steps(len(dataset))
        history = []
        for _ in range(steps):
            loss = self.step(_collate(dataset, self.sample_indices(len(dataset))))
            history.append(loss)
            if callback is not None:
                callback(self.step_count, loss)
            self._maybe_checkpoint(checkpoint_path)
        return history

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.kind, self.denoiser,
                               denoiser_meta(self.denoiser, self.cfg, self.latent_norm),
                               self.optimizer, self.generator, self.step_count)

    @classmethod
    def resume(cls, path: str | Path, vae: VQVAE, cfg: TrainConfig,
               log_path: str | Path | None = None) -> "DiffusionTrainer":
        ckpt = load_checkpoint(path, "denoiser")
        norm = LatentNorm.from_dict(ckpt.meta["latent_norm"])
        trainer = cls(ckpt.model, vae, cfg, norm, log_path)  # type: ignore[arg-type]
        trainer._restore(ckpt)
        return trainer


def new_diffusion_trainer(
    vae: VQVAE,
    dataset,
    cfg: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    log_path: str | Path | None = None,
    scale_samples: int = 64,
) -> DiffusionTrainer:
    """Fresh denoiser plus latent normalization estimated from the first frames of ``dataset``."""
    freeze(vae)
    n = min(len(dataset), scale_samples)
    images = torch.stack([dataset[i][0] for i in range(n)])
    norm = estimate_latent_norm(vae, images)
    model = build_denoiser(denoiser_cfg, cfg.seed)
    return DiffusionTrainer(model, vae, cfg, norm, log_path)
