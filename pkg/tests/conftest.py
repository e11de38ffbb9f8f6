"""Shared fixtures: tiny models, synthetic clips and the overfit experiment."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from latentcolor.dataset import FrameDataset, samples_from_frames
from latentcolor.denoiser import DenoiserConfig, build_denoiser
from latentcolor.diffusion import NoiseSchedule, q_closed
from latentcolor.pipeline import ColorizerModels
from latentcolor.synthetic import ORANGE_CHROMA, constant_chroma_clip
from latentcolor.trainer import (
    DiffusionTrainer,
    TrainConfig,
    VAETrainer,
    build_vqvae,
    encode_batch,
    estimate_latent_norm,
)
from latentcolor.vqvae import VQVAE, VQVAEConfig

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

OVERFIT_SIZE = 64
OVERFIT_CLIP_SEED = 1
VAE_STEPS = 400
DIFFUSION_STEPS = 1500
# Chroma pairs for the autoencoder corpus besides the orange target clip.
OTHER_CHROMAS = ((0.66, 0.40), (0.35, 0.35), (0.62, 0.62), (0.50, 0.50))


# -------------------------------------------------------- acceptance report


def pytest_configure(config):
    config._acceptance = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, text = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")


@pytest.fixture
def acceptance(request):
    """Record one criterion's outcome for the terminal summary, then assert it."""

    def record(number: int, ok: bool, text: str) -> None:
        request.config._acceptance[number] = (bool(ok), text)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")
        assert ok, f"criterion {number} failed: {text}"

    return record


# ----------------------------------------------------------------- helpers


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_vae_cfg():
    return VQVAEConfig(image_size=16, codebook_size=16, hidden_channels=(8, 8))


@pytest.fixture
def micro_vae(micro_vae_cfg) -> VQVAE:
    return build_vqvae(micro_vae_cfg, seed=0)


@pytest.fixture
def micro_denoiser_cfg():
    return DenoiserConfig(inner_channels=8, channel_multiples=(1, 2), attention_head_channels=8,
                          attention_stages=1, res_blocks_per_stage=1, latent_size=4)


@pytest.fixture
def micro_clip():
    return constant_chroma_clip(4, 16, seed=3)


@pytest.fixture
def micro_dataset(micro_clip):
    return FrameDataset(samples_from_frames(micro_clip))


# ------------------------------------------------------ overfit experiment


@dataclass
class OverfitVAE:
    vae: VQVAE
    frames: np.ndarray
    seconds: float


@dataclass
class Overfit:
    vae: VQVAE
    clip: np.ndarray
    trainer: DiffusionTrainer
    initial_loss: float
    final_loss: float
    seconds: float

    @property
    def models(self) -> ColorizerModels:
        return ColorizerModels(self.vae, self.trainer.denoiser, self.trainer.schedule,
                               self.trainer.latent_norm)


def fixed_eval_loss(trainer: DiffusionTrainer, dataset: FrameDataset, seed: int = 123) -> float:
    """Noise-MSE over every timestep with frozen noise, for before/after comparisons."""
    sched: NoiseSchedule = trainer.schedule
    color, gray3, prev = (torch.stack(p) for p in zip(*[dataset[i] for i in range(len(dataset))]))
    z_gt, z_bw, z_prev = encode_batch(trainer.vae, color, gray3, prev, trainer.latent_norm)
    t = torch.arange(sched.T)
    idx = t % len(dataset)
    noise = torch.randn((sched.T, *z_gt.shape[1:]), generator=torch.Generator().manual_seed(seed))
    model = trainer.denoiser
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z_t = q_closed(z_gt[idx], t, sched, noise)
        loss = float(((model.predict_noise(z_t, z_bw[idx], z_prev[idx], t) - noise) ** 2).mean())
    model.train(was_training)
    return loss


def autoencoder_corpus(size: int = OVERFIT_SIZE) -> np.ndarray:
    """8 frames: four from the orange clip plus one frame for each other chroma."""
    orange = constant_chroma_clip(8, size, seed=OVERFIT_CLIP_SEED, chroma=ORANGE_CHROMA)
    others = [constant_chroma_clip(1, size, seed=10 + k, chroma=c)[0] for k, c in enumerate(OTHER_CHROMAS)]
    return np.stack([orange[0], orange[2], orange[4], orange[6], *others])


@pytest.fixture(scope="session")
def overfit_vae() -> OverfitVAE:
    start = time.perf_counter()
    frames = autoencoder_corpus()
    cfg = VQVAEConfig(image_size=OVERFIT_SIZE, hidden_channels=(32, 64))
    vae = build_vqvae(cfg, seed=0)
    trainer = VAETrainer(vae, TrainConfig(batch_size=8, learning_rate=2e-3, seed=0, image_size=OVERFIT_SIZE))
    trainer.fit(FrameDataset(samples_from_frames(frames)), steps=VAE_STEPS)
    vae.eval()
    return OverfitVAE(vae, frames, time.perf_counter() - start)


@pytest.fixture(scope="session")
def overfit(overfit_vae: OverfitVAE) -> Overfit:
    start = time.perf_counter()
    vae = overfit_vae.vae
    clip = constant_chroma_clip(8, OVERFIT_SIZE, seed=OVERFIT_CLIP_SEED, chroma=ORANGE_CHROMA)
    dataset = FrameDataset(samples_from_frames(clip))
    tcfg = TrainConfig(batch_size=16, learning_rate=1e-3, seed=0, image_size=OVERFIT_SIZE)
    images = torch.stack([dataset[i][0] for i in range(len(dataset))])
    norm = estimate_latent_norm(vae, images)
    denoiser = build_denoiser(DenoiserConfig(inner_channels=32, latent_size=OVERFIT_SIZE // 4), seed=0)
    trainer = DiffusionTrainer(denoiser, vae, tcfg, norm)
    initial = fixed_eval_loss(trainer, dataset)
    trainer.fit(dataset, steps=DIFFUSION_STEPS)
    final = fixed_eval_loss(trainer, dataset)
    trainer.denoiser.eval()
    return Overfit(vae, clip, trainer, initial, final, time.perf_counter() - start)
