"""Vector-quantized autoencoder supplying the latent space for diffusion.

Two stride-2 stages take a ``(B, 3, S, S)`` image to a ``(B, d, S/4, S/4)``
latent grid. Every latent vector is snapped to its nearest codebook entry
and the decoder mirrors the encoder back to pixel space. The codebook is
trained by its own loss term (no EMA updates) and the encoder receives the
decoder's gradient through the straight-through estimator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError

DOWNSAMPLE_FACTOR = 4


@dataclass
class VQVAEConfig:
    image_size: int = 128
    latent_dim: int = 3
    codebook_size: int = 512
    hidden_channels: tuple[int, int] = (64, 128)
    res_blocks: int = 1
    commitment_weight: float = 0.25
    codebook_init_scale: float = 1.0

    def __post_init__(self) -> None:
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if self.codebook_size < 1:
            raise ConfigurationError("codebook must hold at least one entry")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be positive")
        if len(self.hidden_channels) != 2 or min(self.hidden_channels) < 1:
            raise ConfigurationError("hidden_channels must be two positive widths")
        if self.image_size < DOWNSAMPLE_FACTOR or self.image_size % DOWNSAMPLE_FACTOR:
            raise ConfigurationError(
                f"image_size must be a multiple of {DOWNSAMPLE_FACTOR}, got {self.image_size}"
            )
        if self.commitment_weight < 0:
            raise ConfigurationError("commitment_weight must be non-negative")

    @property
    def latent_size(self) -> int:
        return self.image_size // DOWNSAMPLE_FACTOR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_channels"] = list(self.hidden_channels)
        return d


class Quantized(NamedTuple):
    zq: torch.Tensor
    """Straight-through quantized latent: forward value is the codebook vector."""
    codes: torch.Tensor
    """Raw codebook vectors (gradient flows to the codebook only)."""
    indices: torch.Tensor
    quant_error: torch.Tensor


class VQLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    codebook: torch.Tensor
    commit: torch.Tensor


@dataclass(frozen=True)
class LatentNorm:
    """Affine map between VQ latents and the diffusion space, ``(z - shift) * scale``.

    Centering matters as much as scaling: with a short noise schedule the
    most-noised training latent still carries a visible fraction of the data
    mean, which a pure Gaussian start would otherwise lack.
    """

    shift: tuple[float, ...] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ConfigurationError(f"latent scale must be finite and > 0, got {self.scale}")
        if not all(math.isfinite(s) for s in self.shift):
            raise ConfigurationError(f"latent shift must be finite, got {self.shift}")

    def _shift(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != len(self.shift):
            raise ShapeError(f"latent has {z.shape[1]} channels, shift has {len(self.shift)}")
        return torch.tensor(self.shift, dtype=z.dtype, device=z.device).view(1, -1, 1, 1)

    def apply(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self._shift(z)) * self.scale

    def invert(self, z: torch.Tensor) -> torch.Tensor:
        return z / self.scale + self._shift(z)

    def to_dict(self) -> dict:
        return {"shift": list(self.shift), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentNorm":
        return cls(tuple(d["shift"]), float(d["scale"]))


def nearest_codes(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row for every channel vector of ``z``.

    Args:
        z: ``(B, d, h, w)`` latent grid.
        codebook: ``(K, d)`` embedding matrix.

    Returns:
        ``(B, h, w)`` long tensor of indices into ``codebook``.
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ConfigurationError("codebook is empty")
    if z.ndim != 4 or z.shape[1] != codebook.shape[1]:
        raise ShapeError(
            f"latent of shape {tuple(z.shape)} does not match codebook dimension {codebook.shape[1]}"
        )
    b, d, h, w = z.shape
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, d)
    # Exact differences rather than the |a|^2 - 2ab + |b|^2 expansion, which
    # can flip near-ties in float32.
    dist = torch.cdist(flat, codebook.detach(), compute_mode="donot_use_mm_for_euclid_dist")
    return dist.argmin(dim=1).reshape(b, h, w)


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int, init_scale: float = 1.0):
        super().__init__()
        if codebook_size < 1:
            raise ConfigurationError("codebook must hold at least one entry")
        self.embedding = nn.Embedding(codebook_size, dim)
        nn.init.uniform_(self.embedding.weight, -init_scale, init_scale)
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))

    @property
    def codebook(self) -> torch.Tensor:
        return self.embedding.weight

    def forward(self, z: torch.Tensor) -> Quantized:
        indices = nearest_codes(z, self.codebook)
        codes = self.embedding(indices).permute(0, 3, 1, 2)
        if self.training:
            self.usage_counts += torch.bincount(
                indices.flatten(), minlength=self.usage_counts.numel()
            )
        quant_error = (z.detach() - codes.detach()).pow(2).sum(dim=1).mean()
        zq = z + (codes - z).detach()
        return Quantized(zq, codes, indices, quant_error)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class Encoder(nn.Module):
    def __init__(self, cfg: VQVAEConfig):
        super().__init__()
        c0, c1 = cfg.hidden_channels
        layers: list[nn.Module] = [nn.Conv2d(3, c0, 3, padding=1)]
        layers += [ResBlock(c0) for _ in range(cfg.res_blocks)]
        layers += [nn.Conv2d(c0, c1, 4, stride=2, padding=1), nn.ReLU()]
        layers += [nn.Conv2d(c1, c1, 4, stride=2, padding=1)]
        layers += [ResBlock(c1) for _ in range(cfg.res_blocks)]
        layers += [nn.ReLU(), nn.Conv2d(c1, cfg.latent_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: VQVAEConfig):
        super().__init__()
        c0, c1 = cfg.hidden_channels
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_dim, c1, 3, padding=1)]
        layers += [ResBlock(c1) for _ in range(cfg.res_blocks)]
        layers += [nn.ReLU(), nn.ConvTranspose2d(c1, c1, 4, stride=2, padding=1)]
        layers += [nn.ReLU(), nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)]
        layers += [ResBlock(c0) for _ in range(cfg.res_blocks)]
        layers += [nn.ReLU(), nn.Conv2d(c0, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class VQVAE(nn.Module):
    """Encoder, codebook quantizer and decoder.

    ``encode``/``quantize``/``decode`` are the inference surface; ``forward``
    returns everything :func:`vqvae_loss` needs during training.
    """

    def __init__(self, cfg: VQVAEConfig | None = None):
        super().__init__()
        self.cfg = cfg or VQVAEConfig()
        self.encoder = Encoder(self.cfg)
        self.quantizer = VectorQuantizer(
            self.cfg.codebook_size, self.cfg.latent_dim, self.cfg.codebook_init_scale
        )
        self.decoder = Decoder(self.cfg)

    def _check_image(self, x: torch.Tensor) -> None:
        s = self.cfg.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ShapeError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def _check_latent(self, z: torch.Tensor) -> None:
        s = self.cfg.latent_size
        if z.ndim != 4 or tuple(z.shape[1:]) != (self.cfg.latent_dim, s, s):
            raise ShapeError(
                f"expected latents of shape (B, {self.cfg.latent_dim}, {s}, {s}), got {tuple(z.shape)}"
            )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Continuous (pre-quantization) latent of a batch of images."""
        self._check_image(x)
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> Quantized:
        self._check_latent(z)
        return self.quantizer(z)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z)
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Decode a latent grid to images clamped to [0, 1]."""
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, Quantized]:
        z = self.encode(x)
        q = self.quantize(z)
        return self.decoder(q.zq), z, q

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.quantize(self.encode(x)).codes)


def vqvae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    z: torch.Tensor,
    codes: torch.Tensor,
    commitment_weight: float = 0.25,
) -> VQLoss:
    """Reconstruction, codebook and commitment terms.

    ``codes`` must be the raw codebook vectors (``Quantized.codes``), not the
    straight-through tensor, so that the codebook term reaches the embedding.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ")
    if z.shape != codes.shape:
        raise ShapeError(f"z {tuple(z.shape)} and codes {tuple(codes.shape)} differ")
    recon = F.mse_loss(x_hat, x)
    codebook = F.mse_loss(codes, z.detach())
    commit = F.mse_loss(z, codes.detach())
    return VQLoss(recon + codebook + commitment_weight * commit, recon, codebook, commit)
