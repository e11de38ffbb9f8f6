"""Conditioned UNet predicting the noise in a latent grid.

The conditioning latents are concatenated to the noisy latent along the
channel axis in the fixed order ``[noisy | grayscale | previous]``, which is
why the network takes nine input channels. The timestep enters every
residual block as an additive embedding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

CONCAT_ORDER = ("noisy", "grayscale", "previous")
LATENT_CHANNELS = 3


@dataclass
class DenoiserConfig:
    in_channels: int = 9
    out_channels: int = LATENT_CHANNELS
    inner_channels: int = 64
    channel_multiples: tuple[int, ...] = (1, 2, 3, 4)
    res_blocks_per_stage: int = 2
    attention_head_channels: int = 32
    attention_stages: int = 2
    dropout: float = 0.0
    latent_size: int = 32
    num_conditions: int = 2

    def __post_init__(self) -> None:
        self.channel_multiples = tuple(int(m) for m in self.channel_multiples)
        expected = LATENT_CHANNELS * (self.num_conditions + 1)
        if self.in_channels != expected:
            raise ConfigurationError(
                f"in_channels must be {expected} for {self.num_conditions} conditioning "
                f"latents, got {self.in_channels}"
            )
        if not self.channel_multiples or min(self.channel_multiples) < 1:
            raise ConfigurationError("channel_multiples must be non-empty and positive")
        if any(b < a for a, b in zip(self.channel_multiples, self.channel_multiples[1:])):
            raise ConfigurationError("channel_multiples must be non-decreasing")
        if self.inner_channels < 1 or self.res_blocks_per_stage < 1:
            raise ConfigurationError("inner_channels and res_blocks_per_stage must be positive")
        if self.attention_head_channels < 1:
            raise ConfigurationError("attention_head_channels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        reduction = 2 ** (len(self.channel_multiples) - 1)
        if self.latent_size < reduction or self.latent_size % reduction:
            raise ConfigurationError(
                f"latent_size {self.latent_size} is not divisible by the UNet reduction {reduction}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multiples"] = list(self.channel_multiples)
        return d


def _norm(channels: int) -> nn.GroupNorm:
    # Largest divisor <= 32 leaving >= 2 channels per group. Single-channel
    # groups would cancel per-channel shifts such as the timestep embedding.
    if channels < 2:
        return nn.GroupNorm(1, channels)
    groups = max(g for g in range(1, min(32, channels // 2) + 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style sine/cosine features of integer timesteps, ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(channels, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.channels).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float):
        super().__init__()
        self.in_layers = nn.Sequential(_norm(in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.emb_proj = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, out_ch))
        self.out_layers = nn.Sequential(
            _norm(out_ch), nn.SiLU(), nn.Dropout(dropout), nn.Conv2d(out_ch, out_ch, 3, padding=1)
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.in_layers(x)
        h = h + self.emb_proj(emb)[:, :, None, None]
        return self.skip(x) + self.out_layers(h)


class SelfAttention(nn.Module):
    def __init__(self, channels: int, head_channels: int):
        super().__init__()
        self.heads = max(1, channels // head_channels)
        if channels % self.heads:
            self.heads = 1
        self.norm = _norm(channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x).reshape(b, c, h * w))
        q, k, v = qkv.reshape(b * self.heads, 3 * c // self.heads, h * w).chunk(3, dim=1)
        scale = (c // self.heads) ** -0.5
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q * scale, k), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, h * w)
        return x + self.proj(out).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _Stage(nn.Module):
    def __init__(self, res: ResBlock, attn: nn.Module | None):
        super().__init__()
        self.res = res
        self.attn = attn if attn is not None else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        return self.attn(self.res(x, emb))


class Denoiser(nn.Module):
    """UNet noise predictor over ``(B, 9, h, w)`` conditioned inputs."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        base = cfg.inner_channels
        emb_dim = 4 * base
        levels = len(cfg.channel_multiples)
        attn_levels = set(range(max(0, levels - cfg.attention_stages), levels))

        def attn(ch: int, level: int) -> nn.Module | None:
            return SelfAttention(ch, cfg.attention_head_channels) if level in attn_levels else None

        self.time_embed = TimestepEmbedding(base, emb_dim)
        self.in_conv = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        self.down = nn.ModuleList()
        skip_channels = [base]
        ch = base
        for level, mult in enumerate(cfg.channel_multiples):
            out_ch = base * mult
            for _ in range(cfg.res_blocks_per_stage):
                self.down.append(_Stage(ResBlock(ch, out_ch, emb_dim, cfg.dropout), attn(out_ch, level)))
                ch = out_ch
                skip_channels.append(ch)
            if level < levels - 1:
                self.down.append(Downsample(ch))
                skip_channels.append(ch)

        self.mid = nn.ModuleList(
            [
                _Stage(ResBlock(ch, ch, emb_dim, cfg.dropout), SelfAttention(ch, cfg.attention_head_channels)),
                _Stage(ResBlock(ch, ch, emb_dim, cfg.dropout), None),
            ]
        )

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_multiples))):
            out_ch = base * mult
            for i in range(cfg.res_blocks_per_stage + 1):
                self.up.append(
                    _Stage(ResBlock(ch + skip_channels.pop(), out_ch, emb_dim, cfg.dropout), attn(out_ch, level))
                )
                ch = out_ch
            if level > 0:
                self.up.append(Upsample(ch))

        self.out = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, cfg.out_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected (B, {self.cfg.in_channels}, h, w) input, got {tuple(x.shape)}"
            )
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_embed(t)
        h = self.in_conv(x)
        skips = [h]
        for block in self.down:
            h = block(h, emb) if isinstance(block, _Stage) else block(h)
            skips.append(h)
        for block in self.mid:
            h = block(h, emb)
        for block in self.up:
            if isinstance(block, _Stage):
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
            else:
                h = block(h)
        return self.out(h)

    def predict_noise(
        self,
        z_t: torch.Tensor,
        z_bw: torch.Tensor,
        z_prev: torch.Tensor,
        t: torch.Tensor | int,
    ) -> torch.Tensor:
        """Noise estimate for ``z_t`` given grayscale and previous-frame latents."""
        for name, z in (("z_t", z_t), ("z_bw", z_bw), ("z_prev", z_prev)):
            if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS:
                raise ShapeError(f"{name} must be (B, {LATENT_CHANNELS}, h, w), got {tuple(z.shape)}")
        if not z_t.shape == z_bw.shape == z_prev.shape:
            raise ShapeError(
                f"latent shapes differ: z_t {tuple(z_t.shape)}, z_bw {tuple(z_bw.shape)}, "
                f"z_prev {tuple(z_prev.shape)}"
            )
        if not isinstance(t, torch.Tensor):
            t = torch.tensor(int(t), device=z_t.device)
        return self(torch.cat([z_t, z_bw, z_prev], dim=1), t.to(z_t.device))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_denoiser(cfg: DenoiserConfig | None = None, seed: int = 0) -> Denoiser:
    """Construct a denoiser whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    logger.info("built denoiser with %d parameters", parameter_count(model))
    return model
