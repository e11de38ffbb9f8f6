"""Run configuration shared by every CLI command.

Config files are flat JSON objects whose keys match :class:`RunConfig`
fields; every field is also exposed as a ``--kebab-case`` flag that overrides
the file value.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .denoiser import DenoiserConfig
from .diffusion import linear_schedule, strided_schedule
from .errors import ConfigurationError
from .trainer import TrainConfig
from .vqvae import VQVAEConfig

SEED_ENV = "LATENTCOLOR_SEED"


@dataclass
class RunConfig:
    seed: int | None = None
    image_size: int = 128
    # paths
    train_manifest: str | None = None
    vae_checkpoint: str = "runs/vqvae.pt"
    denoiser_checkpoint: str = "runs/denoiser.pt"
    run_dir: str = "runs"
    # autoencoder
    codebook_size: int = 512
    vae_hidden_channels: tuple[int, ...] = (64, 128)
    vae_res_blocks: int = 1
    commitment_weight: float = 0.25
    # denoiser
    inner_channels: int = 64
    channel_multiples: tuple[int, ...] = (1, 2, 3, 4)
    res_blocks: int = 2
    head_channels: int = 32
    attention_stages: int = 2
    dropout: float = 0.0
    # schedule
    steps_train: int = 200
    steps_infer: int = 50
    linear_start: float = 1.5e-3
    linear_end: float = 0.0195
    # optimization
    batch_size: int = 16
    epochs: int = 1
    max_steps: int | None = None
    learning_rate: float = 1e-4
    vae_learning_rate: float = 1e-3
    checkpoint_every: int = 0
    log_every: int = 10
    # inference / evaluation
    overlay: bool = False
    embedder: str = "ycc-stats"
    fvd_clip_length: int = 4

    def __post_init__(self) -> None:
        self.vae_hidden_channels = tuple(self.vae_hidden_channels)
        self.channel_multiples = tuple(self.channel_multiples)

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from None
        return 0

    def validate(self) -> "RunConfig":
        """Check every module constraint before any work starts."""
        self.vae_config()
        self.denoiser_config()
        self.train_config(self.learning_rate)
        self.train_config(self.vae_learning_rate)
        strided_schedule(linear_schedule(self.steps_train, self.linear_start, self.linear_end),
                         self.steps_infer)
        if self.fvd_clip_length < 1:
            raise ConfigurationError("fvd_clip_length must be positive")
        return self

    def vae_config(self) -> VQVAEConfig:
        return VQVAEConfig(
            image_size=self.image_size,
            codebook_size=self.codebook_size,
            hidden_channels=self.vae_hidden_channels,
            res_blocks=self.vae_res_blocks,
            commitment_weight=self.commitment_weight,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            inner_channels=self.inner_channels,
            channel_multiples=self.channel_multiples,
            res_blocks_per_stage=self.res_blocks,
            attention_head_channels=self.head_channels,
            attention_stages=self.attention_stages,
            dropout=self.dropout,
            latent_size=self.vae_config().latent_size,
        )

    def train_config(self, learning_rate: float) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_steps=self.max_steps,
            learning_rate=learning_rate,
            seed=self.resolved_seed(),
            image_size=self.image_size,
            steps_train=self.steps_train,
            linear_start=self.linear_start,
            linear_end=self.linear_end,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["seed"] = self.resolved_seed()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**doc)


def _flag_type(f: dataclasses.Field):
    default = f.default
    name = f.name
    annotation = str(f.type)
    if "tuple" in annotation:
        return lambda s: tuple(int(v) for v in s.split(","))
    if "bool" in annotation:
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if "float" in annotation:
        return float
    if "int" in annotation:
        return int
    if isinstance(default, str) or "str" in annotation:
        return str
    raise TypeError(f"no flag parser for field {name}")  # pragma: no cover


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                           type=_flag_type(f), default=None, metavar=f.name.upper())


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(RunConfig)
        if getattr(args, f"cfg_{f.name}", None) is not None
    }
    cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()
