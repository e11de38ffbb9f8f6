import json

import pytest
import torch

from latentcolor.denoiser import build_denoiser
from latentcolor.errors import CheckpointError, ConfigurationError, NumericalError
from latentcolor.trainer import (
    DiffusionTrainer,
    TrainConfig,
    VAETrainer,
    denoising_loss,
    diffusion_train_step,
    encode_batch,
    estimate_latent_norm,
    load_checkpoint,
    new_diffusion_trainer,
    parameter_checksum,
    save_checkpoint,
    vae_train_step,
    vqvae_meta,
)
from latentcolor.vqvae import LatentNorm, VQLoss


@pytest.fixture
def tcfg():
    return TrainConfig(batch_size=2, learning_rate=1e-3, seed=0, image_size=16)


@pytest.fixture
def diff_trainer(micro_vae, micro_dataset, micro_denoiser_cfg, tcfg, tmp_path):
    return new_diffusion_trainer(micro_vae, micro_dataset, tcfg, micro_denoiser_cfg, tmp_path / "log.jsonl")


def _params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


class TestConfig:
    @pytest.mark.parametrize("lr", [0.0, -1e-4, float("nan")])
    def test_bad_learning_rate(self, lr):
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=lr)

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"epochs": 0}, {"max_steps": 0},
                                        {"linear_start": 0.1, "linear_end": 0.01}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_total_steps(self):
        assert TrainConfig(batch_size=4, epochs=3).total_steps(10) == 9
        assert TrainConfig(batch_size=4, epochs=3, max_steps=5).total_steps(10) == 5

    def test_defaults_are_desk_scale(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.learning_rate) == (16, 1e-4)
        assert (cfg.steps_train, cfg.linear_start, cfg.linear_end) == (200, 1.5e-3, 0.0195)


class TestSteps:
    def test_vae_step_components_non_negative(self, micro_vae, micro_dataset):
        opt = torch.optim.Adam(micro_vae.parameters(), lr=1e-3)
        color = torch.stack([micro_dataset[i][0] for i in range(4)])
        loss = vae_train_step(color, micro_vae, opt)
        assert isinstance(loss, VQLoss)
        assert all(float(v) >= 0 for v in loss)

    def test_identity_autoencoder_has_zero_recon(self):
        class Identity(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.ones(()))
                self.cfg = type("Cfg", (), {"commitment_weight": 0.25})()

            def forward(self, x):
                z = x * self.w
                q = type("Q", (), {"codes": z.detach()})()
                return z, z, q

        model = Identity()
        loss = vae_train_step(torch.rand(2, 3, 4, 4), model, torch.optim.SGD(model.parameters(), lr=0.1))
        assert float(loss.recon) == 0.0

    def test_oracle_noise_gives_zero_loss(self, micro_vae, micro_dataset, tcfg):
        class Oracle(torch.nn.Module):
            def __init__(self, noise):
                super().__init__()
                self.noise = noise

            def predict_noise(self, z_t, z_bw, z_prev, t):
                return self.noise

        color, gray3, prev = (torch.stack(p) for p in zip(*[micro_dataset[i] for i in range(2)]))
        z_gt, z_bw, z_prev = encode_batch(micro_vae.eval(), color, gray3, prev)
        noise = torch.randn_like(z_gt)
        loss = denoising_loss(Oracle(noise), z_gt, z_bw, z_prev, torch.tensor([3, 50]), noise, tcfg.schedule())
        assert float(loss) == 0.0

    def test_latent_norm_centers_and_whitens(self, micro_vae, micro_dataset):
        color = torch.stack([micro_dataset[i][0] for i in range(len(micro_dataset))])
        with torch.no_grad():
            z = micro_vae.eval().encode(color).permute(0, 2, 3, 1).reshape(-1, 3)
            picks = torch.randperm(len(z), generator=torch.Generator().manual_seed(0))[:16]
            micro_vae.quantizer.codebook.copy_(z[picks])
        norm = estimate_latent_norm(micro_vae, color)
        z_gt, _, _ = encode_batch(micro_vae, color, color, color, norm)
        assert z_gt.double().mean(dim=(0, 2, 3)).abs().max() < 1e-5
        assert float(z_gt.double().std()) == pytest.approx(1.0, rel=1e-5)

    def test_latent_norm_single_code_falls_back(self, micro_vae, micro_dataset, caplog):
        color = torch.stack([micro_dataset[i][0] for i in range(2)])
        with torch.no_grad():
            micro_vae.quantizer.codebook.fill_(0.3)
        norm = estimate_latent_norm(micro_vae.eval(), color)
        assert norm.scale == 1.0 and norm.shift == pytest.approx((0.3, 0.3, 0.3))
        assert "one codebook entry" in caplog.text

    def test_diffusion_step_leaves_vae_untouched(self, diff_trainer, micro_dataset):
        before = parameter_checksum(diff_trainer.vae)
        state = {k: v.clone() for k, v in diff_trainer.vae.state_dict().items()}
        diff_trainer.fit(micro_dataset, steps=3)
        assert parameter_checksum(diff_trainer.vae) == before
        assert all(torch.equal(state[k], v) for k, v in diff_trainer.vae.state_dict().items())

    def test_loss_non_negative(self, diff_trainer, micro_dataset):
        assert all(loss >= 0 for loss in diff_trainer.fit(micro_dataset, steps=3))

    def test_micro_batch_loss_decreases(self, micro_vae, micro_dataset, micro_denoiser_cfg):
        cfg = TrainConfig(batch_size=4, learning_rate=2e-3, seed=0, image_size=16)
        trainer = new_diffusion_trainer(micro_vae, micro_dataset, cfg, micro_denoiser_cfg)
        history = trainer.fit(micro_dataset, steps=200)
        assert sum(history[-20:]) / 20 < sum(history[:20]) / 20

    def test_non_finite_loss_reports_timesteps(self, micro_vae, micro_dataset, micro_denoiser_cfg, tcfg):
        model = build_denoiser(micro_denoiser_cfg)
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        batch = [torch.stack(p) for p in zip(*[micro_dataset[i] for i in range(2)])]
        with pytest.raises(NumericalError, match="timesteps"):
            diffusion_train_step(batch, model, micro_vae, tcfg.schedule(),
                                 torch.optim.Adam(model.parameters()), torch.Generator().manual_seed(0))

    def test_ten_step_reproducibility(self, micro_vae, micro_dataset, micro_denoiser_cfg, tcfg):
        runs = []
        for _ in range(2):
            trainer = new_diffusion_trainer(micro_vae, micro_dataset, tcfg, micro_denoiser_cfg)
            runs.append(trainer.fit(micro_dataset, steps=10))
        assert max(abs(a - b) for a, b in zip(*runs)) <= 1e-6

    def test_log_lines(self, diff_trainer, micro_dataset, tmp_path):
        diff_trainer.fit(micro_dataset, steps=2)
        lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [1, 2]
        assert {"loss", "lr", "wallclock"} <= set(lines[0])


class TestCheckpoints:
    def test_vae_roundtrip(self, micro_vae, tmp_path):
        save_checkpoint(tmp_path / "v.pt", "vqvae", micro_vae, vqvae_meta(micro_vae))
        loaded = load_checkpoint(tmp_path / "v.pt", "vqvae")
        assert _params_equal(micro_vae, loaded.model)
        side = json.loads((tmp_path / "v.json").read_text())
        assert side["version"] == 1 and side["K"] == 16 and side["d"] == 3

    def test_denoiser_sidecar(self, diff_trainer, tmp_path):
        diff_trainer.save(tmp_path / "d.pt")
        side = json.loads((tmp_path / "d.json").read_text())
        assert side["concat_order"] == ["noisy", "grayscale", "previous"]
        assert side["schedule"] == {"steps_train": 200, "linear_start": 1.5e-3, "linear_end": 0.0195}
        assert LatentNorm.from_dict(side["latent_norm"]) == diff_trainer.latent_norm
        assert _params_equal(diff_trainer.denoiser, load_checkpoint(tmp_path / "d.pt").model)

    @pytest.mark.parametrize(
        "corrupt",
        [
            lambda d: "{not json",
            lambda d: json.dumps({k: v for k, v in d.items() if k != "config"}),
            lambda d: json.dumps({**d, "version": 99}),
            lambda d: json.dumps({**d, "concat_order": ["grayscale", "noisy", "previous"]}),
            lambda d: json.dumps({**d, "config": {**d["config"], "inner_channels": 16}}),
        ],
        ids=["syntax", "missing-config", "version", "concat-order", "config-mismatch"],
    )
    def test_corrupted_sidecar(self, diff_trainer, tmp_path, corrupt):
        diff_trainer.save(tmp_path / "d.pt")
        side = tmp_path / "d.json"
        side.write_text(corrupt(json.loads(side.read_text())))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "d.pt")

    def test_missing_files(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path / "none.pt")

    def test_wrong_kind(self, micro_vae, tmp_path):
        save_checkpoint(tmp_path / "v.pt", "vqvae", micro_vae, vqvae_meta(micro_vae))
        with pytest.raises(CheckpointError, match="expected 'denoiser'"):
            load_checkpoint(tmp_path / "v.pt", "denoiser")

    def test_resume_reproduces_next_step_loss(self, micro_vae, micro_dataset, micro_denoiser_cfg, tcfg, tmp_path):
        full = new_diffusion_trainer(micro_vae, micro_dataset, tcfg, micro_denoiser_cfg)
        reference = full.fit(micro_dataset, steps=6)

        first = new_diffusion_trainer(micro_vae, micro_dataset, tcfg, micro_denoiser_cfg)
        first.fit(micro_dataset, steps=3)
        first.save(tmp_path / "d.pt")
        resumed = DiffusionTrainer.resume(tmp_path / "d.pt", micro_vae, tcfg)
        assert resumed.step_count == 3
        assert resumed.fit(micro_dataset, steps=3) == reference[3:]

    def test_vae_resume(self, micro_vae_cfg, micro_dataset, tcfg, tmp_path):
        from latentcolor.trainer import build_vqvae

        full = VAETrainer(build_vqvae(micro_vae_cfg, 0), tcfg)
        reference = full.fit(micro_dataset, steps=4)
        part = VAETrainer(build_vqvae(micro_vae_cfg, 0), tcfg)
        part.fit(micro_dataset, steps=2, checkpoint_path=tmp_path / "v.pt")
        part.save(tmp_path / "v.pt")
        resumed = VAETrainer.resume(tmp_path / "v.pt", tcfg)
        assert resumed.fit(micro_dataset, steps=2) == reference[2:]

    def test_periodic_checkpoints(self, micro_vae_cfg, micro_dataset, tmp_path):
        from latentcolor.trainer import build_vqvae

        cfg = TrainConfig(batch_size=2, image_size=16, checkpoint_every=2)
        trainer = VAETrainer(build_vqvae(micro_vae_cfg, 0), cfg)
        trainer.fit(micro_dataset, steps=3, checkpoint_path=tmp_path / "v.pt")
        assert load_checkpoint(tmp_path / "v.pt").step == 2
