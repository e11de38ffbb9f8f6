import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentcolor.errors import ConfigurationError, ShapeError
from latentcolor.trainer import build_vqvae
from latentcolor.vqvae import LatentNorm, VQVAE, VQVAEConfig, VectorQuantizer, nearest_codes, vqvae_loss


def brute_force_nearest(z, codebook):
    b, d, h, w = z.shape
    out = torch.empty(b, h, w, dtype=torch.long)
    for i in range(b):
        for y in range(h):
            for x in range(w):
                v = z[i, :, y, x]
                best, best_k = None, -1
                for k in range(codebook.shape[0]):
                    dist = float(((v - codebook[k]) ** 2).sum())
                    if best is None or dist < best:
                        best, best_k = dist, k
                out[i, y, x] = best_k
    return out


def test_default_shapes():
    vae = VQVAE().eval()
    x = torch.rand(1, 3, 128, 128)
    with torch.no_grad():
        z = vae.encode(x)
        assert z.shape == (1, 3, 32, 32)
        assert vae.decode(vae.quantize(z).codes).shape == (1, 3, 128, 128)


def test_encode_deterministic_and_sensitive(micro_vae):
    micro_vae.eval()
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a, b = micro_vae.encode(x), micro_vae.encode(x.clone())
        y = x.clone()
        y[0, 1, 7, 7] += 0.5
        c = micro_vae.encode(y)
    assert torch.equal(a, b)
    assert (a - c).abs().max() > 0


def test_decode_deterministic_and_clamped(micro_vae):
    micro_vae.eval()
    z = torch.randn(2, 3, 4, 4) * 10
    with torch.no_grad():
        a, b = micro_vae.decode(z), micro_vae.decode(z)
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_shape_errors(micro_vae):
    with pytest.raises(ShapeError):
        micro_vae.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        micro_vae.quantize(torch.rand(1, 2, 4, 4))


class TestQuantizer:
    def test_random_probes_match_brute_force(self):
        g = torch.Generator().manual_seed(0)
        codebook = torch.randn(8, 3, generator=g)
        z = torch.randn(2, 3, 5, 5, generator=g)
        assert torch.equal(nearest_codes(z, codebook), brute_force_nearest(z, codebook))

    def test_codebook_members_are_fixed_points(self):
        vq = VectorQuantizer(16, 3).eval()
        cb = vq.codebook.detach()
        idx = torch.randint(0, 16, (2, 3, 3), generator=torch.Generator().manual_seed(1))
        z = cb[idx].permute(0, 3, 1, 2)
        q = vq(z)
        assert torch.equal(q.indices, idx)
        assert torch.equal(q.codes, z)
        assert q.quant_error.item() == 0.0

    def test_single_entry_codebook(self):
        vq = VectorQuantizer(1, 3).eval()
        assert torch.all(vq(torch.randn(2, 3, 4, 4)).indices == 0)

    def test_outputs_are_members_and_idempotent(self):
        vq = VectorQuantizer(32, 3).eval()
        q = vq(torch.randn(3, 3, 4, 4))
        members = {tuple(row.tolist()) for row in vq.codebook.detach()}
        assert all(tuple(v.tolist()) in members for v in q.codes.permute(0, 2, 3, 1).reshape(-1, 3))
        assert torch.equal(vq(q.zq.detach()).codes, q.codes)

    def test_straight_through_gradient(self):
        vq = VectorQuantizer(8, 3)
        z = torch.randn(1, 3, 2, 2, requires_grad=True)
        vq(z).zq.sum().backward()
        torch.testing.assert_close(z.grad, torch.ones_like(z))

    def test_usage_counts_only_in_training(self):
        vq = VectorQuantizer(8, 3)
        vq(torch.randn(1, 3, 2, 2))
        assert vq.usage_counts.sum() == 4
        vq.eval()
        vq(torch.randn(1, 3, 2, 2))
        assert vq.usage_counts.sum() == 4

    def test_empty_codebook_rejected(self):
        with pytest.raises(ConfigurationError):
            VectorQuantizer(0, 3)


class TestLoss:
    def test_zero_when_perfect(self):
        x = torch.rand(1, 3, 4, 4)
        z = torch.randn(1, 3, 2, 2)
        loss = vqvae_loss(x, x.clone(), z, z.clone())
        assert all(float(v) == 0.0 for v in loss)

    def test_non_negative(self):
        g = torch.Generator().manual_seed(0)
        loss = vqvae_loss(torch.rand(2, 3, 4, 4, generator=g), torch.rand(2, 3, 4, 4, generator=g),
                          torch.randn(2, 3, 2, 2, generator=g), torch.randn(2, 3, 2, 2, generator=g))
        assert all(float(v) >= 0 for v in loss)

    def test_hand_computed(self):
        # 2x2 single-channel case.
        x = torch.tensor([[[[0.0, 1.0], [0.5, 0.5]]]])
        x_hat = torch.tensor([[[[0.5, 1.0], [0.5, 0.0]]]])
        z = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        codes = torch.tensor([[[[1.0, 1.0], [3.0, 2.0]]]])
        loss = vqvae_loss(x, x_hat, z, codes, commitment_weight=0.25)
        assert loss.recon.item() == pytest.approx((0.25 + 0.25) / 4)
        assert loss.codebook.item() == pytest.approx((1 + 4) / 4)
        assert loss.commit.item() == pytest.approx((1 + 4) / 4)
        assert loss.total.item() == pytest.approx(0.125 + 1.25 + 0.25 * 1.25)

    def test_gradients_reach_the_right_parameters(self, micro_vae):
        x = torch.rand(2, 3, 16, 16)
        x_hat, z, q = micro_vae(x)
        loss = vqvae_loss(x, x_hat, z, q.codes)
        loss.total.backward()
        assert micro_vae.quantizer.embedding.weight.grad.abs().sum() > 0
        assert all(p.grad is not None for p in micro_vae.encoder.parameters())
        assert all(p.grad is not None for p in micro_vae.decoder.parameters())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"codebook_size": 0}, {"image_size": 30}, {"hidden_channels": (8,)},
                                        {"commitment_weight": -1.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            VQVAEConfig(**kwargs)

    def test_seeded_build(self, micro_vae_cfg):
        a, b = build_vqvae(micro_vae_cfg, 3), build_vqvae(micro_vae_cfg, 3)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestLatentNorm:
    @settings(max_examples=50, deadline=None)
    @given(shift=st.tuples(*[st.floats(-5, 5)] * 3), scale=st.floats(0.05, 20.0))
    def test_invert_undoes_apply(self, shift, scale):
        norm = LatentNorm(shift, scale)
        z = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        assert torch.allclose(norm.invert(norm.apply(z)), z, atol=1e-12)

    def test_dict_roundtrip(self):
        norm = LatentNorm((0.5, -1.0, 2.0), 3.0)
        assert LatentNorm.from_dict(norm.to_dict()) == norm

    @pytest.mark.parametrize("kwargs", [{"scale": 0.0}, {"scale": float("inf")},
                                        {"shift": (0.0, float("nan"), 0.0)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            LatentNorm(**kwargs)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            LatentNorm((0.0, 0.0)).apply(torch.zeros(1, 3, 2, 2))
