"""Forward process, loss, and sampler behavior in all conditioning modes."""

import math

import numpy as np
import pytest
import torch

from helpers import directional_grad_errors
from latentsr.diffusion import (
    ConditioningMode,
    LossWeights,
    diffusion_loss,
    forward_sample,
    initial_latent,
    min_snr_weights,
    sample,
    sampler_step,
    step_grid,
    unet_input,
)
from latentsr.errors import InvalidArgument
from latentsr.models import ModelConfig, LREncoder, UNet
from latentsr.models.networks import LRCondition
from latentsr.schedule import NoiseSchedule, make_schedule

BI = ConditioningMode.BIDIRECTIONAL
UNI = ConditioningMode.UNIDIRECTIONAL
MEAN = ConditioningMode.MEAN_ONLY


def _manual_schedule(alpha_mid, sigma_mid):
    alpha = np.array([math.sqrt(1 - 1e-8), alpha_mid, 1e-4])
    sigma = np.sqrt(1 - alpha**2)
    sigma[1] = sigma_mid
    alpha[1] = math.sqrt(1 - sigma_mid**2)
    lam = 2 * (np.log(alpha) - np.log(sigma))
    return NoiseSchedule(T=2, alpha=alpha, sigma=sigma, lam=lam)


def _cond(shape=(1, 1, 1, 1), mu=0.5, sig=2.0, dtype=torch.float64):
    return LRCondition(z_mu=torch.full(shape, mu, dtype=dtype),
                       z_sigma=torch.full(shape, sig, dtype=dtype))


class TestForwardSample:
    def test_clean_endpoint_returns_signal(self):
        s = make_schedule("cosine", 100)
        z_h = torch.randn(4, 2, 3, 3, dtype=torch.float64)
        cond = _cond(z_h.shape)
        eps = torch.randn_like(z_h)
        for mode in (BI, UNI, MEAN):
            z0 = forward_sample(z_h, cond, 0, s, eps, mode)
            assert float((z0 - z_h).abs().max()) < 5e-3  # clamp tolerance

    def test_scalar_substitution(self):
        # alpha=0.6, sigma=0.8, z_h=1, z_mu=0.5, z_sigma=2, eps=0.1
        # -> 0.6*1 + 0.8*0.5 + 0.8*2*0.1 = 1.16
        s = _manual_schedule(0.6, 0.8)
        z_h = torch.ones(1, 1, 1, 1, dtype=torch.float64)
        eps = torch.full_like(z_h, 0.1)
        z_t = forward_sample(z_h, _cond(), 1, s, eps, BI)
        assert float(z_t) == pytest.approx(1.16, abs=1e-12)

    def test_terminal_monte_carlo(self):
        s = make_schedule("cosine", 50)
        n = 100_000
        z_h = torch.full((n, 1, 1, 1), 0.8, dtype=torch.float64)
        cond = _cond((n, 1, 1, 1), mu=0.5, sig=2.0)
        gen = torch.Generator().manual_seed(0)
        eps = torch.randn(z_h.shape, generator=gen, dtype=torch.float64)
        z_T = forward_sample(z_h, cond, s.T, s, eps, BI)
        se = 2.0 / math.sqrt(n)
        assert abs(float(z_T.mean()) - 0.5) < 3 * se + s.alpha[-1] * 0.8
        se_std = 2.0 / math.sqrt(2 * (n - 1))
        assert abs(float(z_T.std()) - 2.0) < 3 * se_std

    @pytest.mark.parametrize("i_frac", [0.25, 0.5, 0.9])
    def test_marginal_closed_form(self, i_frac):
        s = make_schedule("cosine", 200)
        i = int(s.T * i_frac)
        n = 60_000
        z_h = torch.full((n, 1, 1, 1), -0.3, dtype=torch.float64)
        cond = _cond((n, 1, 1, 1), mu=0.7, sig=1.3)
        gen = torch.Generator().manual_seed(i)
        eps = torch.randn(z_h.shape, generator=gen, dtype=torch.float64)
        z = forward_sample(z_h, cond, i, s, eps, BI)
        mean = s.alpha[i] * -0.3 + s.sigma[i] * 0.7
        std = s.sigma[i] * 1.3
        assert abs(float(z.mean()) - mean) < 3 * std / math.sqrt(n)
        assert abs(float(z.std()) - std) < 3 * std / math.sqrt(2 * (n - 1))

    def test_missing_cond_rejected(self):
        s = make_schedule("cosine", 10)
        z = torch.zeros(1, 1, 1, 1)
        with pytest.raises(InvalidArgument):
            forward_sample(z, None, 5, s, torch.zeros_like(z), BI)

    def test_unidirectional_ignores_cond(self):
        s = make_schedule("cosine", 10)
        z_h = torch.randn(2, 1, 2, 2, dtype=torch.float64)
        eps = torch.randn_like(z_h)
        a = forward_sample(z_h, None, 5, s, eps, UNI)
        b = forward_sample(z_h, _cond(z_h.shape), 5, s, eps, UNI)
        assert torch.equal(a, b)


class TestModeReduction:
    def test_mean_only_equals_unit_sigma_bidirectional(self):
        s = make_schedule("cosine", 32)
        z_h = torch.randn(3, 2, 4, 4, dtype=torch.float64)
        mu = torch.randn_like(z_h)
        ones = torch.ones_like(z_h)
        eps = torch.randn_like(z_h)
        cond = LRCondition(z_mu=mu, z_sigma=ones)
        for i in (1, 7, 32):
            a = forward_sample(z_h, cond, i, s, eps, BI)
            b = forward_sample(z_h, cond, i, s, eps, MEAN)
            assert torch.equal(a, b)

    def test_zero_mu_unit_sigma_matches_unidirectional(self):
        s = make_schedule("cosine", 32)
        z_h = torch.randn(3, 2, 4, 4, dtype=torch.float64)
        cond = LRCondition(z_mu=torch.zeros_like(z_h), z_sigma=torch.ones_like(z_h))
        eps = torch.randn_like(z_h)
        for i in (1, 16, 32):
            a = forward_sample(z_h, cond, i, s, eps, BI)
            b = forward_sample(z_h, None, i, s, eps, UNI)
            assert torch.equal(a, b)

    def test_unet_input_concat_only_difference(self):
        z_t = torch.randn(2, 4, 8, 8)
        cond = _cond((2, 4, 8, 8))
        assert unet_input(z_t, cond, BI) is z_t
        assert unet_input(z_t, cond, MEAN) is z_t
        cat = unet_input(z_t, cond, UNI)
        assert cat.shape == (2, 8, 8, 8)
        assert torch.equal(cat[:, :4], z_t)
        assert torch.equal(cat[:, 4:], cond.z_mu)


class _RiggedUNet:
    """Predicts a fixed tensor regardless of input."""

    def __init__(self, out):
        self.out = out

    def __call__(self, z, lam):
        return self.out.expand(z.shape[0], *self.out.shape[1:])


class TestDiffusionLoss:
    def test_perfect_prediction_zero_loss(self):
        s = make_schedule("cosine", 16)
        z_h = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        cond = _cond(z_h.shape)
        eps = torch.randn_like(z_h)
        loss = diffusion_loss(_RiggedUNet(z_h), z_h, cond, [4, 9], s, eps, BI)
        assert float(loss) == 0.0

    def test_constant_offset_loss(self):
        s = make_schedule("cosine", 16)
        z_h = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        cond = _cond(z_h.shape)
        eps = torch.randn_like(z_h)
        c = 0.37
        loss = diffusion_loss(_RiggedUNet(z_h + c), z_h, cond, [4, 9], s, eps, BI)
        assert float(loss) == pytest.approx(c * c, rel=1e-12)

    def test_nonnegative_and_zero_iff_exact(self):
        s = make_schedule("cosine", 16)
        z_h = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        cond = _cond(z_h.shape)
        eps = torch.randn_like(z_h)
        bad = diffusion_loss(_RiggedUNet(z_h + 1e-3), z_h, cond, [8], s, eps, BI)
        assert float(bad) > 0

    def test_negative_weight_rejected(self):
        s = make_schedule("cosine", 16)
        z_h = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        w = LossWeights(omega=lambda lam: -torch.ones_like(lam))
        with pytest.raises(InvalidArgument):
            diffusion_loss(_RiggedUNet(z_h), z_h, _cond(z_h.shape), [8], s,
                           torch.randn_like(z_h), BI, weights=w)

    def test_min_snr_weights_bounded(self):
        w = min_snr_weights(5.0)
        lam = torch.tensor([-10.0, 0.0, 10.0], dtype=torch.float64)
        vals = w(lam)
        assert torch.all(vals > 0) and torch.all(vals <= 1.0 + 1e-12)

    @pytest.mark.parametrize("mode", [BI, MEAN, UNI])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradients_match_finite_differences(self, mode, seed):
        cfg = ModelConfig(latent_channels=2, scale=2, hr_downsample_factor=4,
                          base_channels=4, channel_multipliers=(1, 2),
                          num_res_blocks=1, attention_levels=(1,),
                          time_embed_dim=8, ae_base_channels=4,
                          ae_channel_multipliers=(1, 1, 2), ae_num_res_blocks=1)
        torch.manual_seed(seed)
        from latentsr.models import unet_in_channels
        unet = UNet(cfg, unet_in_channels(cfg, mode.value)).double()
        enc = LREncoder(cfg).double()
        with torch.no_grad():
            unet.out_conv.weight.normal_(0, 0.05)
        s = make_schedule("cosine", 8)
        z_h = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        x_l = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn_like(z_h)
        i = [3, 8]

        def loss_fn():
            return diffusion_loss(unet, z_h, enc(x_l), i, s, eps, mode)

        params = list(unet.parameters()) + list(enc.parameters())
        errs = directional_grad_errors(params, loss_fn, n_dirs=2, seed=seed)
        assert max(errs) < 1e-4, errs

    def test_cond_grad_mask_blocks_encoder(self):
        cfg = ModelConfig(latent_channels=2, scale=2, hr_downsample_factor=4,
                          base_channels=4, channel_multipliers=(1,),
                          num_res_blocks=1, attention_levels=(0,),
                          time_embed_dim=8, ae_base_channels=4,
                          ae_channel_multipliers=(1, 1, 2), ae_num_res_blocks=1)
        torch.manual_seed(0)
        unet = UNet(cfg).double()
        enc = LREncoder(cfg).double()
        with torch.no_grad():
            unet.out_conv.weight.normal_(0, 0.05)
        s = make_schedule("cosine", 8)
        z_h = torch.randn(2, 2, 4, 4, dtype=torch.float64)
        x_l = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn_like(z_h)
        mask = torch.tensor([False, False])
        loss = diffusion_loss(unet, z_h, enc(x_l), [3, 5], s, eps, BI,
                              cond_grad_mask=mask)
        loss.backward()
        assert all(p.grad is None or torch.all(p.grad == 0)
                   for p in enc.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in unet.parameters())


class TestSamplerStep:
    def test_terminal_step_returns_prediction(self):
        s = make_schedule("cosine", 16)
        z_t = torch.randn(2, 1, 3, 3, dtype=torch.float64)
        z_hat = torch.randn_like(z_t)
        out = sampler_step(z_t, z_hat, 4, 0, s, _cond(z_t.shape), BI)
        assert torch.equal(out, z_hat)

    def test_deterministic_bit_identical(self):
        s = make_schedule("cosine", 16)
        z_t = torch.randn(2, 1, 3, 3, dtype=torch.float64)
        z_hat = torch.randn_like(z_t)
        cond = _cond(z_t.shape)
        a = sampler_step(z_t, z_hat, 10, 5, s, cond, BI, deterministic=True)
        b = sampler_step(z_t, z_hat, 10, 5, s, cond, BI, deterministic=True)
        assert torch.equal(a, b)

    def test_stochastic_reproducible_with_seed(self):
        s = make_schedule("cosine", 16)
        z_t = torch.randn(2, 1, 3, 3, dtype=torch.float64)
        z_hat = torch.randn_like(z_t)
        cond = _cond(z_t.shape)
        a = sampler_step(z_t, z_hat, 10, 5, s, cond, BI,
                         rng=torch.Generator().manual_seed(3), deterministic=False)
        b = sampler_step(z_t, z_hat, 10, 5, s, cond, BI,
                         rng=torch.Generator().manual_seed(3), deterministic=False)
        assert torch.equal(a, b)

    def test_bad_target_rejected(self):
        s = make_schedule("cosine", 16)
        z = torch.zeros(1, 1, 1, 1)
        with pytest.raises(InvalidArgument):
            sampler_step(z, z, 5, 5, s, _cond(), BI)
        with pytest.raises(InvalidArgument):
            sampler_step(z, z, 5, 7, s, _cond(), BI)

    def test_paper_literal_update_degenerates(self):
        # the printed formula multiplies the prediction twice, so its
        # output cannot depend on z_t; kept behind a flag for comparison
        s = make_schedule("cosine", 16)
        cond = _cond((1, 1, 1, 1), mu=0.0, sig=1.0)
        z_hat = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        a = sampler_step(torch.zeros_like(z_hat), z_hat, 10, 5, s, cond, BI,
                         rng=gen, deterministic=False, paper_literal=True)
        gen = torch.Generator().manual_seed(0)
        b = sampler_step(torch.ones_like(z_hat), z_hat, 10, 5, s, cond, BI,
                         rng=gen, deterministic=False, paper_literal=True)
        assert torch.equal(a, b)


class TestSample:
    def test_step_grid_values(self):
        assert step_grid(1000, 4) == [1000, 750, 500, 250, 0]
        assert step_grid(10, 1) == [10, 0]
        assert step_grid(10, 10) == list(range(10, -1, -1))

    def test_too_many_steps_rejected(self):
        with pytest.raises(InvalidArgument):
            step_grid(10, 11)

    def test_one_step_returns_prediction(self):
        s = make_schedule("cosine", 64)
        z_h = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        cond = _cond(z_h.shape, mu=0.1, sig=0.5)
        out = sample(_RiggedUNet(z_h), cond, s, 1, BI,
                     rng=torch.Generator().manual_seed(0))
        assert torch.equal(out, z_h.expand_as(out))

    def test_full_grid_oracle_exact(self):
        s = make_schedule("cosine", 12)
        z_h = torch.randn(1, 1, 3, 3, dtype=torch.float64)
        cond = _cond(z_h.shape, mu=0.3, sig=1.5)
        out = sample(_RiggedUNet(z_h), cond, s, 12, BI,
                     rng=torch.Generator().manual_seed(1), deterministic=True)
        assert torch.equal(out, z_h)

    @pytest.mark.parametrize("num_steps", [1, 2, 5, 48])
    def test_oracle_marginals_stochastic(self, num_steps):
        # with fresh eps-hat draws each step the sampled marginal at every
        # grid index equals the forward marginal exactly in distribution
        s = make_schedule("cosine", 48)
        n = 20_000
        z_h_val, mu, sig = 0.8, -0.4, 1.7
        z_h = torch.full((n, 1, 1, 1), z_h_val, dtype=torch.float64)
        cond = _cond((n, 1, 1, 1), mu=mu, sig=sig)
        rng = torch.Generator().manual_seed(num_steps)
        _, traj = sample(_RiggedUNet(z_h), cond, s, num_steps, BI, rng=rng,
                         deterministic=False, collect_trajectory=True)
        for idx, z in traj[1:-1]:
            mean = s.alpha[idx] * z_h_val + s.sigma[idx] * mu
            std = s.sigma[idx] * sig
            assert abs(float(z.mean()) - mean) <= 3 * std / math.sqrt(n) + 1e-12
            assert abs(float(z.std()) - std) <= 3 * std / math.sqrt(2 * (n - 1))

    @pytest.mark.parametrize("num_steps", [2, 5, 48])
    def test_oracle_marginals_deterministic(self, num_steps):
        # implied-noise sampling carries the initial draw down the grid:
        # z_j = alpha_j z_h + (sigma_j / sigma_T) (z_init - alpha_T z_h)
        s = make_schedule("cosine", 48)
        n = 20_000
        z_h_val, mu, sig = 0.8, -0.4, 1.7
        z_h = torch.full((n, 1, 1, 1), z_h_val, dtype=torch.float64)
        cond = _cond((n, 1, 1, 1), mu=mu, sig=sig)
        rng = torch.Generator().manual_seed(num_steps)
        _, traj = sample(_RiggedUNet(z_h), cond, s, num_steps, BI, rng=rng,
                         deterministic=True, collect_trajectory=True)
        aT, sT = s.alpha[-1], s.sigma[-1]
        for idx, z in traj[1:-1]:
            mean = s.alpha[idx] * z_h_val + (s.sigma[idx] / sT) * (mu - aT * z_h_val)
            std = (s.sigma[idx] / sT) * sig
            assert abs(float(z.mean()) - mean) <= 3 * std / math.sqrt(n) + 1e-12
            assert abs(float(z.std()) - std) <= 3 * std / math.sqrt(2 * (n - 1))

    def test_initial_latent_distributions(self):
        n = 50_000
        cond = _cond((n, 1, 1, 1), mu=0.3, sig=0.7)
        gen = torch.Generator().manual_seed(9)
        z_bi = initial_latent(cond, BI, cond.z_mu.shape, torch.float64, gen)
        assert abs(float(z_bi.mean()) - 0.3) < 3 * 0.7 / math.sqrt(n)
        assert abs(float(z_bi.std()) - 0.7) < 3 * 0.7 / math.sqrt(2 * n)
        z_mean = initial_latent(cond, MEAN, cond.z_mu.shape, torch.float64, gen)
        assert abs(float(z_mean.std()) - 1.0) < 3 / math.sqrt(2 * n)
        z_uni = initial_latent(cond, UNI, cond.z_mu.shape, torch.float64, gen)
        assert abs(float(z_uni.mean())) < 3 / math.sqrt(n)

    def test_trajectory_collection(self):
        s = make_schedule("cosine", 20)
        z_h = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        cond = _cond(z_h.shape)
        out, traj = sample(_RiggedUNet(z_h), cond, s, 4, BI,
                           rng=torch.Generator().manual_seed(0),
                           collect_trajectory=True)
        assert [idx for idx, _ in traj] == [20, 15, 10, 5, 0]
        assert torch.equal(traj[-1][1], out)
