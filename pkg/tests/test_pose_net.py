"""Pose posterior: reparameterized sampling and the closed-form KL against
Monte Carlo oracles, plus encoder contracts."""

import math

import numpy as np
import pytest
import torch

from endodepth.pose_net import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    PoseDistribution,
    PoseEncoder,
    PoseNetError,
    PosePrior,
    kl_to_prior,
    sample_pose,
)


def make_dist(mean, logvar, dtype=torch.float64):
    return PoseDistribution(
        mean=torch.tensor(mean, dtype=dtype), log_variance=torch.tensor(logvar, dtype=dtype)
    )


class TestEncoder:
    def test_output_shapes(self):
        net = PoseEncoder(widths=(8, 16))
        a = torch.rand(2, 3, 32, 32)
        b = torch.rand(2, 3, 32, 32)
        d = net.encode_pose(a, b)
        assert d.mean.shape == (2, 6)
        assert d.log_variance.shape == (2, 6)

    def test_unbatched_input(self):
        net = PoseEncoder(widths=(8, 16))
        d = net.encode_pose(torch.rand(3, 32, 32), torch.rand(3, 32, 32))
        assert d.mean.shape == (6,)

    def test_logvar_within_clamp_range(self):
        net = PoseEncoder(widths=(8, 16))
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            a = torch.rand(1, 3, 32, 32, generator=g)
            b = torch.rand(1, 3, 32, 32, generator=g)
            d = net.encode_pose(a, b)
            assert (d.log_variance >= LOGVAR_MIN).all()
            assert (d.log_variance <= LOGVAR_MAX).all()

    def test_deterministic(self):
        net = PoseEncoder(widths=(8, 16))
        a = torch.rand(1, 3, 32, 32)
        b = torch.rand(1, 3, 32, 32)
        d1 = net.encode_pose(a, b)
        d2 = net.encode_pose(a, b)
        assert torch.equal(d1.mean, d2.mean)
        assert torch.equal(d1.log_variance, d2.log_variance)

    def test_shape_mismatch_rejected(self):
        net = PoseEncoder(widths=(8,))
        with pytest.raises(PoseNetError):
            net.encode_pose(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))


class TestSamplePose:
    def test_eval_mode_returns_mean_for_any_seed(self):
        d = make_dist([0.5, -0.2, 1.0, 0.05, 0.0, -0.01], [0.0] * 6)
        for seed in (0, 1, 12345):
            assert torch.equal(sample_pose(d, "eval", seed=seed), d.mean)

    def test_clamped_minimum_noise_vanishes(self):
        d = make_dist([0.3, 0.1, 0.9, 0.02, -0.03, 0.04], [-50.0] * 6)
        assert (d.log_variance == LOGVAR_MIN).all()  # clamp engaged
        s = sample_pose(d, "train", seed=3)
        scale = PosePrior().scale_vector(torch.float64)
        assert ((s - d.mean).abs() <= 1e-2 * scale).all()

    def test_monte_carlo_moments(self):
        # 1e5 draws: empirical mean/std of each axis within 1% of the target
        mean = [0.5, -0.6, 0.8, 0.04, -0.05, 0.03]
        logvar = [-1.0, 0.0, -2.0, -0.5, -1.5, 0.5]
        n = 100_000
        d = make_dist(np.tile(mean, (n, 1)), np.tile(logvar, (n, 1)))
        draws = sample_pose(d, "train", seed=7)

        scale = PosePrior().scale_vector(torch.float64)
        target_std = torch.exp(0.5 * torch.tensor(logvar, dtype=torch.float64)) * scale
        emp_mean = draws.mean(dim=0)
        emp_std = draws.std(dim=0)
        for j in range(6):
            assert abs(emp_mean[j].item() - mean[j]) <= 0.01 * max(abs(mean[j]), target_std[j].item())
            assert abs(emp_std[j].item() - target_std[j].item()) <= 0.01 * target_std[j].item()

    def test_train_mode_reproducible_for_fixed_seed(self):
        d = make_dist([0.0] * 6, [0.0] * 6)
        assert torch.equal(sample_pose(d, "train", seed=11), sample_pose(d, "train", seed=11))

    def test_bad_mode_rejected(self):
        d = make_dist([0.0] * 6, [0.0] * 6)
        with pytest.raises(PoseNetError):
            sample_pose(d, "test", seed=0)


class TestKL:
    def test_prior_gives_zero(self):
        d = make_dist([0.0] * 6, [0.0] * 6)
        assert kl_to_prior(d).item() == 0.0

    def test_unit_mean_single_axis(self):
        d = make_dist([1.0, 0, 0, 0, 0, 0], [0.0] * 6)
        assert kl_to_prior(d).item() == pytest.approx(0.5, abs=1e-12)

    def test_kl_nonnegative_random_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = make_dist(rng.normal(0, 1, 6), rng.uniform(-4, 2, 6))
            assert kl_to_prior(d).item() >= 0.0

    def test_matches_monte_carlo_oracle(self):
        # KL = E_q[log q(x) - log p(x)] estimated with 1e6 reparameterized draws
        rng = np.random.default_rng(1)
        prior = PosePrior()
        scale = prior.scale_vector(torch.float64).numpy()
        mean = rng.normal(0, 0.5, 6)
        logvar = rng.uniform(-2, 1, 6)

        mu_scaled = mean / scale
        sigma = np.exp(0.5 * logvar)
        n = 1_000_000
        eps = rng.standard_normal((n, 6))
        x = mu_scaled + sigma * eps  # draws in prior-scaled space
        log_q = -0.5 * (((x - mu_scaled) / sigma) ** 2 + np.log(2 * np.pi) + logvar).sum(axis=1)
        log_p = -0.5 * (x**2 + np.log(2 * np.pi)).sum(axis=1)
        mc = (log_q - log_p).mean()

        closed = kl_to_prior(make_dist(mean, logvar), prior).item()
        assert abs(closed - mc) <= 0.01 * abs(closed)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        mean_np = rng.normal(0, 0.5, 6)
        logvar_np = rng.uniform(-2, 1, 6)

        mean = torch.tensor(mean_np, requires_grad=True)
        logvar = torch.tensor(logvar_np, requires_grad=True)
        kl_to_prior(PoseDistribution(mean=mean, log_variance=logvar)).backward()

        step = 1e-6
        for j in range(6):
            for arr, grad in ((mean_np, mean.grad), (logvar_np, logvar.grad)):
                bumped = arr.copy()
                bumped[j] += step
                hi = kl_to_prior(make_dist(*(bumped, logvar_np) if arr is mean_np else (mean_np, bumped))).item()
                bumped[j] -= 2 * step
                lo = kl_to_prior(make_dist(*(bumped, logvar_np) if arr is mean_np else (mean_np, bumped))).item()
                fd = (hi - lo) / (2 * step)
                assert abs(grad[j].item() - fd) <= 1e-4 * max(abs(fd), abs(grad[j].item()), 1e-8)

    def test_batched_kl_averages(self):
        a = make_dist([1.0, 0, 0, 0, 0, 0], [0.0] * 6)
        b = make_dist([0.0] * 6, [0.0] * 6)
        both = make_dist([[1.0, 0, 0, 0, 0, 0], [0.0] * 6], [[0.0] * 6, [0.0] * 6])
        assert kl_to_prior(both).item() == pytest.approx(
            (kl_to_prior(a).item() + kl_to_prior(b).item()) / 2, abs=1e-12
        )


class TestDistributionContracts:
    def test_clamping_on_construction(self):
        d = make_dist([0.0] * 6, [100.0] * 6)
        assert (d.log_variance == LOGVAR_MAX).all()

    def test_shape_validation(self):
        with pytest.raises(PoseNetError):
            PoseDistribution(mean=torch.zeros(5), log_variance=torch.zeros(5))

    def test_nonfinite_rejected(self):
        with pytest.raises(PoseNetError):
            make_dist([float("inf")] + [0.0] * 5, [0.0] * 6)
