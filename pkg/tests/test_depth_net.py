"""Depth network contracts: pyramid shapes, disparity mapping oracle,
bank freezing and gradient paths."""

import pytest
import torch

from endodepth.depth_net import (
    DepthEncoder,
    DepthNet,
    DepthNetError,
    DepthScaleConfig,
    FeaturePyramid,
    sigmoid_to_depth,
)
from endodepth.latent_bank import BankStyleAdapters, DepthGenerator

ENC_CH = (4, 4, 8, 8, 16)  # finest -> coarsest, thin for test speed
DEC_CH = (16, 8, 8, 4, 4)
BANK_CH = (16, 8, 8, 4, 4)


def tiny_depth_net(base_resolution=2, use_bank=True, levels=5):
    enc = ENC_CH[:levels]
    dec = DEC_CH[:levels]
    bank_ch = BANK_CH[:levels]
    bank = None
    adapters = None
    if use_bank:
        bank = DepthGenerator(
            channels=bank_ch, base_resolution=base_resolution, latent_dim=8
        ).freeze()
        adapters = BankStyleAdapters(encoder_channels=enc, bank_channels=bank_ch)
    return DepthNet(
        encoder_channels=enc,
        decoder_channels=dec,
        bank=bank,
        adapters=adapters,
        bank_channels=bank_ch,
        use_bank=use_bank,
    )


class TestEncoder:
    def test_480_input_five_levels(self):
        enc = DepthEncoder(channels=ENC_CH)
        pyr = enc.encode(torch.rand(1, 3, 480, 480))
        assert [s[0] for s in pyr.sizes()] == [480, 240, 120, 60, 30]

    def test_32_input_halving_schedule(self):
        enc = DepthEncoder(channels=ENC_CH)
        pyr = enc.encode(torch.rand(1, 3, 32, 32))
        assert [s[0] for s in pyr.sizes()] == [32, 16, 8, 4, 2]

    def test_deterministic(self):
        enc = DepthEncoder(channels=ENC_CH)
        img = torch.rand(1, 3, 32, 32)
        a = enc.encode(img)
        b = enc.encode(img)
        for x, y in zip(a.levels, b.levels):
            assert torch.equal(x, y)

    def test_indivisible_size_rejected(self):
        enc = DepthEncoder(channels=ENC_CH)
        with pytest.raises(DepthNetError, match="16"):
            enc.encode(torch.rand(1, 3, 40, 40))

    def test_pyramid_validates_halving(self):
        with pytest.raises(DepthNetError):
            FeaturePyramid(levels=[torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 6, 6)])


class TestSigmoidToDepth:
    CFG = DepthScaleConfig(min_depth=0.1, max_depth=20.0)

    def test_limits(self):
        assert sigmoid_to_depth(1e-9, self.CFG) == pytest.approx(20.0, rel=1e-6)
        assert sigmoid_to_depth(1 - 1e-12, self.CFG) == pytest.approx(0.1, rel=1e-6)

    def test_midpoint_scalar_oracle(self):
        # 1 / (1/20 + 0.5 * (1/0.1 - 1/20)) = 1 / 5.025
        assert sigmoid_to_depth(0.5, self.CFG) == pytest.approx(1.0 / 5.025, rel=1e-12)
        assert sigmoid_to_depth(0.5, self.CFG) == pytest.approx(0.19900497512437812, rel=1e-12)

    def test_monotone_decreasing(self):
        s = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
        d = sigmoid_to_depth(s, self.CFG)
        assert (d[1:] < d[:-1]).all()

    def test_range_bounds(self):
        s = torch.rand(1000, dtype=torch.float64).clamp(1e-6, 1 - 1e-6)
        d = sigmoid_to_depth(s, self.CFG)
        assert d.min() >= self.CFG.min_depth and d.max() <= self.CFG.max_depth

    def test_out_of_range_rejected(self):
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(DepthNetError):
                sigmoid_to_depth(bad, self.CFG)

    def test_invalid_config_rejected(self):
        with pytest.raises(DepthNetError):
            DepthScaleConfig(min_depth=2.0, max_depth=1.0)


class TestDepthNet:
    def test_four_scale_output_shapes(self):
        net = tiny_depth_net()
        pred = net(torch.rand(1, 3, 32, 32))
        assert pred.num_scales == 4
        assert [s.shape[-1] for s in pred.sigmoids] == [32, 16, 8, 4]
        for s in pred.sigmoids:
            assert s.shape[1] == 1

    def test_depth_within_configured_range(self):
        net = tiny_depth_net()
        pred = net(torch.rand(2, 3, 32, 32))
        for d in pred.depths():
            assert d.min() >= pred.scale_config.min_depth
            assert d.max() <= pred.scale_config.max_depth

    def test_ablation_zero_bank_still_valid_range(self):
        net = tiny_depth_net(use_bank=False)
        pred = net(torch.rand(1, 3, 32, 32))
        assert pred.num_scales == 4
        for d in pred.depths():
            assert d.min() >= pred.scale_config.min_depth
            assert d.max() <= pred.scale_config.max_depth

    def test_bank_core_unchanged_after_optimizer_step(self):
        net = tiny_depth_net()
        before = {k: v.clone() for k, v in net.bank.state_dict().items()}
        opt = torch.optim.Adam(net.trainable_parameters(), lr=1e-3)
        loss = net(torch.rand(1, 3, 32, 32)).depth(0).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        after = net.bank.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k]), f"bank weight {k} changed"
        net.bank.verify_frozen()

    def test_encoder_gradient_nonzero_through_bank(self):
        net = tiny_depth_net()
        loss = net(torch.rand(1, 3, 32, 32)).depth(0).mean()
        loss.backward()
        total = sum(
            p.grad.abs().sum().item() for p in net.encoder.parameters() if p.grad is not None
        )
        assert total > 0

    def test_adapter_gradient_nonzero(self):
        net = tiny_depth_net()
        loss = net(torch.rand(1, 3, 32, 32)).depth(0).mean()
        loss.backward()
        total = sum(
            p.grad.abs().sum().item() for p in net.adapters.parameters() if p.grad is not None
        )
        assert total > 0

    def test_misaligned_bank_features_rejected(self):
        net = tiny_depth_net()
        pyr = net.encoder.encode(torch.rand(1, 3, 32, 32))
        bad = net.bank_features(pyr)
        bad[0] = bad[0][:, :, :16, :16]
        with pytest.raises(DepthNetError):
            net.decoder.decode(pyr, bad)

    def test_three_level_configuration(self):
        # small inputs use fewer levels; output scales shrink to n
        net = tiny_depth_net(levels=3, base_resolution=2)
        pred = net(torch.rand(1, 3, 8, 8))
        assert pred.num_scales == 3
        assert [s.shape[-1] for s in pred.sigmoids] == [8, 4, 2]
