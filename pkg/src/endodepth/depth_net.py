"""DepthNet: encoder and decoder bracketing the generative latent bank.

The encoder turns the current frame into a feature pyramid whose levels
act as prompts for the frozen latent bank; the decoder concatenates
encoder and bank features per resolution and emits sigmoid maps at the
four largest resolutions, mapped to metric depth through a bounded
disparity-style transform.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DepthNetError(ValueError):
    """Raised for invalid depth-network inputs."""


@dataclass(frozen=True)
class DepthScaleConfig:
    """Metric depth range for the sigmoid-to-depth mapping (scene units)."""

    min_depth: float = 0.1
    max_depth: float = 20.0

    def __post_init__(self):
        if not (0 < self.min_depth < self.max_depth):
            raise DepthNetError(
                f"need 0 < min_depth < max_depth, got ({self.min_depth}, {self.max_depth})"
            )


def sigmoid_to_depth(s, cfg):
    """Map a sigmoid activation in (0, 1) to metric depth.

    depth = 1 / (1/max + (1/min - 1/max) * s): monotone decreasing, with
    s -> 0 giving max_depth and s -> 1 giving min_depth.
    """
    values = s if torch.is_tensor(s) else torch.tensor(float(s), dtype=torch.float64)
    if values.numel() == 0 or values.min() <= 0 or values.max() >= 1:
        raise DepthNetError("sigmoid values must lie strictly inside (0, 1)")
    min_disp, max_disp = 1.0 / cfg.max_depth, 1.0 / cfg.min_depth
    depth = 1.0 / (min_disp + (max_disp - min_disp) * values)
    return depth if torch.is_tensor(s) else depth.item()


@dataclass
class FeaturePyramid:
    """Encoder output maps, finest first: [h^{n-1}, ..., h^0]."""

    levels: list

    def __post_init__(self):
        if len(self.levels) < 2:
            raise DepthNetError("feature pyramid needs at least two levels")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if fine.shape[-2:] != (coarse.shape[-2] * 2, coarse.shape[-1] * 2):
                raise DepthNetError("pyramid level sizes must halve, finest first")

    @property
    def n_levels(self):
        return len(self.levels)

    def sizes(self):
        return [tuple(l.shape[-2:]) for l in self.levels]


@dataclass
class DepthPrediction:
    """Sigmoid maps at the largest resolutions (finest first) + depth mapping."""

    sigmoids: list
    scale_config: DepthScaleConfig

    @property
    def num_scales(self):
        return len(self.sigmoids)

    def depth(self, scale=0):
        return sigmoid_to_depth(self.sigmoids[scale], self.scale_config)

    def depths(self):
        return [self.depth(i) for i in range(self.num_scales)]


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ELU()

    def forward(self, x):
        return self.act(x + self.conv2(self.act(self.conv1(x))))


class DepthEncoder(nn.Module):
    """Residual downsampling CNN: n levels, the first at input resolution.

    channels are ordered finest to coarsest; level k (coarsest k=0) has
    spatial size input / 2^(n-1-k).
    """

    def __init__(self, channels=(64, 64, 128, 256, 512)):
        super().__init__()
        self.channels = tuple(channels)
        blocks = []
        in_ch = 3
        for lvl, ch in enumerate(self.channels):
            stride = 1 if lvl == 0 else 2
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, stride=stride, padding=1), nn.ELU(), _ResBlock(ch)
                )
            )
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)

    @property
    def n_levels(self):
        return len(self.channels)

    def encode(self, image):
        if image.dim() == 3:
            image = image[None]
        if image.dim() != 4 or image.shape[1] != 3:
            raise DepthNetError(f"image must be (B, 3, H, W), got {tuple(image.shape)}")
        div = 2 ** (self.n_levels - 1)
        h, w = image.shape[-2:]
        if h % div or w % div:
            raise DepthNetError(
                f"input size {h}x{w} must be divisible by 2^(n-1) = {div} for n = {self.n_levels}"
            )
        levels = []
        x = image
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return FeaturePyramid(levels=levels)

    def forward(self, image):
        return self.encode(image)


class DepthDecoder(nn.Module):
    """Fuses [h^k, a^k] per resolution, decoding coarse to fine.

    Emits sigmoid maps at the min(4, n) largest resolutions. Bank features
    are always concatenated; the ablation path feeds zeros instead, which
    keeps parameter shapes identical between configurations.
    """

    def __init__(
        self,
        encoder_channels=(64, 64, 128, 256, 512),
        bank_channels=(256, 128, 64, 64, 32),
        decoder_channels=(256, 128, 64, 32, 16),
        scale_config=None,
        head_bias=-1.8,
    ):
        super().__init__()
        n = len(encoder_channels)
        if len(bank_channels) != n or len(decoder_channels) != n:
            raise DepthNetError("encoder, bank and decoder channel schedules must align")
        self.scale_config = scale_config or DepthScaleConfig()
        self.bank_channels = tuple(bank_channels)  # coarsest first
        self.num_output_scales = min(4, n)
        self.head_bias = head_bias

        enc_coarse_first = tuple(reversed(tuple(encoder_channels)))
        blocks = []
        heads = []
        prev = 0
        for j in range(n):
            in_ch = prev + enc_coarse_first[j] + bank_channels[j]
            blocks.append(
                nn.Sequential(nn.Conv2d(in_ch, decoder_channels[j], 3, padding=1), nn.ELU())
            )
            heads.append(
                nn.Conv2d(decoder_channels[j], 1, 3, padding=1)
                if j >= n - self.num_output_scales
                else None
            )
            prev = decoder_channels[j]
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList([h for h in heads if h is not None])
        # bias the sigmoid heads so training starts at a mid-range depth
        for head in self.heads:
            nn.init.constant_(head.bias, self.head_bias)

    def decode(self, pyramid, bank_features):
        """pyramid: FeaturePyramid; bank_features: list aligned with it (finest first)."""
        n = len(self.blocks)
        if pyramid.n_levels != n:
            raise DepthNetError(f"pyramid has {pyramid.n_levels} levels, decoder expects {n}")
        if len(bank_features) != n:
            raise DepthNetError(f"got {len(bank_features)} bank levels, expected {n}")
        for hk, ak in zip(pyramid.levels, bank_features):
            if hk.shape[-2:] != ak.shape[-2:]:
                raise DepthNetError(
                    f"bank feature size {tuple(ak.shape[-2:])} misaligned with "
                    f"encoder level {tuple(hk.shape[-2:])}"
                )

        h_coarse_first = list(reversed(pyramid.levels))
        a_coarse_first = list(reversed(bank_features))
        sigmoids_coarse_first = []
        x = None
        head_idx = 0
        for j in range(n):
            parts = [h_coarse_first[j], a_coarse_first[j]]
            if x is not None:
                parts.insert(0, F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.blocks[j](torch.cat(parts, dim=1))
            if j >= n - self.num_output_scales:
                sigmoids_coarse_first.append(torch.sigmoid(self.heads[head_idx](x)))
                head_idx += 1
        return DepthPrediction(
            sigmoids=list(reversed(sigmoids_coarse_first)), scale_config=self.scale_config
        )

    def forward(self, pyramid, bank_features):
        return self.decode(pyramid, bank_features)


class DepthNet(nn.Module):
    """Encoder + frozen latent bank + decoder, with a bank-ablation switch.

    bank may be None when use_bank is False; bank_channels then sizes the
    zero features fed to the decoder so parameter shapes stay unchanged.
    """

    def __init__(
        self,
        encoder_channels=(64, 64, 128, 256, 512),
        decoder_channels=(256, 128, 64, 32, 16),
        bank=None,
        adapters=None,
        bank_channels=None,
        scale_config=None,
        use_bank=True,
    ):
        super().__init__()
        if use_bank and (bank is None or adapters is None):
            raise DepthNetError("use_bank requires both a generator and its adapters")
        if bank is not None:
            bank_channels = bank.channels
        if bank_channels is None:
            raise DepthNetError("bank_channels must be given when no bank is attached")
        if len(bank_channels) != len(encoder_channels):
            raise DepthNetError("bank and encoder level counts differ")
        self.encoder = DepthEncoder(channels=encoder_channels)
        self.decoder = DepthDecoder(
            encoder_channels=encoder_channels,
            bank_channels=bank_channels,
            decoder_channels=decoder_channels,
            scale_config=scale_config,
        )
        self.bank = bank
        self.adapters = adapters
        self.use_bank = use_bank

    def bank_features(self, pyramid):
        if self.use_bank:
            return self.bank.bank_forward(pyramid.levels, self.adapters)
        ch_fine_first = tuple(reversed(self.decoder.bank_channels))
        return [
            torch.zeros(
                lvl.shape[0], ch, *lvl.shape[-2:], dtype=lvl.dtype, device=lvl.device
            )
            for lvl, ch in zip(pyramid.levels, ch_fine_first)
        ]

    def forward(self, image):
        pyramid = self.encoder.encode(image)
        return self.decoder.decode(pyramid, self.bank_features(pyramid))

    def trainable_parameters(self):
        """Encoder, decoder and bank-mode adapter parameters (never the core)."""
        params = list(self.encoder.parameters()) + list(self.decoder.parameters())
        if self.adapters is not None:
            params += list(self.adapters.parameters())
        return params
