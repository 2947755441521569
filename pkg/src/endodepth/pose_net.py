"""Pose encoder producing a Gaussian posterior over the 6-DoF relative pose.

The network is the encoder of a variational autoencoder whose decoder is
the differentiable reprojection in geometry.inverse_warp. Its output is a
diagonal Gaussian over [tx, ty, tz, rx, ry, rz]; a per-axis scale vector
maps the N(0, I) prior onto physically gentle motions (characteristic
translation step and rotation angle) before the KL term.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

LOGVAR_MIN = -10.0
LOGVAR_MAX = 2.0


class PoseNetError(ValueError):
    """Raised for invalid pose-network inputs."""


@dataclass(frozen=True)
class PosePrior:
    """Per-axis characteristic scales applied before the standard-normal KL."""

    translation_scale: float = 1.0
    rotation_scale: float = 0.1

    def __post_init__(self):
        if self.translation_scale <= 0 or self.rotation_scale <= 0:
            raise PoseNetError("prior scales must be strictly positive")

    def scale_vector(self, dtype=torch.float32, device=None):
        s = [self.translation_scale] * 3 + [self.rotation_scale] * 3
        return torch.tensor(s, dtype=dtype, device=device)


@dataclass
class PoseDistribution:
    """Diagonal Gaussian over the 6 pose parameters, in physical units.

    log_variance parameterizes the variance in prior-scaled units; the
    physical standard deviation of axis j is exp(log_variance_j / 2) *
    scale_j. Values are clamped into [LOGVAR_MIN, LOGVAR_MAX] on
    construction.
    """

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape or self.mean.shape[-1] != 6:
            raise PoseNetError(
                f"mean/log_variance must share a (..., 6) shape, got "
                f"{tuple(self.mean.shape)} and {tuple(self.log_variance.shape)}"
            )
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_variance).all()):
            raise PoseNetError("pose distribution parameters must be finite")
        self.log_variance = self.log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)


def sample_pose(dist, mode, seed=None, prior=None):
    """Draw a pose from the posterior via the reparameterization trick.

    mode "train": mean + exp(log_variance / 2) * eps * scale with
    eps ~ N(0, I) from seed; gradients flow into mean and log_variance.
    mode "eval": the mean, deterministically, regardless of seed.
    Returns a tensor shaped like dist.mean.
    """
    if mode == "eval":
        return dist.mean
    if mode != "train":
        raise PoseNetError(f"mode must be 'train' or 'eval', got {mode!r}")
    prior = prior or PosePrior()
    gen = None
    if seed is not None:
        gen = torch.Generator(device=dist.mean.device)
        gen.manual_seed(int(seed))
    eps = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype, device=dist.mean.device)
    scale = prior.scale_vector(dist.mean.dtype, dist.mean.device)
    return dist.mean + torch.exp(0.5 * dist.log_variance) * eps * scale


def kl_to_prior(dist, prior=None):
    """KL(posterior || N(0, I)) over the six prior-scaled pose parameters.

    Per sample: sum_j 0.5 * (sigma_j^2 + mu_j^2 - 1 - log sigma_j^2) with
    mu_j = mean_j / scale_j and sigma_j^2 = exp(log_variance_j). Batched
    distributions are averaged over the batch.
    """
    prior = prior or PosePrior()
    scale = prior.scale_vector(dist.mean.dtype, dist.mean.device)
    mu = dist.mean / scale
    var = torch.exp(dist.log_variance)
    kl = 0.5 * (var + mu * mu - 1.0 - dist.log_variance).sum(dim=-1)
    return kl.mean()


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ELU()

    def forward(self, x):
        return self.act(x + self.conv2(self.act(self.conv1(x))))


class PoseEncoder(nn.Module):
    """Residual CNN over a channel-concatenated frame pair with two heads.

    encode_pose(frame_a, frame_b) returns the posterior over the relative
    pose taking frame_b's camera coordinates into frame_a's.
    """

    def __init__(self, widths=(16, 32, 64), prior=None):
        super().__init__()
        self.prior = prior or PosePrior()
        layers = []
        in_ch = 6
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.ELU(), _ResBlock(w)]
            in_ch = w
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.mean_head = nn.Linear(in_ch, 6)
        self.logvar_head = nn.Linear(in_ch, 6)
        # start near the identity pose with modest posterior noise
        nn.init.normal_(self.mean_head.weight, std=1e-3)
        nn.init.zeros_(self.mean_head.bias)
        nn.init.zeros_(self.logvar_head.weight)
        nn.init.constant_(self.logvar_head.bias, -4.0)

    def encode_pose(self, frame_a, frame_b):
        if frame_a.shape != frame_b.shape:
            raise PoseNetError(
                f"frame shapes differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}"
            )
        squeeze = frame_a.dim() == 3
        if squeeze:
            frame_a, frame_b = frame_a[None], frame_b[None]
        feats = self.pool(self.body(torch.cat([frame_a, frame_b], dim=1))).flatten(1)
        mean = self.mean_head(feats)
        logvar = self.logvar_head(feats)
        if squeeze:
            mean, logvar = mean[0], logvar[0]
        return PoseDistribution(mean=mean, log_variance=logvar)

    def forward(self, frame_a, frame_b):
        return self.encode_pose(frame_a, frame_b)
