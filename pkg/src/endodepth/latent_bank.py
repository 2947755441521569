"""Generative latent bank: a StyleGAN-like depth-map generator.

Pretrained adversarially (Wasserstein loss + gradient penalty) on a corpus
of depth maps, then frozen. In bank mode the per-level styles no longer
come from Gaussian vectors: encoder features are pooled through trainable
adapters and injected into the frozen upscaling cascade via fresh AdIN
blocks, and the per-level feature maps (before the output head) are handed
to the depth decoder.
"""

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_DIM = 512


class LatentBankError(ValueError):
    """Raised for invalid latent-bank inputs (ladder/channel mismatches)."""


class FrozenBankError(RuntimeError):
    """Raised when the frozen generator core has been mutated."""


def adin_fuse(features, style):
    """Adaptive instance normalization: gamma * (x - mu) / sigma + beta.

    features: (B, C, H, W). style: (2C,) or (B, 2C), first C entries are
    the per-channel scales gamma, the rest the shifts beta. Statistics are
    computed per sample and channel.
    """
    if features.dim() != 4:
        raise LatentBankError(f"features must be (B, C, H, W), got {tuple(features.shape)}")
    c = features.shape[1]
    if style.shape[-1] != 2 * c:
        raise LatentBankError(
            f"style must supply 2*{c} values (gamma, beta), got {style.shape[-1]}"
        )
    if style.dim() == 1:
        style = style[None].expand(features.shape[0], -1)
    gamma = style[:, :c, None, None]
    beta = style[:, c:, None, None]
    mu = features.mean(dim=(2, 3), keepdim=True)
    sigma = torch.sqrt(features.var(dim=(2, 3), keepdim=True, unbiased=False) + 1e-8)
    return gamma * (features - mu) / sigma + beta


class _UpBlock(nn.Module):
    """One rung of the cascade: optional x2 transpose-conv, then conv + AdIN."""

    def __init__(self, in_ch, out_ch, upsample):
        super().__init__()
        self.upsample = None
        if upsample:
            self.upsample = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
            in_ch = out_ch
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, style):
        if self.upsample is not None:
            x = self.act(self.upsample(x))
        x = self.conv(x)
        x = adin_fuse(x, style)
        return self.act(x)


class DepthGenerator(nn.Module):
    """Core upscaling cascade plus the pretraining-mode style heads.

    The core (learned base map, up blocks, output heads) carries the
    pretrained prior and is the part that gets frozen; the pretraining
    style heads map [z, per-level noise vector] to AdIN parameters and are
    bypassed entirely in bank mode.
    """

    def __init__(self, channels=(256, 128, 64, 64, 32), base_resolution=4, latent_dim=LATENT_DIM):
        super().__init__()
        if len(channels) < 2:
            raise LatentBankError("generator needs at least two resolution levels")
        self.channels = tuple(channels)
        self.base_resolution = int(base_resolution)
        self.latent_dim = int(latent_dim)
        self._frozen = False
        self._frozen_digest = None

        self.base = nn.Parameter(torch.randn(1, channels[0], base_resolution, base_resolution))
        self.blocks = nn.ModuleList()
        self.to_depth = nn.ModuleList()
        for lvl, ch in enumerate(channels):
            in_ch = channels[max(lvl - 1, 0)]
            self.blocks.append(_UpBlock(in_ch, ch, upsample=lvl > 0))
            self.to_depth.append(nn.Conv2d(ch, 1, 1))
        # pretraining styles: affine over [main latent, fresh per-level noise]
        self.style_heads = nn.ModuleList(
            [nn.Linear(2 * latent_dim, 2 * ch) for ch in channels]
        )

    # -- resolution ladder ------------------------------------------------

    @property
    def n_levels(self):
        return len(self.channels)

    def ladder(self):
        """Supported output resolutions, coarsest to finest."""
        return [self.base_resolution * 2**k for k in range(self.n_levels)]

    def _stage_for(self, resolution):
        ladder = self.ladder()
        if resolution not in ladder:
            raise LatentBankError(f"resolution {resolution} not in supported ladder {ladder}")
        return ladder.index(resolution)

    # -- pretraining mode --------------------------------------------------

    def generate(self, z, noise_seed, resolution):
        """Sample depth maps from latents: (B, 1, resolution, resolution) in [0, 1].

        Deterministic given (parameters, z, noise_seed): the per-level
        Gaussian style vectors are drawn from a generator seeded with
        noise_seed.
        """
        if z.dim() == 1:
            z = z[None]
        if z.shape[-1] != self.latent_dim:
            raise LatentBankError(f"latent must have {self.latent_dim} dims, got {z.shape[-1]}")
        stage = self._stage_for(resolution)
        gen = torch.Generator(device="cpu").manual_seed(int(noise_seed))
        b = z.shape[0]
        x = self.base.expand(b, -1, -1, -1).to(z.dtype)
        for lvl in range(stage + 1):
            noise = torch.randn(b, self.latent_dim, generator=gen, dtype=z.dtype).to(z.device)
            style = self.style_heads[lvl](torch.cat([z, noise], dim=1))
            x = self.blocks[lvl](x, style)
        return torch.sigmoid(self.to_depth[stage](x))

    # -- bank mode ----------------------------------------------------------

    def bank_forward(self, pyramid_levels, adapters):
        """Run the frozen cascade prompted by encoder features.

        pyramid_levels: encoder maps ordered finest to coarsest (the
        FeaturePyramid convention). Returns bank features in the same
        order, resolution-aligned with the inputs. Gradients reach the
        encoder features and the adapter parameters only.
        """
        if not self._frozen:
            raise FrozenBankError("latent bank must be frozen before bank_forward")
        self.verify_frozen()
        if len(pyramid_levels) != self.n_levels:
            raise LatentBankError(
                f"pyramid has {len(pyramid_levels)} levels, bank expects {self.n_levels}"
            )
        coarse_first = list(reversed(pyramid_levels))
        for lvl in range(1, self.n_levels):
            prev, cur = coarse_first[lvl - 1], coarse_first[lvl]
            if cur.shape[-2:] != (prev.shape[-2] * 2, prev.shape[-1] * 2):
                raise LatentBankError("pyramid levels must double in resolution")
        x = adapters.project_base(coarse_first[0])
        feats = []
        for lvl in range(self.n_levels):
            style = adapters.style_for(lvl, coarse_first[lvl])
            x = self.blocks[lvl](x, style)
            feats.append(x)
        return list(reversed(feats))  # finest first, matching the input order

    # -- freezing ------------------------------------------------------------

    def _digest(self):
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def freeze(self):
        """Lock the core: no gradients, and verify_frozen() guards the bytes."""
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        self._frozen_digest = self._digest()
        return self

    @property
    def frozen(self):
        return self._frozen

    def verify_frozen(self):
        if not self._frozen:
            raise FrozenBankError("latent bank is not frozen")
        if self._digest() != self._frozen_digest:
            raise FrozenBankError("frozen latent-bank weights were modified")


class BankStyleAdapters(nn.Module):
    """Trainable bank-mode AdIN set: maps encoder features to styles.

    One affine head per level (over globally pooled encoder features) plus
    a 1x1 projection turning the coarsest encoder map into the cascade's
    base input. These stay trainable while the generator core is frozen.
    """

    def __init__(self, encoder_channels, bank_channels):
        super().__init__()
        if len(encoder_channels) != len(bank_channels):
            raise LatentBankError(
                f"encoder has {len(encoder_channels)} levels, bank has {len(bank_channels)}"
            )
        enc_coarse_first = tuple(reversed(tuple(encoder_channels)))
        self.encoder_channels = tuple(encoder_channels)
        self.base_proj = nn.Conv2d(enc_coarse_first[0], bank_channels[0], 1)
        self.heads = nn.ModuleList(
            [nn.Linear(e, 2 * b) for e, b in zip(enc_coarse_first, bank_channels)]
        )

    def project_base(self, coarsest):
        if coarsest.shape[1] != self.base_proj.in_channels:
            raise LatentBankError(
                f"coarsest encoder level has {coarsest.shape[1]} channels, "
                f"adapters expect {self.base_proj.in_channels}"
            )
        return self.base_proj(coarsest)

    def style_for(self, level, features):
        head = self.heads[level]
        if features.shape[1] != head.in_features:
            raise LatentBankError(
                f"level {level} has {features.shape[1]} channels, adapter expects {head.in_features}"
            )
        return head(features.mean(dim=(2, 3)))


class DepthCritic(nn.Module):
    """Residual CNN scoring depth maps with a single scalar per map."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        layers = [nn.Conv2d(1, channels[0], 3, padding=1), nn.LeakyReLU(0.2)]
        in_ch = channels[0]
        for ch in channels:
            layers += [_CriticBlock(in_ch, ch)]
            in_ch = ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, 1)

    def forward(self, x):
        feats = self.body(x).mean(dim=(2, 3))
        return self.head(feats).squeeze(-1)


class _CriticBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        y = self.act(self.conv1(x))
        y = self.conv2(y)
        y = self.act(y + self.skip(x))
        return F.avg_pool2d(y, 2)


def gradient_penalty(critic, real, fake, seed=None, generator=None, create_graph=True):
    """Mean squared deviation of the critic's gradient norm from 1.

    Evaluated on per-sample uniform interpolates between real and fake
    batches, as in WGAN-GP.
    """
    if real.shape != fake.shape:
        raise LatentBankError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    gen = generator
    if gen is None and seed is not None:
        gen = torch.Generator(device="cpu").manual_seed(int(seed))
    u = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=gen, dtype=real.dtype)
    mixed = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    scores = critic(mixed)
    grads = torch.autograd.grad(
        scores.sum(), mixed, create_graph=create_graph, retain_graph=create_graph
    )[0]
    norms = grads.reshape(grads.shape[0], -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


@dataclass
class WganLosses:
    loss_d: torch.Tensor
    loss_g: torch.Tensor
    d_real: float
    d_fake: float
    gp: float

    def __iter__(self):  # allow  loss_d, loss_g = wgan_losses(...)
        return iter((self.loss_d, self.loss_g))


def wgan_losses(critic, real, fake, gp_weight=10.0, seed=None, generator=None):
    """Critic and generator objectives of the gradient-penalty Wasserstein GAN.

    loss_d = E[D(fake)] - E[D(real)] + gp_weight * GP  (critic minimizes)
    loss_g = -E[D(fake)]                               (generator minimizes)
    """
    score_real = critic(real)
    score_fake = critic(fake)
    gp = (
        gradient_penalty(critic, real, fake, seed=seed, generator=generator)
        if gp_weight != 0.0
        else torch.zeros((), dtype=real.dtype)
    )
    loss_d = score_fake.mean() - score_real.mean() + gp_weight * gp
    loss_g = -score_fake.mean()
    return WganLosses(
        loss_d=loss_d,
        loss_g=loss_g,
        d_real=score_real.mean().item(),
        d_fake=score_fake.mean().item(),
        gp=gp.detach().item(),
    )


@dataclass
class PretrainConfig:
    """Settings for progressive WGAN-GP pretraining of the latent bank."""

    resolutions: tuple = (16, 32, 64)
    steps_per_stage: tuple = (500, 500, 1000)
    batch_size: int = 8
    learning_rate: float = 1e-4
    critic_steps: int = 5
    gp_weight: float = 10.0
    latent_dim: int = 64
    channels: tuple = (64, 64, 32, 32, 16)
    base_resolution: int = 4
    critic_channels: tuple = (16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        if len(self.resolutions) != len(self.steps_per_stage):
            raise LatentBankError("resolutions and steps_per_stage must align")
        ladder = [self.base_resolution * 2**k for k in range(len(self.channels))]
        for res in self.resolutions:
            if res not in ladder:
                raise LatentBankError(f"schedule resolution {res} not in ladder {ladder}")
        if list(self.resolutions) != sorted(self.resolutions):
            raise LatentBankError("progressive schedule must be non-decreasing")


@dataclass
class PretrainResult:
    generator: DepthGenerator
    critic: DepthCritic
    history: list = field(default_factory=list)
    stage_checkpoints: list = field(default_factory=list)


def non_collapse_fraction(generator, resolution, n_samples=64, seed=0):
    """Fraction of sample pairs with nonzero mean absolute difference."""
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    z = torch.randn(n_samples, generator.latent_dim, generator=gen)
    with torch.no_grad():
        maps = generator.generate(z, noise_seed=seed + 1, resolution=resolution)
    flat = maps.reshape(n_samples, -1)
    distinct = 0
    total = 0
    for i in range(n_samples):
        mad = (flat[i + 1 :] - flat[i]).abs().mean(dim=1)
        distinct += int((mad > 0).sum())
        total += mad.numel()
    return distinct / total


def pretrain(corpus, cfg, checkpoint_fn=None):
    """Adversarial pretraining with a progressive resolution schedule.

    corpus: (N, 1, R, R) tensor of depth maps in [0, 1] at the final
    resolution (coarser stages use area-downsampled copies). Alternates
    cfg.critic_steps critic updates per generator update. checkpoint_fn,
    when given, is called as checkpoint_fn(stage_resolution, generator,
    critic) at the end of each growth stage.

    Returns a PretrainResult whose history holds one record per critic
    step: {step, resolution, loss_d, loss_g, d_real, d_fake, gap, gp}.
    """
    corpus = torch.as_tensor(corpus, dtype=torch.float32)
    if corpus.dim() != 4 or corpus.shape[0] == 0:
        raise LatentBankError("corpus must be a non-empty (N, 1, R, R) tensor")
    if corpus.min() < 0 or corpus.max() > 1:
        raise LatentBankError("corpus depth maps must be normalized to [0, 1]")

    torch.manual_seed(cfg.seed)
    generator = DepthGenerator(
        channels=cfg.channels, base_resolution=cfg.base_resolution, latent_dim=cfg.latent_dim
    )
    critic = DepthCritic(channels=cfg.critic_channels)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.9))

    data_gen = torch.Generator(device="cpu").manual_seed(cfg.seed + 1)
    noise_gen = torch.Generator(device="cpu").manual_seed(cfg.seed + 2)
    gp_gen = torch.Generator(device="cpu").manual_seed(cfg.seed + 3)

    result = PretrainResult(generator=generator, critic=critic)
    step = 0

    def sample_real(resolution):
        idx = torch.randint(corpus.shape[0], (cfg.batch_size,), generator=data_gen)
        batch = corpus[idx]
        if batch.shape[-1] != resolution:
            batch = F.adaptive_avg_pool2d(batch, resolution)
        return batch

    def sample_fake(resolution):
        z = torch.randn(cfg.batch_size, cfg.latent_dim, generator=noise_gen)
        seed = int(torch.randint(2**31 - 1, (1,), generator=noise_gen))
        return generator.generate(z, noise_seed=seed, resolution=resolution)

    for resolution, stage_steps in zip(cfg.resolutions, cfg.steps_per_stage):
        for _ in range(stage_steps):
            # critic update
            real = sample_real(resolution)
            fake = sample_fake(resolution).detach()
            losses = wgan_losses(critic, real, fake, gp_weight=cfg.gp_weight, generator=gp_gen)
            opt_d.zero_grad()
            losses.loss_d.backward()
            opt_d.step()

            step += 1
            result.history.append(
                {
                    "step": step,
                    "resolution": resolution,
                    "loss_d": losses.loss_d.item(),
                    "loss_g": losses.loss_g.item(),
                    "d_real": losses.d_real,
                    "d_fake": losses.d_fake,
                    "gap": abs(losses.d_real - losses.d_fake),
                    "gp": losses.gp,
                }
            )

            if step % cfg.critic_steps == 0:
                fake = sample_fake(resolution)
                loss_g = -critic(fake).mean()
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()

        result.stage_checkpoints.append(resolution)
        if checkpoint_fn is not None:
            checkpoint_fn(resolution, generator, critic)

    return result
