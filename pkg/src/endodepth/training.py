"""Self-supervised training loop: reprojection MSE + beta * KL.

Each step warps the adjacent frames into the current one using the
predicted depth (each scale upsampled to full resolution first) and poses
sampled from the pose posterior, then minimizes the masked photometric MSE
plus the KL regularizer. Ablation switches disable the latent bank (zero
features) and/or the VAE path (mean poses, no KL).
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn.functional as F

from .depth_net import DepthNet, DepthScaleConfig
from .geometry import CameraIntrinsics, inverse_warp
from .latent_bank import BankStyleAdapters
from .pose_net import PoseEncoder, PosePrior, kl_to_prior, sample_pose
from .data_io import CheckpointBundle, save_checkpoint


class TrainingError(ValueError):
    """Raised for invalid training inputs or configuration."""


@dataclass
class FrameTriplet:
    """(frame -1, frame 0, frame +1) with intrinsics; the training unit.

    Images are RGB in [0, 1], shaped (3, H, W) or batched (B, 3, H, W).
    Ground-truth depth (for frame 0) and relative poses are carried for
    evaluation only; gt_pose_minus/plus map frame-0 camera points into the
    -1 / +1 camera frames.
    """

    x_minus: torch.Tensor
    x_zero: torch.Tensor
    x_plus: torch.Tensor
    intrinsics: CameraIntrinsics
    gt_depth: torch.Tensor = None
    gt_pose_minus: object = None
    gt_pose_plus: object = None

    def __post_init__(self):
        if not (self.x_minus.shape == self.x_zero.shape == self.x_plus.shape):
            raise TrainingError("triplet frames must share one shape")
        h, w = self.x_zero.shape[-2:]
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise TrainingError(
                f"frames are {h}x{w} but intrinsics say "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )


@dataclass
class TrainConfig:
    batch_size: int = 12
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 20
    input_resolution: int = 480
    beta: float = 1e-3
    use_latent_bank: bool = True
    use_vae: bool = True
    seed: int = 0
    max_steps: int = None
    sample_poses: bool = True
    min_over_sources: bool = False
    min_depth: float = 0.1
    max_depth: float = 20.0
    pose_prior_translation: float = 1.0
    pose_prior_rotation: float = 0.1
    encoder_channels: tuple = (64, 64, 128, 256, 512)
    decoder_channels: tuple = (256, 128, 64, 32, 16)
    bank_channels: tuple = (256, 128, 64, 64, 32)
    pose_widths: tuple = (16, 32, 64)

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "weight_decay", "epochs", "input_resolution"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")
        if self.beta < 0:
            raise TrainingError("beta must be non-negative")
        div = 2 ** (len(self.encoder_channels) - 1)
        if self.input_resolution % div:
            raise TrainingError(
                f"input_resolution {self.input_resolution} must be divisible by {div}"
            )

    def scale_config(self):
        return DepthScaleConfig(min_depth=self.min_depth, max_depth=self.max_depth)

    def pose_prior(self):
        return PosePrior(
            translation_scale=self.pose_prior_translation,
            rotation_scale=self.pose_prior_rotation,
        )


@dataclass
class LossBreakdown:
    """Per-step loss components; total = reproj_minus + reproj_plus + beta*kl."""

    reproj_minus: torch.Tensor
    reproj_plus: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor
    per_scale: list = field(default_factory=list)
    empty_mask_warning: bool = False

    def as_record(self):
        return {
            "reproj_minus": self.reproj_minus.detach().item(),
            "reproj_plus": self.reproj_plus.detach().item(),
            "kl": self.kl.detach().item(),
            "total": self.total.detach().item(),
            "per_scale": [(float(a), float(b)) for a, b in self.per_scale],
            "empty_mask_warning": self.empty_mask_warning,
        }


def reprojection_loss(target, warped, mask):
    """Mean squared difference over valid pixels (all channels).

    An empty mask yields 0; callers surface that through
    LossBreakdown.empty_mask_warning.
    """
    if target.shape != warped.shape:
        raise TrainingError(
            f"target {tuple(target.shape)} and warped {tuple(warped.shape)} differ"
        )
    valid = mask.to(target.dtype)
    count = valid.sum() * target.shape[-3]
    if count == 0:
        return torch.zeros((), dtype=target.dtype, device=target.device)
    return (((target - warped) ** 2) * valid).sum() / count


def _batched(x):
    return x if x.dim() == 4 else x[None]


def total_loss(triplet, depth_pred, q_minus, q_plus, cfg, seed=0):
    """Assemble the training objective for one (possibly batched) triplet.

    For every predicted scale the depth map is upsampled to the full
    resolution, both adjacent frames are warped into frame 0 with poses
    drawn from the posteriors, and the masked MSEs are averaged over
    scales. With use_vae the KL of both posteriors is added, weighted by
    beta. Deterministic given seed.

    With min_over_sources the per-pixel minimum of the two squared errors
    replaces the two separate terms; the minimum is split evenly between
    reproj_minus and reproj_plus so the total stays the component sum.
    """
    x_minus = _batched(triplet.x_minus)
    x_zero = _batched(triplet.x_zero)
    x_plus = _batched(triplet.x_plus)
    k = triplet.intrinsics

    prior = cfg.pose_prior()
    mode = "train" if (cfg.use_vae and cfg.sample_poses) else "eval"
    pose_minus = sample_pose(q_minus, mode, seed=2 * seed, prior=prior)
    pose_plus = sample_pose(q_plus, mode, seed=2 * seed + 1, prior=prior)

    h, w = x_zero.shape[-2:]
    minus_terms = []
    plus_terms = []
    per_scale = []
    warned = False
    for s in range(depth_pred.num_scales):
        depth = depth_pred.depth(s)
        if depth.shape[-2:] != (h, w):
            depth = F.interpolate(depth, size=(h, w), mode="bilinear", align_corners=False)
        warped_m, mask_m = inverse_warp(x_minus, depth, pose_minus, k)
        warped_p, mask_p = inverse_warp(x_plus, depth, pose_plus, k)
        if not (mask_m.any() and mask_p.any()):
            warned = True
        if cfg.min_over_sources:
            err_m = ((x_zero - warped_m) ** 2).mean(dim=1, keepdim=True)
            err_p = ((x_zero - warped_p) ** 2).mean(dim=1, keepdim=True)
            big = torch.finfo(err_m.dtype).max
            err_m = torch.where(mask_m, err_m, torch.full_like(err_m, big))
            err_p = torch.where(mask_p, err_p, torch.full_like(err_p, big))
            combined = torch.minimum(err_m, err_p)
            either = mask_m | mask_p
            if either.any():
                term = (combined * either).sum() / either.sum()
            else:
                term = torch.zeros((), dtype=err_m.dtype)
                warned = True
            l_minus = term / 2
            l_plus = term / 2
        else:
            l_minus = reprojection_loss(x_zero, warped_m, mask_m)
            l_plus = reprojection_loss(x_zero, warped_p, mask_p)
        minus_terms.append(l_minus)
        plus_terms.append(l_plus)
        per_scale.append((l_minus.detach(), l_plus.detach()))

    reproj_minus = torch.stack(minus_terms).mean()
    reproj_plus = torch.stack(plus_terms).mean()
    if cfg.use_vae:
        kl = kl_to_prior(q_minus, prior=prior) + kl_to_prior(q_plus, prior=prior)
    else:
        kl = torch.zeros((), dtype=reproj_minus.dtype)
    total = reproj_minus + reproj_plus + cfg.beta * kl
    return LossBreakdown(
        reproj_minus=reproj_minus,
        reproj_plus=reproj_plus,
        kl=kl,
        total=total,
        per_scale=per_scale,
        empty_mask_warning=warned,
    )


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    history: list
    depth_net: DepthNet
    pose_net: PoseEncoder


def build_models(cfg, bank=None):
    """Instantiate depth and pose networks per config, wiring in the bank."""
    torch.manual_seed(cfg.seed)
    adapters = None
    bank_channels = cfg.bank_channels
    if bank is not None:
        bank_channels = bank.channels
    if cfg.use_latent_bank:
        if bank is None:
            raise TrainingError("use_latent_bank requires a pretrained generator")
        if not bank.frozen:
            raise TrainingError("latent bank must be frozen before self-supervised training")
        adapters = BankStyleAdapters(
            encoder_channels=cfg.encoder_channels, bank_channels=bank_channels
        )
    depth_net = DepthNet(
        encoder_channels=cfg.encoder_channels,
        decoder_channels=cfg.decoder_channels,
        bank=bank if cfg.use_latent_bank else None,
        adapters=adapters,
        bank_channels=bank_channels,
        scale_config=cfg.scale_config(),
        use_bank=cfg.use_latent_bank,
    )
    pose_net = PoseEncoder(widths=cfg.pose_widths)
    return depth_net, pose_net


def make_bundle(depth_net, pose_net, cfg, bank=None, optimizer=None, step=0):
    blobs = {
        "depth_encoder": depth_net.encoder.state_dict(),
        "depth_decoder": depth_net.decoder.state_dict(),
        "adin_trainable": depth_net.adapters.state_dict() if depth_net.adapters else {},
        "pose_encoder": pose_net.state_dict(),
    }
    frozen = False
    if bank is not None:
        blobs["latent_bank"] = bank.state_dict()
        frozen = bank.frozen
    return CheckpointBundle(
        blobs=blobs,
        latent_bank_frozen=frozen,
        optimizer_state=optimizer.state_dict() if optimizer else None,
        config=asdict(cfg),
        step=step,
    )


def train(dataset, cfg, bank=None, out_dir=None):
    """Run the self-supervised loop over FrameTriplets.

    Adam over encoder, decoder, bank-mode AdIN adapters and pose encoder;
    one LossBreakdown record per step (written as JSON lines when out_dir
    is given) and a checkpoint per epoch. Returns a TrainResult whose
    bundle reflects the final state.
    """
    dataset = list(dataset)
    if not dataset:
        raise TrainingError("training dataset is empty")
    k0 = dataset[0].intrinsics
    for t in dataset:
        if t.intrinsics != k0:
            raise TrainingError("all triplets in a run must share intrinsics")

    depth_net, pose_net = build_models(cfg, bank=bank)
    params = depth_net.trainable_parameters() + list(pose_net.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    history = []
    step = 0
    order_gen = torch.Generator().manual_seed(cfg.seed + 7919)
    done = False
    try:
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(dataset), generator=order_gen).tolist()
            for start in range(0, len(order), cfg.batch_size):
                batch_idx = order[start : start + cfg.batch_size]
                batch = FrameTriplet(
                    x_minus=torch.stack([_batched(dataset[i].x_minus)[0] for i in batch_idx]),
                    x_zero=torch.stack([_batched(dataset[i].x_zero)[0] for i in batch_idx]),
                    x_plus=torch.stack([_batched(dataset[i].x_plus)[0] for i in batch_idx]),
                    intrinsics=k0,
                )
                pred = depth_net(batch.x_zero)
                q_minus = pose_net.encode_pose(batch.x_minus, batch.x_zero)
                q_plus = pose_net.encode_pose(batch.x_plus, batch.x_zero)
                breakdown = total_loss(
                    batch, pred, q_minus, q_plus, cfg, seed=cfg.seed * 100003 + step
                )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()

                step += 1
                record = {"step": step, "epoch": epoch, **breakdown.as_record()}
                history.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break

            if cfg.use_latent_bank:
                bank.verify_frozen()
            if out:
                bundle = make_bundle(depth_net, pose_net, cfg, bank, optimizer, step)
                save_checkpoint(bundle, out / "checkpoints" / f"epoch_{epoch:04d}.pt")
            if done:
                break
    finally:
        if log_fh:
            log_fh.close()

    bundle = make_bundle(depth_net, pose_net, cfg, bank, optimizer, step)
    if out:
        save_checkpoint(bundle, out / "checkpoints" / "final.pt")
    return TrainResult(bundle=bundle, history=history, depth_net=depth_net, pose_net=pose_net)
