"""Depth and pose evaluation metrics plus trajectory accumulation.

Depth metrics follow the usual Eigen-style definitions (Abs Rel, Sq Rel,
RMSE, RMSE log, L1 and the 1.25^k delta accuracies). Pose metrics are the
mean relative translation error after a single global scale alignment
(monocular predictions are scale-ambiguous) and the mean geodesic rotation
angle in degrees.
"""

import math
from dataclasses import dataclass

import torch

from .geometry import Pose6, axis_angle_to_se3, se3_compose

DEFAULT_MIN_DEPTH = 0.1
DEFAULT_MAX_DEPTH = 20.0


class MetricsError(ValueError):
    """Raised for invalid metric inputs (shape mismatch, no valid pixels)."""


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    l1: float
    delta_1: float
    delta_2: float
    delta_3: float
    scaling_mode: str

    def as_dict(self):
        return {
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "rmse_log": self.rmse_log,
            "l1": self.l1,
            "delta_1": self.delta_1,
            "delta_2": self.delta_2,
            "delta_3": self.delta_3,
        }


@dataclass(frozen=True)
class PoseMetrics:
    rte: float
    rot: float

    def as_dict(self):
        return {"rte": self.rte, "rot": self.rot}


def depth_metrics(pred, gt, mode="median", min_depth=DEFAULT_MIN_DEPTH, max_depth=DEFAULT_MAX_DEPTH):
    """Compute all eight depth metrics over pixels with positive ground truth.

    mode "median" removes the global scale by rescaling pred with
    median(gt)/median(pred) before evaluation; "none" compares raw values.
    Both maps are clamped to [min_depth, max_depth] after any rescaling to
    keep the log metric stable.
    """
    if mode not in ("median", "none"):
        raise MetricsError(f"unknown scaling mode {mode!r}")
    pred = torch.as_tensor(pred, dtype=torch.float64).reshape(-1)
    gt = torch.as_tensor(gt, dtype=torch.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise MetricsError(f"pred has {pred.numel()} values but gt has {gt.numel()}")
    valid = gt > 0
    if not valid.any():
        raise MetricsError("no valid ground-truth pixels (all gt <= 0)")
    pred, gt = pred[valid], gt[valid]

    if mode == "median":
        # quantile interpolates the middle pair, matching the usual median
        pred = pred * (torch.quantile(gt, 0.5) / torch.quantile(pred, 0.5))
    pred = pred.clamp(min_depth, max_depth)
    gt = gt.clamp(min_depth, max_depth)

    diff = pred - gt
    ratio = torch.maximum(pred / gt, gt / pred)
    return DepthMetrics(
        abs_rel=(diff.abs() / gt).mean().item(),
        sq_rel=(diff**2 / gt).mean().item(),
        rmse=(diff**2).mean().sqrt().item(),
        rmse_log=((pred.log() - gt.log()) ** 2).mean().sqrt().item(),
        l1=diff.abs().mean().item(),
        delta_1=(ratio < 1.25).double().mean().item(),
        delta_2=(ratio < 1.25**2).double().mean().item(),
        delta_3=(ratio < 1.25**3).double().mean().item(),
        scaling_mode=mode,
    )


def _rotation_angle_deg(r_pred, r_gt):
    cosang = ((r_pred.transpose(-1, -2) @ r_gt).diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    return math.degrees(torch.arccos(cosang.clamp(-1.0, 1.0)).item())


def pose_metrics(pred_rel, gt_rel):
    """Mean scale-aligned translation error and mean geodesic rotation error.

    pred_rel / gt_rel: equal-length lists of Pose6 over adjacent frame
    pairs. A single global scale s = argmin_s sum ||s*t_pred - t_gt||^2 is
    applied to the predicted translations before the error, so the metric
    is invariant to the monocular scale ambiguity.
    """
    if len(pred_rel) != len(gt_rel):
        raise MetricsError(f"pose list lengths differ: {len(pred_rel)} vs {len(gt_rel)}")
    if len(pred_rel) == 0:
        raise MetricsError("pose lists must contain at least one pair")

    t_pred = torch.stack([p.as_tensor(torch.float64)[:3] for p in pred_rel])
    t_gt = torch.stack([g.as_tensor(torch.float64)[:3] for g in gt_rel])
    denom = (t_pred * t_pred).sum()
    scale = ((t_pred * t_gt).sum() / denom).item() if denom > 0 else 1.0

    rte = (scale * t_pred - t_gt).norm(dim=1).mean().item()
    rot = sum(
        _rotation_angle_deg(
            axis_angle_to_se3(p.as_tensor(torch.float64))[:3, :3],
            axis_angle_to_se3(g.as_tensor(torch.float64))[:3, :3],
        )
        for p, g in zip(pred_rel, gt_rel)
    ) / len(pred_rel)
    return PoseMetrics(rte=rte, rot=rot)


def accumulate_trajectory(rel_poses):
    """Chain relative poses into absolute transforms, starting from identity.

    Returns len(rel_poses) + 1 matrices: entry k+1 composes entry k with
    rel_poses[k].
    """
    traj = [torch.eye(4, dtype=torch.float64)]
    for pose in rel_poses:
        step = pose if torch.is_tensor(pose) else axis_angle_to_se3(pose.as_tensor(torch.float64))
        traj.append(se3_compose(traj[-1], step))
    return traj


def trajectory_positions(traj):
    """(N, 3) camera positions from a list of 4x4 transforms."""
    return torch.stack([m[:3, 3] for m in traj])


def write_trajectory_text(path, traj):
    """Columnar trajectory dump: one 'frame x y z' line per pose."""
    pos = trajectory_positions(traj)
    with open(path, "w") as fh:
        fh.write("# frame x y z\n")
        for i, p in enumerate(pos):
            fh.write(f"{i} {p[0].item():.9g} {p[1].item():.9g} {p[2].item():.9g}\n")


def plot_trajectories(path, named_trajs):
    """Render xz and xy projections of one or more trajectories to a PNG.

    named_trajs: mapping label -> list of 4x4 transforms.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_xz, ax_xy) = plt.subplots(1, 2, figsize=(10, 4.5))
    for label, traj in named_trajs.items():
        pos = trajectory_positions(traj).numpy()
        ax_xz.plot(pos[:, 0], pos[:, 2], label=label)
        ax_xy.plot(pos[:, 0], pos[:, 1], label=label)
    ax_xz.set_xlabel("x")
    ax_xz.set_ylabel("z")
    ax_xz.set_title("xz projection")
    ax_xy.set_xlabel("x")
    ax_xy.set_ylabel("y")
    ax_xy.set_title("xy projection")
    ax_xz.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
