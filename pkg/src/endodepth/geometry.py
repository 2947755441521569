"""Pinhole camera model, SE(3) pose algebra and differentiable inverse warping.

All functions are pure and operate on batched torch tensors. Image-like
tensors follow the (B, C, H, W) layout; poses are 6-vectors laid out as
[tx, ty, tz, rx, ry, rz] with the rotation part in axis-angle (radians).
Everything is differentiable w.r.t. depth and pose so the warp can act as
the decoder of the pose variational autoencoder.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

# z at or below this value counts as behind the camera.
Z_EPS = 1e-6

# slack on the image-bounds test so round-tripped border pixels stay valid
PIXEL_BOUNDS_EPS = 1e-6

# below this angle the Rodrigues formula switches to its Taylor series
SMALL_ANGLE = 1e-6


class GeometryError(ValueError):
    """An input violates a geometric contract (shape, finiteness, SE(3) laws)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters. Focal lengths / principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self, dtype=torch.float32, device=None):
        """3x3 calibration matrix K."""
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
            device=device,
        )


@dataclass(frozen=True)
class Pose6:
    """6-DoF relative pose: axis-angle rotation (radians) + translation (scene units)."""

    rotation: tuple
    translation: tuple

    def __post_init__(self):
        rot = tuple(float(v) for v in self.rotation)
        tra = tuple(float(v) for v in self.translation)
        if len(rot) != 3 or len(tra) != 3:
            raise GeometryError("rotation and translation must each have 3 components")
        if not all(math.isfinite(v) for v in rot + tra):
            raise GeometryError("pose entries must be finite")
        if math.sqrt(sum(v * v for v in rot)) >= math.pi:
            raise GeometryError("axis-angle rotation magnitude must be < pi (canonical form)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    def as_tensor(self, dtype=torch.float32, device=None):
        """(6,) tensor [tx, ty, tz, rx, ry, rz]."""
        return torch.tensor(self.translation + self.rotation, dtype=dtype, device=device)

    @classmethod
    def from_tensor(cls, vec):
        v = [float(x) for x in vec.reshape(-1)]
        if len(v) != 6:
            raise GeometryError(f"pose vector must have 6 entries, got {len(v)}")
        return cls(rotation=tuple(v[3:]), translation=tuple(v[:3]))


def _as_pose_tensor(pose, dtype=None, device=None):
    """Accept a Pose6 or a (..., 6) tensor, return a (B, 6) tensor."""
    if isinstance(pose, Pose6):
        t = pose.as_tensor(dtype=dtype or torch.float32, device=device)
    elif torch.is_tensor(pose):
        t = pose
    else:
        raise GeometryError(f"expected Pose6 or tensor, got {type(pose).__name__}")
    if t.shape[-1] != 6:
        raise GeometryError(f"pose tensor must end in dim 6, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise GeometryError("pose contains non-finite entries")
    return t.reshape(-1, 6)


def axis_angle_to_rotation(r):
    """Rodrigues exponential map, (..., 3) axis-angle -> (..., 3, 3) rotation.

    Uses the 2nd-order Taylor expansion of sin(t)/t and (1-cos t)/t^2 below
    SMALL_ANGLE so the map stays differentiable through zero rotation.
    """
    theta_sq = (r * r).sum(dim=-1)
    small = theta_sq < SMALL_ANGLE**2
    # dummy value on the small branch keeps sqrt/division gradients finite at 0
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)

    zero = torch.zeros_like(r[..., 0])
    k = torch.stack(
        [
            torch.stack([zero, -r[..., 2], r[..., 1]], dim=-1),
            torch.stack([r[..., 2], zero, -r[..., 0]], dim=-1),
            torch.stack([-r[..., 1], r[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def axis_angle_to_se3(pose):
    """Realize a 6-parameter pose as a 4x4 homogeneous rigid transform.

    Accepts a Pose6 or a (..., 6) tensor [tx ty tz rx ry rz]; returns
    (..., 4, 4). Differentiable w.r.t. all six inputs.
    """
    single = isinstance(pose, Pose6) or (torch.is_tensor(pose) and pose.dim() == 1)
    vec = _as_pose_tensor(pose)
    rot = axis_angle_to_rotation(vec[:, 3:])
    mat = torch.cat(
        [
            torch.cat([rot, vec[:, :3, None]], dim=2),
            torch.tensor([[[0.0, 0.0, 0.0, 1.0]]], dtype=vec.dtype, device=vec.device).expand(
                vec.shape[0], 1, 4
            ),
        ],
        dim=1,
    )
    return mat[0] if single else mat


def rotation_to_axis_angle(rot):
    """Log map: (3, 3) rotation -> (3,) axis-angle with magnitude in [0, pi).

    Inverse of axis_angle_to_rotation for canonical-range rotations; uses
    the skew-part formula with a series fallback near zero and the
    diagonal method near a half turn.
    """
    if not torch.is_tensor(rot) or rot.shape != (3, 3):
        raise GeometryError("rotation must be a (3, 3) tensor")
    cos_theta = ((rot.diagonal().sum() - 1.0) / 2.0).clamp(-1.0, 1.0)
    theta = torch.arccos(cos_theta)
    vee = torch.stack([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < SMALL_ANGLE:
        # r = vee/2 * (1 + theta^2/6) to second order
        return vee / 2.0 * (1.0 + theta**2 / 6.0)
    if theta > math.pi - 1e-4:
        # near a half turn sin(theta) degenerates; recover the axis from
        # the dominant diagonal of (R + I) / 2
        sym = (rot + torch.eye(3, dtype=rot.dtype, device=rot.device)) / 2.0
        axis_sq = sym.diagonal().clamp(min=0.0)
        k = int(axis_sq.argmax())
        axis = sym[:, k] / torch.sqrt(axis_sq[k])
        axis = axis / axis.norm()
        # fix the sign using the skew part where it is informative
        if vee.abs().max() > 1e-12 and torch.dot(axis, vee) < 0:
            axis = -axis
        return axis * theta
    return vee * (theta / (2.0 * torch.sin(theta)))


def se3_to_pose6(mat):
    """Extract the Pose6 of a 4x4 rigid transform."""
    validate_se3(mat)
    r = rotation_to_axis_angle(mat[:3, :3])
    return Pose6(rotation=tuple(r.tolist()), translation=tuple(mat[:3, 3].tolist()))


def validate_se3(mat, atol=1e-5):
    """Raise GeometryError unless mat is a valid (..., 4, 4) rigid transform."""
    if not torch.is_tensor(mat) or mat.shape[-2:] != (4, 4):
        raise GeometryError("SE(3) matrix must be a (..., 4, 4) tensor")
    if not torch.isfinite(mat).all():
        raise GeometryError("SE(3) matrix contains non-finite entries")
    rot = mat[..., :3, :3]
    eye = torch.eye(3, dtype=mat.dtype, device=mat.device)
    if (rot @ rot.transpose(-1, -2) - eye).abs().max() > atol:
        raise GeometryError("rotation block is not orthonormal")
    if (torch.linalg.det(rot) - 1.0).abs().max() > atol:
        raise GeometryError("rotation block determinant is not +1")
    bottom = torch.zeros_like(mat[..., 3, :])
    bottom[..., 3] = 1.0
    if (mat[..., 3, :] - bottom).abs().max() > atol:
        raise GeometryError("bottom row is not (0, 0, 0, 1)")


def se3_compose(a, b):
    """Compose two rigid transforms: result maps like a applied after b."""
    validate_se3(a)
    validate_se3(b)
    return a @ b


def se3_inverse(a):
    """Inverse rigid transform: [R^T, -R^T t]."""
    validate_se3(a)
    rot_t = a[..., :3, :3].transpose(-1, -2)
    t = -(rot_t @ a[..., :3, 3:4])
    out = a.clone()
    out[..., :3, :3] = rot_t
    out[..., :3, 3:4] = t
    return out


def _pixel_grid(height, width, dtype, device):
    u = torch.arange(width, dtype=dtype, device=device)
    v = torch.arange(height, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return uu, vv


def backproject(depth, intrinsics):
    """Lift a depth map into camera-frame 3D points.

    depth: (B, 1, H, W), positive wherever the result is used. Returns
    (B, 3, H, W) with point = ((u-cx)z/fx, (v-cy)z/fy, z). Pixels with
    non-positive depth land behind the camera and are masked out by
    project().
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise GeometryError(f"depth must be (B, 1, H, W), got {tuple(depth.shape)}")
    _check_image_size(depth, intrinsics)
    b, _, h, w = depth.shape
    uu, vv = _pixel_grid(h, w, depth.dtype, depth.device)
    x = (uu - intrinsics.cx) * depth[:, 0] / intrinsics.fx
    y = (vv - intrinsics.cy) * depth[:, 0] / intrinsics.fy
    return torch.stack([x, y, depth[:, 0]], dim=1)


def project(points, intrinsics):
    """Project camera-frame points to pixel coordinates plus a validity mask.

    points: (B, 3, H, W). Returns ((B, 2, H, W) pixel coords, (B, 1, H, W)
    bool mask). The mask is false where z <= Z_EPS or the projection falls
    outside [0, width-1] x [0, height-1]; coordinates at masked pixels are
    computed against a clamped z so no gradient blows up.
    """
    if points.dim() != 4 or points.shape[1] != 3:
        raise GeometryError(f"points must be (B, 3, H, W), got {tuple(points.shape)}")
    z = points[:, 2:3]
    z_safe = z.clamp(min=Z_EPS)
    u = intrinsics.fx * points[:, 0:1] / z_safe + intrinsics.cx
    v = intrinsics.fy * points[:, 1:2] / z_safe + intrinsics.cy
    mask = (
        (z > Z_EPS)
        & (u >= -PIXEL_BOUNDS_EPS)
        & (u <= intrinsics.width - 1 + PIXEL_BOUNDS_EPS)
        & (v >= -PIXEL_BOUNDS_EPS)
        & (v <= intrinsics.height - 1 + PIXEL_BOUNDS_EPS)
    )
    return torch.cat([u, v], dim=1), mask


def _check_image_size(img, intrinsics):
    if img.shape[-2] != intrinsics.height or img.shape[-1] != intrinsics.width:
        raise GeometryError(
            f"tensor spatial size {img.shape[-2]}x{img.shape[-1]} does not match "
            f"intrinsics {intrinsics.height}x{intrinsics.width}"
        )


def inverse_warp(src_image, tgt_depth, relpose, intrinsics):
    """Synthesize the target view by sampling the source image.

    Every target pixel is backprojected with tgt_depth, moved into the
    source camera by relpose (the transform taking target-camera points to
    source-camera points) and bilinearly sampled from src_image.

    src_image: (B, C, H, W); tgt_depth: (B, 1, H, W); relpose: Pose6 /
    (6,) / (B, 6) tensor. Returns (warped (B, C, H, W), mask (B, 1, H, W));
    masked pixels carry value 0. Differentiable w.r.t. tgt_depth and
    relpose.
    """
    if src_image.dim() != 4:
        raise GeometryError(f"src_image must be (B, C, H, W), got {tuple(src_image.shape)}")
    if tgt_depth.dim() != 4 or tgt_depth.shape[1] != 1:
        raise GeometryError(f"tgt_depth must be (B, 1, H, W), got {tuple(tgt_depth.shape)}")
    if src_image.shape[0] != tgt_depth.shape[0] or src_image.shape[-2:] != tgt_depth.shape[-2:]:
        raise GeometryError(
            f"src_image {tuple(src_image.shape)} and tgt_depth {tuple(tgt_depth.shape)} disagree"
        )
    _check_image_size(src_image, intrinsics)

    b, _, h, w = src_image.shape
    pose_vec = _as_pose_tensor(relpose, dtype=src_image.dtype, device=src_image.device)
    if pose_vec.shape[0] == 1 and b > 1:
        pose_vec = pose_vec.expand(b, 6)
    elif pose_vec.shape[0] != b:
        raise GeometryError(f"pose batch {pose_vec.shape[0]} does not match image batch {b}")
    transform = axis_angle_to_se3(pose_vec)

    points = backproject(tgt_depth, intrinsics)  # (B, 3, H, W)
    flat = points.reshape(b, 3, -1)
    moved = transform[:, :3, :3] @ flat + transform[:, :3, 3:4]
    pix, mask = project(moved.reshape(b, 3, h, w), intrinsics)

    # normalize to [-1, 1] for grid_sample (align_corners puts +-1 on pixel centers)
    gx = 2.0 * pix[:, 0] / (w - 1) - 1.0
    gy = 2.0 * pix[:, 1] / (h - 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)  # (B, H, W, 2)
    warped = F.grid_sample(src_image, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return warped * mask.to(src_image.dtype), mask
