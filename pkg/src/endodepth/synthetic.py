"""Procedural tube-scene renderer with exact per-pixel depth and poses.

A desk-scale stand-in for colonoscopy-style footage: the camera travels
down a textured cylinder (dominant z progression, gentle x-y sway) toward
an end cap, lit by a static Lambertian light. Because the light is fixed
in world space, the rendered surface color is a pure function of the
surface point, so warping one frame into another with the emitted depth
and poses reproduces it up to bilinear interpolation error.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose6, axis_angle_to_rotation

import torch


class SyntheticSceneError(ValueError):
    """Raised for invalid synthetic-scene specifications."""


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Tube scene: radius profile, trajectory and texture parameters."""

    n_frames: int = 10
    resolution: int = 64
    radius: float = 2.0
    length: float = 12.0
    z_step: float = 0.2
    sway_amplitude: float = 0.12
    sway_period: float = 11.0
    rot_amplitude: float = 0.015
    radius_wobble: float = 0.0
    wobble_period: float = 6.0
    texture_seed: int = 0
    fov_degrees: float = 80.0
    max_depth: float = 20.0

    def __post_init__(self):
        if self.n_frames < 1 or self.resolution < 4:
            raise SyntheticSceneError("need at least 1 frame and a 4px image")
        if self.radius <= 0 or self.length <= 0 or self.max_depth <= 0:
            raise SyntheticSceneError("radius, length and max_depth must be positive")
        if abs(self.radius_wobble) >= 0.5:
            raise SyntheticSceneError("radius_wobble must stay well below 1")
        if self.length + 1.0 > self.max_depth:
            raise SyntheticSceneError("tube length must fit inside max_depth")

    def intrinsics(self):
        half = (self.resolution - 1) / 2.0
        f = half / math.tan(math.radians(self.fov_degrees) / 2.0)
        return CameraIntrinsics(
            fx=f, fy=f, cx=half, cy=half, width=self.resolution, height=self.resolution
        )

    def trajectory(self):
        """Camera-to-world Pose6 per frame: forward z drift plus gentle sway."""
        poses = []
        for i in range(self.n_frames):
            phase = 2.0 * math.pi * i / self.sway_period
            tx = self.sway_amplitude * math.sin(phase)
            ty = self.sway_amplitude * (math.cos(phase) - 1.0)
            tz = self.z_step * i
            # look slightly toward the sway direction
            rot = (
                self.rot_amplitude * math.cos(phase),
                self.rot_amplitude * math.sin(phase),
                0.25 * self.rot_amplitude * math.sin(0.5 * phase),
            )
            poses.append(Pose6(rotation=rot, translation=(tx, ty, tz)))
        return poses


def _tube_radius(spec, z):
    if spec.radius_wobble == 0.0:
        return np.full_like(np.asarray(z, dtype=np.float64), spec.radius)
    return spec.radius * (1.0 + spec.radius_wobble * np.sin(2.0 * np.pi * z / spec.wobble_period))


def _tube_radius_grad(spec, z):
    if spec.radius_wobble == 0.0:
        return np.zeros_like(np.asarray(z, dtype=np.float64))
    w = 2.0 * np.pi / spec.wobble_period
    return spec.radius * spec.radius_wobble * w * np.cos(w * z)


class _Texture:
    """Seeded low-frequency albedo fields for the wall and the end cap."""

    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        # integer angular orders keep the wall texture continuous around theta
        self.wall_orders = rng.integers(1, 6, size=(3, 5))
        self.wall_zfreq = rng.uniform(0.25, 0.9, size=(3, 5))
        self.wall_phase = rng.uniform(0, 2 * np.pi, size=(3, 5))
        self.wall_amp = rng.uniform(0.05, 0.12, size=(3, 5))
        self.wall_base = rng.uniform(0.45, 0.7, size=3)
        self.cap_freq = rng.uniform(0.6, 1.6, size=(3, 5, 2))
        self.cap_phase = rng.uniform(0, 2 * np.pi, size=(3, 5))
        self.cap_amp = rng.uniform(0.05, 0.12, size=(3, 5))
        self.cap_base = rng.uniform(0.45, 0.7, size=3)

    def wall(self, theta, z):
        out = np.empty((*theta.shape, 3))
        for c in range(3):
            acc = self.wall_base[c]
            for k in range(5):
                acc = acc + self.wall_amp[c, k] * np.sin(
                    self.wall_orders[c, k] * theta + self.wall_zfreq[c, k] * z + self.wall_phase[c, k]
                )
            out[..., c] = acc
        return out

    def cap(self, x, y):
        out = np.empty((*x.shape, 3))
        for c in range(3):
            acc = self.cap_base[c]
            for k in range(5):
                acc = acc + self.cap_amp[c, k] * np.sin(
                    self.cap_freq[c, k, 0] * x + self.cap_freq[c, k, 1] * y + self.cap_phase[c, k]
                )
            out[..., c] = acc
        return out


def render_scene(spec):
    """Ray-cast the tube for every frame of the trajectory.

    Returns (images, depths, poses): images (N, H, W, 3) float64 in [0, 1],
    depths (N, H, W) float64 z-depths, poses the camera-to-world Pose6
    list. Depth at a pixel is exact (analytic for a constant radius,
    Newton-refined under a wobble profile).
    """
    poses = spec.trajectory()
    if all(
        max(abs(v) for v in p.rotation + p.translation) == 0 for p in poses
    ) and spec.n_frames > 1:
        warnings.warn("degenerate trajectory: zero motion throughout", stacklevel=2)

    k = spec.intrinsics()
    res = spec.resolution
    vv, uu = np.meshgrid(np.arange(res, dtype=np.float64), np.arange(res, dtype=np.float64), indexing="ij")
    dirs = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)

    texture = _Texture(spec.texture_seed)
    light = np.array([0.0, 0.0, -0.5])
    images = np.empty((spec.n_frames, res, res, 3))
    depths = np.empty((spec.n_frames, res, res))

    for i, pose in enumerate(poses):
        rot = axis_angle_to_rotation(torch.tensor(pose.rotation, dtype=torch.float64)).numpy()
        origin = np.array(pose.translation)
        dw = dirs @ rot.T  # (H, W, 3)

        # wall: ||(o + t d).xy|| = r(z), seeded from the constant-radius root
        a = dw[..., 0] ** 2 + dw[..., 1] ** 2
        b = 2.0 * (origin[0] * dw[..., 0] + origin[1] * dw[..., 1])
        c = origin[0] ** 2 + origin[1] ** 2 - spec.radius**2
        a_safe = np.where(a < 1e-12, 1e-12, a)
        disc = np.maximum(b**2 - 4.0 * a_safe * c, 0.0)
        t_wall = (-b + np.sqrt(disc)) / (2.0 * a_safe)
        t_wall = np.where(a < 1e-12, np.inf, t_wall)
        if spec.radius_wobble != 0.0:
            for _ in range(12):
                z = origin[2] + t_wall * dw[..., 2]
                px = origin[0] + t_wall * dw[..., 0]
                py = origin[1] + t_wall * dw[..., 1]
                r = _tube_radius(spec, z)
                f = px**2 + py**2 - r**2
                fp = 2.0 * (px * dw[..., 0] + py * dw[..., 1]) - 2.0 * r * _tube_radius_grad(
                    spec, z
                ) * dw[..., 2]
                update = np.where(np.abs(fp) > 1e-12, f / np.where(np.abs(fp) > 1e-12, fp, 1.0), 0.0)
                t_wall = t_wall - update

        z_at_wall = origin[2] + t_wall * dw[..., 2]
        wall_valid = np.isfinite(t_wall) & (t_wall > 0) & (z_at_wall <= spec.length)

        dz = dw[..., 2]
        t_cap = np.where(dz > 1e-12, (spec.length - origin[2]) / np.where(dz > 1e-12, dz, 1.0), np.inf)

        t = np.where(wall_valid, t_wall, t_cap)
        use_cap = ~wall_valid
        point = origin + t[..., None] * dw
        depths[i] = t  # camera z-depth: dirs have unit z in camera coords

        # static-light Lambertian shading over the hit surface
        theta = np.arctan2(point[..., 1], point[..., 0])
        albedo_wall = texture.wall(theta, point[..., 2])
        albedo_cap = texture.cap(point[..., 0], point[..., 1])
        albedo = np.where(use_cap[..., None], albedo_cap, albedo_wall)

        radial = np.sqrt(point[..., 0] ** 2 + point[..., 1] ** 2)
        radial = np.where(radial < 1e-9, 1e-9, radial)
        n_wall = np.stack(
            [-point[..., 0] / radial, -point[..., 1] / radial, np.zeros_like(radial)], axis=-1
        )
        n_cap = np.broadcast_to(np.array([0.0, 0.0, -1.0]), point.shape)
        normal = np.where(use_cap[..., None], n_cap, n_wall)

        to_light = light - point
        dist_light = np.linalg.norm(to_light, axis=-1)
        lam = np.clip((normal * to_light).sum(-1) / dist_light, 0.0, 1.0)
        falloff = 1.0 / (1.0 + 0.06 * dist_light**2)
        intensity = 0.35 + 0.65 * lam * falloff
        images[i] = np.clip(albedo * intensity[..., None], 0.0, 1.0)

    return images, depths, poses
