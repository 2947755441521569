"""Dataset ingestion, synthetic-scene materialization and checkpointing.

On-disk conventions: RGB frames as 8-bit PNG, depth as 16-bit grayscale
PNG storing value v for metric depth (v / 65535) * max_depth, and poses as
a text file with one camera-to-world line per frame: tx ty tz rx ry rz
(axis-angle). A sequence is described by a flat key-value manifest.
"""

import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import CameraIntrinsics, Pose6, axis_angle_to_se3, se3_compose, se3_inverse, se3_to_pose6
from .synthetic import render_scene

CHECKPOINT_VERSION = "endodepth.ckpt.1"

DEPTH_PNG_MAX = 65535


class DataError(ValueError):
    """Raised for malformed manifests, sequences or corpora."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint persistence failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


# -- flat key-value files ----------------------------------------------------


def read_kv_file(path):
    """Parse 'key = value' lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, mapping, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for key, value in mapping.items():
            fh.write(f"{key} = {value}\n")


# -- image I/O ----------------------------------------------------------------


def write_rgb_png(path, image):
    """image: (H, W, 3) float in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_rgb_png(path):
    if not os.path.exists(path):
        raise DataError(f"missing RGB frame: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def write_depth_png(path, depth, max_depth):
    """depth: (H, W) metric -> 16-bit grayscale with v = depth/max_depth * 65535."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.min() < 0 or arr.max() > max_depth:
        raise DataError(f"depth values outside [0, {max_depth}] cannot be encoded")
    scaled = np.round(arr / max_depth * DEPTH_PNG_MAX).astype(np.uint16)
    Image.fromarray(scaled, mode="I;16").save(path)


def read_depth_png(path, max_depth):
    if not os.path.exists(path):
        raise DataError(f"missing depth frame: {path}")
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / DEPTH_PNG_MAX * max_depth


# -- pose files ----------------------------------------------------------------


def write_pose_file(path, poses):
    with open(path, "w") as fh:
        fh.write("# tx ty tz rx ry rz (camera-to-world, axis-angle)\n")
        for p in poses:
            fh.write(" ".join(f"{v:.12g}" for v in (*p.translation, *p.rotation)) + "\n")


def read_pose_file(path):
    if not os.path.exists(path):
        raise DataError(f"missing pose file: {path}")
    poses = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 numbers, got {len(parts)}")
            vals = [float(v) for v in parts]
            poses.append(Pose6(rotation=tuple(vals[3:]), translation=tuple(vals[:3])))
    return poses


# -- sequence manifests ----------------------------------------------------------


@dataclass
class SequenceManifest:
    """Resolved description of an on-disk frame sequence."""

    root: Path
    rgb_paths: list
    intrinsics: CameraIntrinsics
    max_depth: float
    depth_paths: list = field(default_factory=list)
    pose_file: Path = None

    def __post_init__(self):
        if len(self.rgb_paths) < 3:
            raise DataError(f"sequence needs at least 3 frames, found {len(self.rgb_paths)}")
        for p in self.rgb_paths + self.depth_paths:
            if not os.path.exists(p):
                raise DataError(f"missing file listed in manifest: {p}")
        if self.depth_paths and len(self.depth_paths) != len(self.rgb_paths):
            raise DataError("depth frame count does not match RGB frame count")


MANIFEST_KEYS = {"rgb_dir", "depth_dir", "pose_file", "fx", "fy", "cx", "cy", "width", "height", "max_depth"}


def load_manifest(path):
    path = Path(path)
    kv = read_kv_file(path)
    unknown = set(kv) - MANIFEST_KEYS
    if unknown:
        raise DataError(f"unknown manifest keys in {path}: {sorted(unknown)}")
    missing = {"rgb_dir", "fx", "fy", "cx", "cy", "width", "height", "max_depth"} - set(kv)
    if missing:
        raise DataError(f"manifest {path} missing keys: {sorted(missing)}")

    root = path.parent
    rgb_dir = root / kv["rgb_dir"]
    if not rgb_dir.is_dir():
        raise DataError(f"rgb_dir does not exist: {rgb_dir}")
    rgb_paths = sorted(rgb_dir.glob("*.png"))

    depth_paths = []
    if "depth_dir" in kv:
        depth_dir = root / kv["depth_dir"]
        if not depth_dir.is_dir():
            raise DataError(f"depth_dir does not exist: {depth_dir}")
        depth_paths = sorted(depth_dir.glob("*.png"))

    intr = CameraIntrinsics(
        fx=float(kv["fx"]),
        fy=float(kv["fy"]),
        cx=float(kv["cx"]),
        cy=float(kv["cy"]),
        width=int(kv["width"]),
        height=int(kv["height"]),
    )
    pose_file = root / kv["pose_file"] if "pose_file" in kv else None
    if pose_file is not None and not pose_file.exists():
        raise DataError(f"pose file does not exist: {pose_file}")
    return SequenceManifest(
        root=root,
        rgb_paths=rgb_paths,
        depth_paths=depth_paths,
        intrinsics=intr,
        max_depth=float(kv["max_depth"]),
        pose_file=pose_file,
    )


def _relative_pose(world_from_a, world_from_b):
    """Pose taking frame-b camera points into frame-a camera coordinates."""
    t_a = axis_angle_to_se3(world_from_a.as_tensor(torch.float64))
    t_b = axis_angle_to_se3(world_from_b.as_tensor(torch.float64))
    return se3_to_pose6(se3_compose(se3_inverse(t_a), t_b))


def load_sequence(manifest):
    """Yield overlapping FrameTriplets (t-1, t, t+1) for t = 1..n-2.

    RGB is normalized to [0, 1]; stored depth is rescaled to metric units;
    ground-truth relative poses (when a pose file exists) map the center
    frame's camera into each adjacent frame's camera.
    """
    from .training import FrameTriplet  # triplet type lives with the training loop

    poses = read_pose_file(manifest.pose_file) if manifest.pose_file else None
    if poses is not None and len(poses) != len(manifest.rgb_paths):
        raise DataError(
            f"pose file has {len(poses)} lines for {len(manifest.rgb_paths)} frames"
        )

    frames = [torch.from_numpy(read_rgb_png(p)).permute(2, 0, 1) for p in manifest.rgb_paths]
    depths = [
        torch.from_numpy(read_depth_png(p, manifest.max_depth))[None].to(torch.float32)
        for p in manifest.depth_paths
    ]

    triplets = []
    for t in range(1, len(frames) - 1):
        triplets.append(
            FrameTriplet(
                x_minus=frames[t - 1],
                x_zero=frames[t],
                x_plus=frames[t + 1],
                intrinsics=manifest.intrinsics,
                gt_depth=depths[t] if depths else None,
                gt_pose_minus=_relative_pose(poses[t - 1], poses[t]) if poses else None,
                gt_pose_plus=_relative_pose(poses[t + 1], poses[t]) if poses else None,
            )
        )
    return triplets


def generate_synthetic_scene(spec, out_dir):
    """Render a tube scene to disk and return the manifest path."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)

    images, depths, poses = render_scene(spec)
    if depths.max() > spec.max_depth:
        raise DataError("rendered depth exceeds max_depth; enlarge spec.max_depth")
    for i in range(spec.n_frames):
        write_rgb_png(out / "rgb" / f"frame_{i:04d}.png", images[i])
        write_depth_png(out / "depth" / f"frame_{i:04d}.png", depths[i], spec.max_depth)
    write_pose_file(out / "poses.txt", poses)

    k = spec.intrinsics()
    manifest_path = out / "manifest.cfg"
    write_kv_file(
        manifest_path,
        {
            "rgb_dir": "rgb",
            "depth_dir": "depth",
            "pose_file": "poses.txt",
            "fx": repr(k.fx),
            "fy": repr(k.fy),
            "cx": repr(k.cx),
            "cy": repr(k.cy),
            "width": k.width,
            "height": k.height,
            "max_depth": repr(spec.max_depth),
        },
        header="endodepth sequence manifest",
    )
    return manifest_path


def load_depth_corpus(directory, resolution=None):
    """Flat directory of depth PNGs -> (N, 1, R, R) tensor normalized to [0, 1].

    Values are read as raw 16-bit fractions (metric scale is irrelevant for
    generative pretraining). Optionally area-resizes to a target resolution.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"corpus directory does not exist: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"corpus directory has no PNG files: {directory}")
    maps = []
    for p in paths:
        arr = np.asarray(Image.open(p), dtype=np.float64) / DEPTH_PNG_MAX
        maps.append(torch.from_numpy(arr).to(torch.float32)[None])
    corpus = torch.stack(maps)
    if resolution is not None and corpus.shape[-1] != resolution:
        corpus = torch.nn.functional.adaptive_avg_pool2d(corpus, resolution)
    return corpus.clamp(0.0, 1.0)


# -- checkpoints --------------------------------------------------------------


@dataclass
class CheckpointBundle:
    """Named parameter blobs plus training state, versioned for on-disk use."""

    blobs: dict
    latent_bank_frozen: bool = False
    optimizer_state: dict = None
    config: dict = field(default_factory=dict)
    step: int = 0
    version: str = CHECKPOINT_VERSION


def _shape_manifest(blobs):
    return {
        name: {key: tuple(tensor.shape) for key, tensor in sd.items()}
        for name, sd in blobs.items()
    }


def save_checkpoint(bundle, path):
    """Atomic write (temp + rename); round-trips bit-exactly."""
    payload = {
        "version": bundle.version,
        "blobs": bundle.blobs,
        "shapes": _shape_manifest(bundle.blobs),
        "latent_bank_frozen": bundle.latent_bank_frozen,
        "optimizer_state": bundle.optimizer_state,
        "config": bundle.config,
        "step": bundle.step,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path):
    """Load and validate a checkpoint; errors are typed by failure kind."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint does not exist: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (EOFError, zipfile.BadZipFile, RuntimeError, OSError) as exc:
        raise CheckpointTruncatedError(f"checkpoint {path} is truncated or corrupt: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointTruncatedError(f"checkpoint {path} has no version header")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {payload['version']!r} does not match "
            f"supported {CHECKPOINT_VERSION!r}"
        )
    blobs = payload["blobs"]
    for name, shapes in payload.get("shapes", {}).items():
        stored = blobs.get(name)
        if stored is None:
            raise CheckpointShapeError(f"blob {name!r} recorded but missing from payload")
        for key, shape in shapes.items():
            if key not in stored or tuple(stored[key].shape) != tuple(shape):
                got = tuple(stored[key].shape) if key in stored else None
                raise CheckpointShapeError(
                    f"blob {name!r} entry {key!r}: recorded shape {tuple(shape)}, got {got}"
                )
    return CheckpointBundle(
        blobs=blobs,
        latent_bank_frozen=payload["latent_bank_frozen"],
        optimizer_state=payload["optimizer_state"],
        config=payload["config"],
        step=payload["step"],
        version=payload["version"],
    )
