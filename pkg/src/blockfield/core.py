"""Geometry and container types shared across the pipeline.

Conventions: right-handed world coordinates, camera space is x-right,
y-down, z-forward (the camera looks down +z). Pixel centers sit at
half-integer coordinates, so pixel (px, py) maps through the intrinsics
at (px + 0.5, py + 0.5).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

Vec3 = np.ndarray  # shape (3,), float

ROTATION_TOL = 1e-5
DIRECTION_TOL = 1e-6


class DatasetError(Exception):
    """Raised when a dataset directory is missing, malformed, or invalid."""


def as_vec3(v) -> Vec3:
    out = np.asarray(v, dtype=np.float64)
    if out.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite vector {out}")
    return out


@dataclass(frozen=True)
class CameraPose:
    """Posed pinhole camera: camera-to-world rotation plus intrinsics."""

    rotation: np.ndarray  # (3, 3) camera-to-world
    center: Vec3  # camera center in world coordinates
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", as_vec3(self.center))
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot @ rot.T - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def c2w_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.center
        return m


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3  # unit norm
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin))
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > DIRECTION_TOL:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class Aabb:
    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        object.__setattr__(self, "lo", as_vec3(self.lo))
        object.__setattr__(self, "hi", as_vec3(self.hi))
        if np.any(self.lo > self.hi):
            raise ValueError("aabb lo must be <= hi componentwise")

    @classmethod
    def from_points(cls, points) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.size == 0:
            raise ValueError("cannot build an aabb from zero points")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self) -> Vec3:
        return (self.lo + self.hi) / 2.0

    @property
    def extent(self) -> Vec3:
        return self.hi - self.lo

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major RGB image with channels in [0, 1]."""

    pixels: np.ndarray  # (height, width, 3)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must be (h, w, 3), got {px.shape}")
        if px.size == 0:
            raise ValueError("empty image")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel channels must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", px.astype(np.float32, copy=False))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(arr.astype(np.float32) / 255.0)

    def save_png(self, path: Path | str) -> None:
        Image.fromarray(self.to_uint8(), mode="RGB").save(path)

    @classmethod
    def load_png(cls, path: Path | str) -> "ImageBuffer":
        with Image.open(path) as im:
            return cls.from_uint8(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class SceneNormalization:
    """Rigid shift plus uniform scale taking scene coordinates to the
    normalized frame the field is trained in (content near the unit ball)."""

    center: Vec3
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite")

    @classmethod
    def from_aabb(cls, aabb: Aabb) -> "SceneNormalization":
        """Center the box at the origin and scale its longest side to 1."""
        longest = float(aabb.extent.max())
        return cls(center=aabb.center, scale=1.0 / longest if longest > 0 else 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale


VAL_EVERY = 20


def holdout_split(n_images: int) -> list[str]:
    """Every 20th image (0, 20, 40, ...) is held out for validation."""
    return ["val" if i % VAL_EVERY == 0 else "train" for i in range(n_images)]


@dataclass(frozen=True)
class SceneDataset:
    images: list[ImageBuffer]
    poses: list[CameraPose]
    split: list[str] = field(default_factory=list)
    appearance_index: list[int] = field(default_factory=list)
    scene_aabb: Aabb | None = None

    def __post_init__(self):
        if not self.split:
            object.__setattr__(self, "split", holdout_split(len(self.images)))
        if not (len(self.images) == len(self.poses) == len(self.split)):
            raise ValueError("images, poses and split must have equal length")
        if any(tag not in ("train", "val") for tag in self.split):
            raise ValueError("split tags must be 'train' or 'val'")
        if not self.appearance_index:
            idx, counter = [], 0
            for tag in self.split:
                if tag == "train":
                    idx.append(counter)
                    counter += 1
                else:
                    idx.append(-1)
            object.__setattr__(self, "appearance_index", idx)
        if len(self.appearance_index) != len(self.images):
            raise ValueError("appearance_index must parallel images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def train_indices(self) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == "train"]

    @property
    def val_indices(self) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == "val"]

    @property
    def n_train(self) -> int:
        return len(self.train_indices)

    def camera_centers(self) -> np.ndarray:
        return np.stack([p.center for p in self.poses])

    def subset(self, indices: list[int]) -> "SceneDataset":
        """All-train subset at `indices`, keeping the parent's appearance ids.

        Used for block training sets: validation stays a whole-dataset
        concern, and appearance rows keep indexing the shared table.
        """
        indices = sorted(indices)
        return SceneDataset(
            images=[self.images[i] for i in indices],
            poses=[self.poses[i] for i in indices],
            split=["train"] * len(indices),
            appearance_index=[self.appearance_index[i] for i in indices],
            scene_aabb=self.scene_aabb,
        )


def pixel_ray(pose: CameraPose, px: int, py: int) -> Ray:
    """Ray through the center of pixel (px, py)."""
    if not (0 <= px < pose.width and 0 <= py < pose.height):
        raise ValueError(f"pixel ({px}, {py}) outside {pose.width}x{pose.height} image")
    d_cam = np.array(
        [
            (px + 0.5 - pose.cx) / pose.fx,
            (py + 0.5 - pose.cy) / pose.fy,
            1.0,
        ]
    )
    d_world = pose.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=pose.center, direction=d_world)


def pixel_rays(pose: CameraPose, px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pixel_ray: returns (origins, unit directions), each (N, 3)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack(
        [
            (px + 0.5 - pose.cx) / pose.fx,
            (py + 0.5 - pose.cy) / pose.fy,
            np.ones_like(px),
        ],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_world.shape).copy()
    return origins, d_world


def _require(cond: bool, path: Path, entry: str, msg: str) -> None:
    if not cond:
        raise DatasetError(f"{path}: {entry}: {msg}")


def load_dataset(path: Path | str) -> SceneDataset:
    """Load a dataset directory (cameras.json + images/*.png)."""
    path = Path(path)
    cameras_file = path / "cameras.json"
    if not cameras_file.is_file():
        raise DatasetError(f"{path}: missing cameras.json")
    try:
        meta = json.loads(cameras_file.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{cameras_file}: malformed JSON: {e}") from e

    for key in ("fx", "fy", "cx", "cy", "width", "height", "frames"):
        _require(key in meta, cameras_file, key, "missing required key")

    images, poses = [], []
    for i, frame in enumerate(meta["frames"]):
        entry = frame.get("file", f"frames[{i}]")
        _require("file" in frame and "c2w" in frame, cameras_file, entry, "frame needs 'file' and 'c2w'")
        c2w = np.asarray(frame["c2w"], dtype=np.float64)
        _require(c2w.size == 16, cameras_file, entry, "c2w must hold 16 numbers")
        c2w = c2w.reshape(4, 4)
        try:
            pose = CameraPose(
                rotation=c2w[:3, :3],
                center=c2w[:3, 3],
                fx=float(meta["fx"]),
                fy=float(meta["fy"]),
                cx=float(meta["cx"]),
                cy=float(meta["cy"]),
                width=int(meta["width"]),
                height=int(meta["height"]),
            )
        except ValueError as e:
            raise DatasetError(f"{cameras_file}: {entry}: {e}") from e
        img_path = path / frame["file"]
        _require(img_path.is_file(), path, entry, "referenced image file missing")
        img = ImageBuffer.load_png(img_path)
        _require(
            img.width == pose.width and img.height == pose.height,
            path,
            entry,
            f"image is {img.width}x{img.height}, cameras.json says {pose.width}x{pose.height}",
        )
        images.append(img)
        poses.append(pose)

    scene_aabb = None
    if "aabb" in meta:
        box = np.asarray(meta["aabb"], dtype=np.float64)
        _require(box.size == 6, cameras_file, "aabb", "aabb must hold 6 numbers [lo, hi]")
        scene_aabb = Aabb(box[:3], box[3:])

    return SceneDataset(images=images, poses=poses, scene_aabb=scene_aabb)


def save_dataset(dataset: SceneDataset, path: Path | str) -> None:
    """Write a dataset directory in the cameras.json + images/*.png layout."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    if not dataset.poses:
        raise ValueError("cannot save an empty dataset")
    p0 = dataset.poses[0]
    meta = {
        "fx": p0.fx,
        "fy": p0.fy,
        "cx": p0.cx,
        "cy": p0.cy,
        "width": p0.width,
        "height": p0.height,
        "frames": [],
    }
    if dataset.scene_aabb is not None:
        meta["aabb"] = list(dataset.scene_aabb.lo) + list(dataset.scene_aabb.hi)
    for i, (img, pose) in enumerate(zip(dataset.images, dataset.poses)):
        name = f"images/{i:04d}.png"
        img.save_png(path / name)
        meta["frames"].append({"file": name, "c2w": pose.c2w_matrix().reshape(-1).tolist()})
    (path / "cameras.json").write_text(json.dumps(meta, indent=1))
