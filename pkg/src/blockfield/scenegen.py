"""Procedural test scenes with analytic density/color fields.

Constant-density solids give the rendering integral piecewise closed-form
behavior, so the fixed-step reference renderer converges predictably and
can act as ground truth for datasets and for checking the real renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Aabb, CameraPose, ImageBuffer, SceneDataset, Vec3, as_vec3, save_dataset

CONTENT_RADIUS = 1.05  # rays are clipped against this bounding sphere


@dataclass(frozen=True)
class Primitive:
    shape: str  # sphere | box
    center: Vec3
    size: Vec3  # sphere: radius in size[0]; box: half extents
    density: float
    albedo: Vec3

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown shape {self.shape!r}")
        object.__setattr__(self, "center", as_vec3(self.center))
        size = np.asarray(self.size, dtype=np.float64)
        if size.ndim == 0:
            size = np.full(3, float(size))
        object.__setattr__(self, "size", as_vec3(size))
        object.__setattr__(self, "albedo", as_vec3(self.albedo))
        if self.density < 0:
            raise ValueError("density must be nonnegative")

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.shape == "sphere":
            return np.sum((pts - self.center) ** 2, axis=-1) <= self.size[0] ** 2
        return np.all(np.abs(pts - self.center) <= self.size, axis=-1)

    def max_radius(self) -> float:
        if self.shape == "sphere":
            return float(np.linalg.norm(self.center) + self.size[0])
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.size))


@dataclass(frozen=True)
class AnalyticScene:
    primitives: list[Primitive]
    background: Vec3 = field(default_factory=lambda: np.ones(3))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "background", as_vec3(self.background))
        for p in self.primitives:
            if p.max_radius() > 1.0 + 1e-9:
                raise ValueError("primitives must fit inside the unit ball")

    def content_aabb(self) -> Aabb:
        r = CONTENT_RADIUS
        return Aabb(np.full(3, -r), np.full(3, r))


def query(scene: AnalyticScene, x) -> tuple[np.ndarray, np.ndarray]:
    """Density and albedo of the analytic field at x ((..., 3)).

    Density adds over overlapping primitives; color is the
    density-weighted mean albedo, falling back to the background albedo
    in empty space.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    sigma = np.zeros(pts.shape[0])
    weighted = np.zeros((pts.shape[0], 3))
    for prim in scene.primitives:
        inside = prim.contains(pts)
        sigma += inside * prim.density
        weighted += inside[:, None] * (prim.density * prim.albedo)
    color = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma[:, None], 1e-300), scene.background)
    if single:
        return float(sigma[0]), color[0]
    return sigma, color


def _ray_sphere_span(origins: np.ndarray, dirs: np.ndarray, radius: float):
    """Entry/exit distances of rays against the centered sphere (t clamped >= 0)."""
    b = np.einsum("rc,rc->r", origins, dirs)
    c = np.einsum("rc,rc->r", origins, origins) - radius**2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - root, 0.0)
    t1 = np.maximum(-b + root, 0.0)
    hit &= t1 > t0
    return t0, t1, hit


def reference_render(scene: AnalyticScene, pose: CameraPose, steps: int = 1024,
                     chunk_rays: int = 1024) -> ImageBuffer:
    """Fixed-step quadrature of the rendering integral over the analytic field.

    Transmittance uses the cumulative Riemann sum of optical depth, which
    is a deliberately different discretization than the renderer's
    alpha compositing; the two must agree only in the fine-step limit.
    """
    from .core import pixel_rays

    if steps < 1:
        raise ValueError("steps must be >= 1")
    px, py = np.meshgrid(np.arange(pose.width), np.arange(pose.height), indexing="xy")
    origins, dirs = pixel_rays(pose, px.ravel(), py.ravel())
    out = np.empty((origins.shape[0], 3))
    for lo in range(0, origins.shape[0], chunk_rays):
        hi = min(lo + chunk_rays, origins.shape[0])
        out[lo:hi] = _reference_rays(scene, origins[lo:hi], dirs[lo:hi], steps)
    pixels = np.clip(out, 0.0, 1.0).reshape(pose.height, pose.width, 3)
    return ImageBuffer(pixels.astype(np.float32))


def _reference_rays(scene: AnalyticScene, origins, dirs, steps: int) -> np.ndarray:
    t0, t1, hit = _ray_sphere_span(origins, dirs, CONTENT_RADIUS)
    out = np.tile(scene.background, (origins.shape[0], 1))
    if not hit.any():
        return out
    o, d = origins[hit], dirs[hit]
    dt = (t1[hit] - t0[hit]) / steps  # (R,)
    mids = t0[hit, None] + (np.arange(steps)[None, :] + 0.5) * dt[:, None]
    pts = o[:, None, :] + mids[..., None] * d[:, None, :]
    sigma, color = query(scene, pts.reshape(-1, 3))
    sigma = sigma.reshape(-1, steps)
    color = color.reshape(-1, steps, 3)
    optical = np.cumsum(sigma * dt[:, None], axis=1)
    trans = np.exp(-(optical - sigma * dt[:, None]))  # T at segment start
    contrib = trans * sigma * dt[:, None]
    rgb = np.einsum("rs,rsc->rc", contrib, color)
    rgb += np.exp(-optical[:, -1])[:, None] * scene.background
    out[hit] = rgb
    return out


def default_scene(seed: int = 0) -> AnalyticScene:
    """Three solid spheres and a box; the far small sphere sits where only
    one camera cluster of the two-cluster layout can see it."""
    return AnalyticScene(
        primitives=[
            Primitive("sphere", (0.30, 0.10, 0.00), (0.28, 0.28, 0.28), 18.0, (0.85, 0.15, 0.10)),
            Primitive("sphere", (-0.25, -0.30, 0.10), (0.22, 0.22, 0.22), 18.0, (0.10, 0.65, 0.20)),
            Primitive("sphere", (-0.88, 0.00, 0.08), (0.09, 0.09, 0.09), 30.0, (0.15, 0.20, 0.90)),
            Primitive("box", (0.05, 0.38, -0.20), (0.18, 0.12, 0.15), 18.0, (0.95, 0.65, 0.10)),
        ],
        background=np.ones(3),
        seed=seed,
    )


BLIND_PRIMITIVE_INDEX = 2  # the small far sphere in default_scene


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation for x-right / y-down / z-forward cameras,
    world up +z."""
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def _make_pose(center, target, width, height) -> CameraPose:
    return CameraPose(
        rotation=_look_at(np.asarray(center, float), np.asarray(target, float)),
        center=center,
        fx=float(width),
        fy=float(width),
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def orbit_poses(n: int, width: int, height: int, radius: float = 2.5,
                elevation_deg: float = 18.0) -> list[CameraPose]:
    """Equally spaced ring at fixed elevation, all looking at the origin."""
    el = np.deg2rad(elevation_deg)
    poses = []
    for k in range(n):
        az = 2 * np.pi * k / n
        center = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(_make_pose(center, np.zeros(3), width, height))
    return poses


def two_cluster_poses(n: int, width: int, height: int, radius: float = 0.75) -> list[CameraPose]:
    """Two facing arcs of n/2 cameras each, inside the content ball.

    Arc A spans azimuth -40..40 degrees, arc B 140..220; elevations vary
    a little so camera boxes are not degenerate. The far blind sphere of
    default_scene lies just behind arc B, so B's cameras never see it.
    """
    n_a = n // 2
    n_b = n - n_a
    poses = []
    for arc_center, count in ((0.0, n_a), (180.0, n_b)):
        az = np.deg2rad(np.linspace(arc_center - 40, arc_center + 40, count))
        el = np.deg2rad(np.linspace(6, 14, count))
        for a, e in zip(az, el):
            center = radius * np.array([np.cos(a) * np.cos(e), np.sin(a) * np.cos(e), np.sin(e)])
            poses.append(_make_pose(center, np.zeros(3), width, height))
    return poses


def primitive_in_frustum(prim: Primitive, pose: CameraPose) -> bool:
    """Frustum test on the primitive's center (no occlusion accounting)."""
    p_cam = pose.rotation.T @ (prim.center - pose.center)
    if p_cam[2] <= 1e-6:
        return False
    u = pose.fx * p_cam[0] / p_cam[2] + pose.cx
    v = pose.fy * p_cam[1] / p_cam[2] + pose.cy
    return 0 <= u < pose.width and 0 <= v < pose.height


def visible_fraction(prim: Primitive, poses: list[CameraPose]) -> float:
    if not poses:
        return 0.0
    return sum(primitive_in_frustum(prim, p) for p in poses) / len(poses)


def emit_dataset(
    scene: AnalyticScene,
    n_cameras: int,
    layout: str,
    seed: int,
    out: Path | str | None,
    width: int = 64,
    height: int = 64,
    steps: int = 1024,
) -> SceneDataset:
    """Render the scene from a camera layout and (optionally) write the
    dataset directory. layout: 'orbit' or 'two-cluster'."""
    if n_cameras < 2:
        raise ValueError("need at least 2 cameras")
    if layout == "orbit":
        poses = orbit_poses(n_cameras, width, height)
    elif layout == "two-cluster":
        poses = two_cluster_poses(n_cameras, width, height)
        half = n_cameras // 2
        blind = scene.primitives[BLIND_PRIMITIVE_INDEX]
        frac_a = visible_fraction(blind, poses[:half])
        frac_b = visible_fraction(blind, poses[half:])
        if not (frac_a >= 0.8 and frac_b <= 0.05):
            raise ValueError(
                f"two-cluster layout lost its blind spot: visible from "
                f"{frac_a:.0%} of arc A, {frac_b:.0%} of arc B"
            )
    else:
        raise ValueError(f"unknown layout {layout!r}")

    images = [reference_render(scene, pose, steps=steps) for pose in poses]
    dataset = SceneDataset(images=images, poses=poses, scene_aabb=scene.content_aabb())
    if out is not None:
        save_dataset(dataset, out)
    return dataset
