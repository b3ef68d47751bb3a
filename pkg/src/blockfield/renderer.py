"""Ray sampling, unbounded-scene contraction, and discrete volume rendering.

Rays march through a coarse occupancy grid over the contracted domain so
empty space costs nothing; surviving samples are encoded, decoded, and
alpha-composited front to back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Aabb, CameraPose, ImageBuffer, Ray, SceneNormalization, pixel_rays
from .decoder import MlpDecoder, decoder_forward_cached, mean_appearance
from .hashgrid import HashGrid, encode

CONTRACTED_RADIUS = 2.0
DEPTH_EPS = 1e-10


def contract(x) -> np.ndarray:
    """Smoothly squash unbounded points into the open ball of radius 2.

    Identity inside the unit ball; outside, norms map r -> 2 - 1/r.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    norm = np.linalg.norm(pts, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1e-300)
    out = np.where(norm <= 1.0, pts, (2.0 - 1.0 / safe) * (pts / safe))
    return out[0] if single else out


def cube_from_contracted(p: np.ndarray) -> np.ndarray:
    """Affine map of the radius-2 contracted ball into the encoder's [0,1]^3."""
    return (np.asarray(p) + CONTRACTED_RADIUS) / (2.0 * CONTRACTED_RADIUS)


@dataclass
class OccupancyGrid:
    """Per-cell density EMA over the contracted domain plus an occupied bitmask."""

    resolution: int = 64
    threshold: float = 1e-2
    aabb: Aabb = field(
        default_factory=lambda: Aabb(np.full(3, -CONTRACTED_RADIUS), np.full(3, CONTRACTED_RADIUS))
    )
    values: np.ndarray | None = None
    bitmask: np.ndarray | None = None

    def __post_init__(self):
        n = self.resolution**3
        if self.values is None:
            # start fully occupied: nothing is skipped until updates prove emptiness
            self.values = np.ones(n, dtype=np.float32)
        if self.bitmask is None:
            self.bitmask = self.values > self.threshold
        if self.values.shape != (n,) or self.bitmask.shape != (n,):
            raise ValueError("values/bitmask must have resolution^3 entries")

    def cell_indices(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat cell index per point plus an inside-the-box mask."""
        pts = np.atleast_2d(np.asarray(points))
        rel = (pts - self.aabb.lo) / self.aabb.extent
        inside = np.all((rel >= 0.0) & (rel <= 1.0), axis=-1)
        cells = np.clip((rel * self.resolution).astype(np.int64), 0, self.resolution - 1)
        flat = (cells[..., 0] * self.resolution + cells[..., 1]) * self.resolution + cells[..., 2]
        return flat, inside

    def occupied(self, points: np.ndarray) -> np.ndarray:
        flat, inside = self.cell_indices(points)
        return self.bitmask[flat] & inside

    def occupied_fraction(self) -> float:
        return float(self.bitmask.mean())

    def cell_corners(self) -> np.ndarray:
        """Low corner of every cell, shape (resolution^3, 3), contracted coords."""
        r = self.resolution
        axes = [np.arange(r)] * 3
        ii, jj, kk = np.meshgrid(*axes, indexing="ij")
        cells = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.aabb.lo + cells / r * self.aabb.extent


def update_occupancy(grid: OccupancyGrid, density_fn, decay: float, rng) -> OccupancyGrid:
    """EMA-update every cell against the field's density at a random point.

    density_fn maps contracted-domain points (N, 3) to densities (N,).
    Mutates and returns the grid (single-writer operation).
    """
    if not (0.0 < decay < 1.0):
        raise ValueError("decay must be in (0, 1)")
    cell_size = grid.aabb.extent / grid.resolution
    pts = grid.cell_corners() + rng.random((grid.resolution**3, 3)) * cell_size
    sigma = np.empty(pts.shape[0], dtype=np.float64)
    chunk = 65536
    for lo in range(0, pts.shape[0], chunk):
        sigma[lo : lo + chunk] = density_fn(pts[lo : lo + chunk])
    grid.values = np.maximum(grid.values * decay, sigma).astype(np.float32)
    grid.bitmask = grid.values > grid.threshold
    return grid


@dataclass
class RaySampleBatch:
    """Samples along one ray: positions, intervals, field values."""

    t: np.ndarray  # (S,) strictly increasing distances along the ray
    delta: np.ndarray  # (S,) positive interval lengths
    points: np.ndarray  # (S, 3) contracted sample points
    sigma: np.ndarray  # (S,) nonnegative densities
    color: np.ndarray  # (S, 3) in [0, 1]

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("sample distances must be strictly increasing")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("intervals must be positive")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("densities must be nonnegative")
        c = np.asarray(self.color)
        if c.size and (c.min() < 0 or c.max() > 1):
            raise ValueError("colors must lie in [0, 1]")


def ray_aabb_span(origins: np.ndarray, dirs: np.ndarray, box: Aabb) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of rays against a box (slab test, t >= 0).

    Rays that miss come back with t1 <= t0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (box.lo - origins) * inv
        tb = (box.hi - origins) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    # axis-parallel rays: ignore that axis unless the origin is outside the slab
    parallel = dirs == 0.0
    outside = parallel & ((origins < box.lo) | (origins > box.hi))
    lo = np.where(parallel, -np.inf, lo)
    hi = np.where(parallel, np.inf, hi)
    t0 = np.maximum(lo.max(axis=-1), 0.0)
    t1 = hi.min(axis=-1)
    t1 = np.where(outside.any(axis=-1), t0, t1)
    return t0, t1


def sample_ray(ray: Ray, grid: OccupancyGrid, max_samples: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified samples on [t_near, t_far], skipping unoccupied cells.

    The span is cut into max_samples equal segments; a segment survives
    when the contracted midpoint lands in an occupied cell, and the
    returned position is uniform within it. An all-empty ray yields
    empty arrays.
    """
    if not np.isfinite(ray.t_far):
        raise ValueError("sampling needs a finite t_far")
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    t, delta, mask = sample_ray_batch(o, d, ray.t_near, ray.t_far, grid, max_samples, rng)
    keep = mask[0]
    return t[0][keep], delta[0][keep]


def sample_ray_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near,
    t_far,
    grid: OccupancyGrid,
    max_samples: int,
    rng,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sample_ray over (R, 3) rays -> t, delta, keep-mask, all (R, S).

    t_near / t_far may be scalars or per-ray arrays (rays whose span is
    empty yield an all-false mask).
    """
    r = origins.shape[0]
    s = max_samples
    t0 = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (r,))
    t1 = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (r,))
    dt = np.maximum(t1 - t0, 0.0) / s  # (R,)
    seg_lo = t0[:, None] + np.arange(s)[None, :] * dt[:, None]
    mids = seg_lo + 0.5 * dt[:, None]
    p_mid = origins[:, None, :] + mids[..., None] * dirs[:, None, :]
    occ = grid.occupied(contract(p_mid.reshape(-1, 3))).reshape(r, s)
    occ &= (dt > 0.0)[:, None]
    u = rng.random((r, s))
    t = seg_lo + u * dt[:, None]
    delta = np.broadcast_to(dt[:, None], (r, s)).copy()
    return t, delta, occ


def composite_batch(
    t: np.ndarray,
    delta: np.ndarray,
    sigma: np.ndarray,
    color: np.ndarray,
    mask: np.ndarray,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Front-to-back alpha compositing of (R, S) sample batches.

    Returns (rgb (R, 3), opacity (R,), depth (R,)). Masked-out samples
    contribute nothing.
    """
    alpha = -np.expm1(-sigma * delta) * mask  # 1 - exp(-sigma*delta)
    trans = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = t_excl * alpha
    opacity = weights.sum(axis=1)
    rgb = np.einsum("rs,rsc->rc", weights, color) + (1.0 - opacity)[:, None] * background
    depth = (weights * t).sum(axis=1) / np.maximum(opacity, DEPTH_EPS)
    return rgb, opacity, depth


def composite_backward_batch(
    t: np.ndarray,
    delta: np.ndarray,
    sigma: np.ndarray,
    color: np.ndarray,
    mask: np.ndarray,
    background: np.ndarray,
    d_rgb: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of composite_batch's rgb output wrt sigma and color.

    Uses the suffix-sum identity: d rgb / d sigma_k =
    delta_k * (T_k (1-alpha_k) (c_k - bg) - sum_{i>k} w_i (c_i - bg)).
    """
    alpha = -np.expm1(-sigma * delta) * mask
    trans = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = t_excl * alpha

    d_color = weights[:, :, None] * d_rgb[:, None, :]

    diff = color - background[None, None, :]  # (R, S, 3)
    wdiff = weights[:, :, None] * diff
    suffix = wdiff[:, ::-1, :].cumsum(axis=1)[:, ::-1, :] - wdiff  # sum over i > k
    inner = t_excl[:, :, None] * (1.0 - alpha)[:, :, None] * diff - suffix
    d_sigma = delta * np.einsum("rsc,rc->rs", inner, d_rgb) * mask
    return d_sigma, d_color


def composite(samples: RaySampleBatch, background) -> tuple[np.ndarray, float, float]:
    """Composite one validated sample batch; returns (rgb, opacity, depth)."""
    bg = np.asarray(background, dtype=np.float64)
    if samples.t.size == 0:
        return bg.copy(), 0.0, 0.0
    rgb, opacity, depth = composite_batch(
        np.asarray(samples.t, dtype=np.float64)[None, :],
        np.asarray(samples.delta, dtype=np.float64)[None, :],
        np.asarray(samples.sigma, dtype=np.float64)[None, :],
        np.asarray(samples.color, dtype=np.float64)[None, :, :],
        np.ones((1, samples.t.size), dtype=bool),
        bg,
    )
    return rgb[0], float(opacity[0]), float(depth[0])


@dataclass(frozen=True)
class RenderConfig:
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    t_near: float = 0.05  # normalized scene units (scene scale is 1 after normalization)
    t_far: float = 8.0  # past this the contraction is effectively saturated
    max_samples: int = 48

    @property
    def background_rgb(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)


@dataclass
class Model:
    """A trained field plus everything needed to render it."""

    grid: HashGrid
    decoder: MlpDecoder
    occupancy: OccupancyGrid
    normalization: SceneNormalization
    content_aabb: Aabb | None = None  # normalized-space bounds of scene content

    def ray_spans(self, o_norm: np.ndarray, dirs: np.ndarray, config: RenderConfig):
        """Per-ray [t0, t1] used for sampling: the configured range,
        clipped to the content box when one is known."""
        if self.content_aabb is None:
            return config.t_near, config.t_far
        t0, t1 = ray_aabb_span(o_norm, dirs, self.content_aabb)
        return np.maximum(t0, config.t_near), np.minimum(t1, config.t_far)


def field_density_fn(grid: HashGrid, dec: MlpDecoder):
    """Density of the learned field as a function of contracted points."""
    from .decoder import density_forward
    from .hashgrid import encode as _encode

    def fn(points_contracted: np.ndarray) -> np.ndarray:
        feats = _encode(grid, cube_from_contracted(points_contracted))
        return density_forward(dec, feats)

    return fn


def occupancy_domain(content_aabb: Aabb | None) -> Aabb:
    """Contracted-domain box the occupancy grid should cover.

    Contraction only moves points toward the origin, so clipping the
    content box to [-2, 2] bounds its contracted image; without a
    content box the grid covers the whole contracted ball's box.
    """
    if content_aabb is None:
        return Aabb(np.full(3, -CONTRACTED_RADIUS), np.full(3, CONTRACTED_RADIUS))
    return Aabb(
        np.maximum(content_aabb.lo, -CONTRACTED_RADIUS),
        np.minimum(content_aabb.hi, CONTRACTED_RADIUS),
    )


def render_rays(
    model: Model,
    origins: np.ndarray,
    dirs: np.ndarray,
    appearance: np.ndarray,
    config: RenderConfig,
    rng,
) -> np.ndarray:
    """Forward-only rendering of world-space rays to RGB, (R, 3)."""
    o_norm = model.normalization.apply(origins)
    t_near, t_far = model.ray_spans(o_norm, dirs, config)
    t, delta, mask = sample_ray_batch(
        o_norm, dirs, t_near, t_far, model.occupancy, config.max_samples, rng
    )
    r, s = t.shape
    sigma = np.zeros((r, s))
    color = np.zeros((r, s, 3))
    flat = mask.reshape(-1)
    if flat.any():
        pts = (o_norm[:, None, :] + t[:, :, None] * dirs[:, None, :]).reshape(-1, 3)[flat]
        feats = encode(model.grid, cube_from_contracted(contract(pts)))
        view = np.broadcast_to(dirs[:, None, :], (r, s, 3)).reshape(-1, 3)[flat]
        app = np.atleast_2d(appearance)
        if app.shape[0] != 1:
            app = np.broadcast_to(app[:, None, :], (r, s, app.shape[1])).reshape(-1, app.shape[1])[flat]
        sg, cl, _ = decoder_forward_cached(model.decoder, feats, view, app)
        sigma.reshape(-1)[flat] = sg
        color.reshape(-1, 3)[flat] = cl
    rgb, _, _ = composite_batch(t, delta, sigma, color, mask, config.background_rgb)
    return rgb


def render_image(
    model: Model,
    pose: CameraPose,
    appearance: np.ndarray | None = None,
    config: RenderConfig = RenderConfig(),
    seed: int = 0,
    chunk_rays: int = 8192,
) -> ImageBuffer:
    """Render a full view; deterministic for a given seed.

    Uses the mean appearance embedding when none is supplied (the
    validation protocol).
    """
    if appearance is None:
        appearance = mean_appearance(model.decoder)
    rng = np.random.default_rng(seed)
    px, py = np.meshgrid(np.arange(pose.width), np.arange(pose.height), indexing="xy")
    origins, dirs = pixel_rays(pose, px.ravel(), py.ravel())
    out = np.empty((pose.width * pose.height, 3))
    for lo in range(0, origins.shape[0], chunk_rays):
        hi = min(lo + chunk_rays, origins.shape[0])
        try:
            out[lo:hi] = render_rays(model, origins[lo:hi], dirs[lo:hi], appearance, config, rng)
        except (FloatingPointError, ValueError) as e:
            y0, y1 = lo // pose.width, (hi - 1) // pose.width
            raise RuntimeError(f"render failed on pixel rows {y0}..{y1}: {e}") from e
    pixels = np.clip(out, 0.0, 1.0).reshape(pose.height, pose.width, 3)
    return ImageBuffer(pixels.astype(np.float32))
