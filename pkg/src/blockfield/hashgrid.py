"""Multi-resolution hash-grid feature encoder with an exact backward pass.

Each level stores a table of learnable feature rows. A query point in
[0, 1]^3 is scaled to the level's resolution, its cell's 8 corner rows
are fetched (directly for levels whose full grid fits in the table,
hashed otherwise) and trilinearly interpolated. Level features are
concatenated coarse-to-fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Per-axis hashing primes. The leading 1 keeps the x axis unmixed.
HASH_PRIMES = (1, 2654435761, 805459861)

# Corner offsets of a unit cell, fixed order: bit 2 -> x, bit 1 -> y, bit 0 -> z.
_CORNERS = np.array(
    [[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 4
    table_size_log2: int = 19
    base_resolution: int = 16
    max_resolution: int = 2048

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if not (1 <= self.base_resolution <= self.max_resolution):
            raise ValueError("require max_resolution >= base_resolution >= 1")
        if self.table_size_log2 < 1 or self.features_per_level < 1:
            raise ValueError("table size and feature count must be positive")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        # the 1e-9 guards the exact powers against representation error
        return tuple(
            int(math.floor(self.base_resolution * self.growth**l + 1e-9))
            for l in range(self.levels)
        )

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_is_dense(self, level: int) -> bool:
        n = self.level_resolutions[level]
        return (n + 1) ** 3 <= self.table_size


@dataclass
class HashGrid:
    config: HashGridConfig
    tables: list[np.ndarray]  # levels entries of shape (table_size, features_per_level)

    @classmethod
    def create(cls, config: HashGridConfig, seed: int = 0, dtype=np.float32) -> "HashGrid":
        rng = np.random.default_rng(seed)
        tables = [
            rng.uniform(-1e-4, 1e-4, (config.table_size, config.features_per_level)).astype(dtype)
            for _ in range(config.levels)
        ]
        return cls(config=config, tables=tables)

    @property
    def dtype(self):
        return self.tables[0].dtype

    def validate(self) -> None:
        if len(self.tables) != self.config.levels:
            raise ValueError("table count must equal level count")
        shape = (self.config.table_size, self.config.features_per_level)
        for t in self.tables:
            if t.shape != shape:
                raise ValueError(f"table shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError("non-finite table entry")


def hash_index(grid_coord, level: int, config: HashGridConfig) -> np.ndarray | int:
    """Spatial hash of integer grid coordinates into [0, table_size).

    XOR of per-axis coordinate*prime products in wrapping 64-bit unsigned
    arithmetic, reduced mod the table size.
    """
    coords = np.asarray(grid_coord, dtype=np.int64)
    if level >= config.levels:
        raise ValueError(f"level {level} out of range for {config.levels} levels")
    if np.any(coords < 0):
        raise ValueError("grid coordinates must be nonnegative")
    scalar = coords.ndim == 1
    c = np.atleast_2d(coords).astype(np.uint64)
    h = _hash_u64(c)
    idx = (h & np.uint64(config.table_size - 1)).astype(np.int64)
    return int(idx[0]) if scalar else idx


def _hash_u64(coords_u64: np.ndarray) -> np.ndarray:
    """Wrapping-uint64 XOR hash over the last axis of (..., 3) coords."""
    h = coords_u64[..., 0] * np.uint64(HASH_PRIMES[0])
    h = h ^ (coords_u64[..., 1] * np.uint64(HASH_PRIMES[1]))
    h = h ^ (coords_u64[..., 2] * np.uint64(HASH_PRIMES[2]))
    return h


def _level_lookup(config: HashGridConfig, x: np.ndarray, level: int):
    """Corner table rows and trilinear weights for one level.

    x must already be clamped to [0, 1]^3. Returns (idx (N, 8), w (N, 8))
    with corners ordered per _CORNERS. Hashes per axis to avoid building
    (N, 8, 3) intermediates.
    """
    n = config.level_resolutions[level]
    dtype = x.dtype
    pos = x * dtype.type(n)
    i0 = np.minimum(np.floor(pos), n - 1).astype(np.int64)
    i0 = np.maximum(i0, 0)
    frac = pos - i0  # in [0, 1]

    npts = x.shape[0]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w = np.empty((npts, 8), dtype=dtype)
    wxy = gx * gy
    w[:, 0] = wxy * gz
    w[:, 1] = wxy * fz
    wxy = gx * fy
    w[:, 2] = wxy * gz
    w[:, 3] = wxy * fz
    wxy = fx * gy
    w[:, 4] = wxy * gz
    w[:, 5] = wxy * fz
    wxy = fx * fy
    w[:, 6] = wxy * gz
    w[:, 7] = wxy * fz

    idx = np.empty((npts, 8), dtype=np.int64)
    if config.level_is_dense(level):
        m = n + 1
        ax = i0[:, 0] * (m * m)
        ay = i0[:, 1] * m
        az = i0[:, 2]
        for k, (ox, oy, oz) in enumerate(_CORNERS):
            idx[:, k] = ax + ox * (m * m) + ay + oy * m + az + oz
    else:
        u = i0.astype(np.uint64)
        hx = (u[:, 0] * np.uint64(HASH_PRIMES[0]), (u[:, 0] + np.uint64(1)) * np.uint64(HASH_PRIMES[0]))
        hy = (u[:, 1] * np.uint64(HASH_PRIMES[1]), (u[:, 1] + np.uint64(1)) * np.uint64(HASH_PRIMES[1]))
        hz = (u[:, 2] * np.uint64(HASH_PRIMES[2]), (u[:, 2] + np.uint64(1)) * np.uint64(HASH_PRIMES[2]))
        t_mask = np.uint64(config.table_size - 1)
        for k, (ox, oy, oz) in enumerate(_CORNERS):
            idx[:, k] = ((hx[ox] ^ hy[oy] ^ hz[oz]) & t_mask).astype(np.int64)
    return idx, w


@dataclass
class EncodeCache:
    """Corner indices and trilinear weights, reusable by the backward pass."""

    n_points: int
    levels: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _prepare(x, dtype) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=dtype)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) points, got {arr.shape}")
    return np.clip(arr, 0.0, 1.0), scalar


def encode_cache(grid: HashGrid, x) -> EncodeCache:
    pts, _ = _prepare(x, grid.dtype)
    cache = EncodeCache(n_points=pts.shape[0])
    for level in range(grid.config.levels):
        cache.levels.append(_level_lookup(grid.config, pts, level))
    return cache


def encode_from_cache(grid: HashGrid, cache: EncodeCache) -> np.ndarray:
    cfg = grid.config
    out = np.empty((cache.n_points, cfg.feature_dim), dtype=grid.dtype)
    for level, (idx, w) in enumerate(cache.levels):
        table = grid.tables[level]
        lo = level * cfg.features_per_level
        acc = w[:, 0:1] * table[idx[:, 0]]
        for k in range(1, 8):
            acc += w[:, k : k + 1] * table[idx[:, k]]
        out[:, lo : lo + cfg.features_per_level] = acc
    return out


def encode(grid: HashGrid, x) -> np.ndarray:
    """Encode points in [0, 1]^3 (clamped) into concatenated level features.

    Accepts a single (3,) point or an (N, 3) batch.
    """
    pts, scalar = _prepare(x, grid.dtype)
    feats = encode_from_cache(grid, encode_cache(grid, pts))
    return feats[0] if scalar else feats


def encode_backward_from_cache(
    grid: HashGrid, cache: EncodeCache, upstream: np.ndarray
) -> list[np.ndarray]:
    cfg = grid.config
    up = np.atleast_2d(np.asarray(upstream))
    if up.shape != (cache.n_points, cfg.feature_dim):
        raise ValueError(f"upstream shape {up.shape} != ({cache.n_points}, {cfg.feature_dim})")
    grads = []
    t = cfg.table_size
    for level, (idx, w) in enumerate(cache.levels):
        lo = level * cfg.features_per_level
        up_l = up[:, lo : lo + cfg.features_per_level]  # (N, F)
        flat_idx = idx.ravel()
        g = np.empty((t, cfg.features_per_level), dtype=grid.dtype)
        for f in range(cfg.features_per_level):
            contrib = (w * up_l[:, f : f + 1]).ravel()
            g[:, f] = np.bincount(flat_idx, weights=contrib, minlength=t)
        grads.append(g)
    return grads


def encode_backward(grid: HashGrid, x, upstream: np.ndarray) -> list[np.ndarray]:
    """Scatter upstream feature gradients onto the touched table entries.

    Returns one dense (table_size, features_per_level) gradient array per
    level; entries not touched by x stay exactly zero.
    """
    pts, _ = _prepare(x, grid.dtype)
    return encode_backward_from_cache(grid, encode_cache(grid, pts), upstream)


def clone_grid(grid: HashGrid) -> HashGrid:
    return HashGrid(config=grid.config, tables=[t.copy() for t in grid.tables])
