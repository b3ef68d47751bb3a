"""Combining per-block renderings of one view into a final image.

Two rules: inverse-distance blending (the classical baseline, prone to
fog when block centers are close) and per-pixel winner-takes-all
selection guided by the coarse global model's rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageBuffer, Vec3, as_vec3


@dataclass(frozen=True)
class FusionInput:
    block_images: list[ImageBuffer]
    block_centroids: np.ndarray  # (K, 3) mean member camera centers
    global_image: ImageBuffer
    view_center: Vec3

    def __post_init__(self):
        if len(self.block_images) < 1:
            raise ValueError("need at least one block image")
        w, h = self.global_image.width, self.global_image.height
        for img in self.block_images:
            if img.width != w or img.height != h:
                raise ValueError("all images must share the global image's dimensions")
        cent = np.asarray(self.block_centroids, dtype=np.float64).reshape(-1, 3)
        if cent.shape[0] != len(self.block_images):
            raise ValueError("need one centroid per block")
        object.__setattr__(self, "block_centroids", cent)
        object.__setattr__(self, "view_center", as_vec3(self.view_center))

    @property
    def k(self) -> int:
        return len(self.block_images)


def idw_weights(distances: np.ndarray, gamma: float) -> np.ndarray:
    """Normalized inverse-distance weights d^-gamma / sum. A zero distance
    collapses all weight onto that block (first such index on ties)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = np.asarray(distances, dtype=np.float64)
    w = np.zeros_like(d)
    if np.any(d == 0):
        w[int(np.argmin(d))] = 1.0
        return w
    w = d**-gamma
    return w / w.sum()


def idw_blend(inp: FusionInput, gamma: float = 1.0) -> ImageBuffer:
    """Pixelwise convex blend of block images, weighted by inverse
    view-to-block-centroid distance."""
    d = np.linalg.norm(inp.view_center - inp.block_centroids, axis=1)
    w = idw_weights(d, gamma)
    stack = np.stack([img.pixels.astype(np.float64) for img in inp.block_images])
    out = np.einsum("k,khwc->hwc", w, stack)
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32))


def global_guided_fuse(inp: FusionInput) -> tuple[ImageBuffer, np.ndarray]:
    """Per pixel, keep the block color closest (L2 over RGB) to the coarse
    global rendering; ties go to the lowest block index.

    Returns the fused image and the (H, W) selection map of winning
    block indices.
    """
    stack = np.stack([img.pixels.astype(np.float64) for img in inp.block_images])  # (K, H, W, 3)
    ref = inp.global_image.pixels.astype(np.float64)
    dist = np.linalg.norm(stack - ref[None], axis=-1)  # (K, H, W)
    selection = dist.argmin(axis=0)  # first minimum wins ties
    fused = np.take_along_axis(stack, selection[None, :, :, None], axis=0)[0]
    return ImageBuffer(fused.astype(np.float32)), selection
