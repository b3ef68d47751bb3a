"""Camera clustering and overlapping-block construction.

Cameras are clustered by KMeans on their centers; each cluster's
bounding box is scaled up about its midpoint and every camera falling
inside the scaled box joins that block, which creates the overlap
between neighboring blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Aabb, CameraPose

KMEANS_MAX_ITERS = 100
DEGENERATE_PAD = 1e-6


def kmeans_cluster(centers, k: int, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed.

    Runs to assignment convergence or 100 iterations. A cluster that
    empties is reseeded to the point farthest from its assigned centroid.
    """
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"need at least {k} distinct points, got {distinct.shape[0]}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = [pts[rng.integers(pts.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((pts - c) ** 2, axis=1) for c in centroids], axis=0
        )
        if d2.sum() == 0:
            centroids.append(pts[rng.integers(pts.shape[0])])
        else:
            centroids.append(pts[rng.choice(pts.shape[0], p=d2 / d2.sum())])
    centroids = np.stack(centroids)

    labels = None
    for _ in range(KMEANS_MAX_ITERS):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = d2.argmin(axis=1)
        for c in range(k):
            if not np.any(new_labels == c):
                idx = int(np.argmax(d2.min(axis=1)))  # farthest point reseeds
                centroids[c] = pts[idx]
                new_labels[idx] = c
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = pts[labels == c].mean(axis=0)
    return labels


def scale_aabb(box: Aabb, s) -> Aabb:
    """Scale a box about its center by per-axis factors s >= 1.

    Zero-extent axes stay put and then get a tiny pad (1e-6 of the
    largest extent) so containment tests on them remain well-posed.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(3, float(s))
    if np.any(s < 1.0):
        raise ValueError("scale factors must be >= 1")
    center = (box.lo + box.hi) / 2.0
    half = (box.hi - box.lo) / 2.0
    lo = center - s * half
    hi = center + s * half
    degenerate = half == 0.0
    if degenerate.any():
        pad = DEGENERATE_PAD * float((box.hi - box.lo).max())
        lo = lo - degenerate * pad
        hi = hi + degenerate * pad
    return Aabb(lo, hi)


@dataclass(frozen=True)
class BlockAssignment:
    k: int
    s: np.ndarray  # (3,) per-axis scale factors
    labels: np.ndarray  # (N,) primary cluster per image
    block_aabbs: list[Aabb]  # scaled boxes
    members: list[list[int]]  # sorted, overlapping

    def __post_init__(self):
        if len(self.block_aabbs) != self.k or len(self.members) != self.k:
            raise ValueError("need one aabb and member list per block")
        if np.any(np.asarray(self.s) < 1.0):
            raise ValueError("scale factors must be >= 1")
        covered = set()
        for m in self.members:
            if m != sorted(m):
                raise ValueError("member lists must be sorted ascending")
            covered.update(m)
        if covered != set(range(len(self.labels))):
            raise ValueError("every image must appear in at least one block")

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "s": [float(x) for x in self.s],
                "blocks": [
                    {
                        "aabb": [list(map(float, b.lo)), list(map(float, b.hi))],
                        "members": m,
                    }
                    for b, m in zip(self.block_aabbs, self.members)
                ],
                "labels": [int(l) for l in self.labels],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "BlockAssignment":
        d = json.loads(text)
        return cls(
            k=d["k"],
            s=np.asarray(d["s"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64),
            block_aabbs=[Aabb(np.array(b["aabb"][0]), np.array(b["aabb"][1])) for b in d["blocks"]],
            members=[list(b["members"]) for b in d["blocks"]],
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path | str) -> "BlockAssignment":
        return cls.from_json(Path(path).read_text())


def build_blocks(poses: list[CameraPose], k: int, s, seed: int = 0) -> BlockAssignment:
    """Cluster cameras, scale each cluster's box, regroup by containment.

    With s = 1 the members equal the KMeans partition (up to cameras
    sitting exactly on a box face); growing s only ever adds members, and
    every camera keeps its own primary block.
    """
    centers = np.stack([p.center for p in poses])
    labels = kmeans_cluster(centers, k, seed)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(3, float(s))
    aabbs, members = [], []
    for c in range(k):
        cluster_pts = centers[labels == c]
        box = scale_aabb(Aabb.from_points(cluster_pts), s)
        inside = box.contains(centers)
        inside[labels == c] = True  # primary membership always survives
        aabbs.append(box)
        members.append(np.nonzero(inside)[0].tolist())
    return BlockAssignment(k=k, s=s, labels=labels, block_aabbs=aabbs, members=members)


def block_centroids(assignment: BlockAssignment, poses: list[CameraPose]) -> np.ndarray:
    """Mean member camera center per block, the distance anchor for fusion."""
    centers = np.stack([p.center for p in poses])
    return np.stack([centers[m].mean(axis=0) for m in assignment.members])
