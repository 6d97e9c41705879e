"""Point-cloud and silhouette evaluation: CD, exact EMD, 2D IoU.

Chamfer distance here is the non-squared convention: the sum of the two
directed mean nearest-neighbor distances. Absolute values depend on this
choice, so it is stated up front; comparisons across tools must match
conventions before comparing numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import InvalidInputError, ResourceLimitError
from .geometry import PointCloud
from .render import ViewPose, project_points

EMD_MAX_POINTS = 4096


@dataclass(frozen=True)
class BinaryImage:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise InvalidInputError(f"binary image must be 2-D, got shape {b.shape}")
        object.__setattr__(self, "bits", b)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Sum of directed mean nearest-neighbor distances, both directions.

    Uses a KD-tree; agrees with the brute-force definition to float64
    rounding.
    """
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer_distance requires non-empty clouds")
    pa = a.points.astype(np.float64)
    pb = b.points.astype(np.float64)
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(d_ab.mean() + d_ba.mean())


def earth_movers_distance(a: PointCloud, b: PointCloud) -> float:
    """Mean transport cost under the optimal bijection between equal-size clouds.

    Solved exactly with the Jonker-Volgenant assignment solver on the full
    Euclidean cost matrix, so cloud sizes are capped at EMD_MAX_POINTS.
    """
    if len(a) != len(b):
        raise InvalidInputError(f"EMD needs equal sizes, got {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise InvalidInputError("EMD requires non-empty clouds")
    if len(a) > EMD_MAX_POINTS:
        raise ResourceLimitError(f"EMD capped at {EMD_MAX_POINTS} points, got {len(a)}")
    pa = a.points.astype(np.float64)
    pb = b.points.astype(np.float64)
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def subsample_cloud(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Deterministic uniform subsample to exactly n points.

    Samples without replacement when the cloud is large enough, with
    replacement otherwise (duplicates keep multiset semantics).
    """
    if n < 1:
        raise InvalidInputError(f"subsample size must be >= 1, got {n}")
    if len(cloud) == 0:
        raise InvalidInputError("cannot subsample an empty cloud")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cloud), size=n, replace=len(cloud) < n)
    return PointCloud(cloud.points[idx], cloud.view_tags[idx])


def project_silhouette(pc: PointCloud, pose: ViewPose, splat_radius: int = 1) -> BinaryImage:
    """Splat each point as a disc through the rendering camera.

    Points behind the camera are skipped; discs are clipped at the image
    border.
    """
    if len(pc) == 0:
        raise InvalidInputError("project_silhouette requires a non-empty cloud")
    if splat_radius < 0:
        raise InvalidInputError("splat_radius must be >= 0")
    res = pose.resolution
    rows, cols, in_front = project_points(pc.points, pose)
    bits = np.zeros((res, res), dtype=bool)
    ri = np.round(rows[in_front]).astype(np.int64)
    ci = np.round(cols[in_front]).astype(np.int64)
    r = int(splat_radius)
    offs = [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= r * r
    ]
    for dy, dx in offs:
        yy = ri + dy
        xx = ci + dx
        ok = (yy >= 0) & (yy < res) & (xx >= 0) & (xx < res)
        bits[yy[ok], xx[ok]] = True
    return BinaryImage(bits)


def iou_2d(a: BinaryImage, b: BinaryImage) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    if a.bits.shape != b.bits.shape:
        raise InvalidInputError(f"image dimensions differ: {a.bits.shape} vs {b.bits.shape}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union
