"""Ground-truth raster generator: ray-cast meshes into NOCS layers and sketches.

Camera model: perspective, z-up, positioned on a sphere around the canonical
box center and looking at it. Rays go through pixel centers; the nearest
triangle hit fills the visible NOCS layer, the farthest hit along the same
ray fills the occluded (back-surface) layer. Depth is the ray parameter.

The same projection is reused by the metrics module so silhouettes rendered
here and point clouds projected there land on identical pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidInputError
from .geometry import CANONICAL_CENTER, Mesh, NocsFrame, NocsMap

# camera must stay outside the canonical box's bounding sphere
BOX_RADIUS = math.sqrt(3.0) / 2.0
DEFAULT_DISTANCE = 2.2
DEFAULT_FOV = math.radians(40.0)
_RAY_EPS = 1e-9  # barycentric slack so shared edges leave no cracks
_T_MIN = 1e-6


@dataclass(frozen=True)
class ViewPose:
    """Camera on the viewing sphere: azimuth/elevation in radians, look-at center."""

    azimuth: float
    elevation: float
    distance: float = DEFAULT_DISTANCE
    fov: float = DEFAULT_FOV
    resolution: int = 64

    def __post_init__(self):
        if self.distance <= BOX_RADIUS:
            raise InvalidInputError(
                f"camera distance {self.distance} must exceed box radius {BOX_RADIUS:.4f}"
            )
        if self.resolution < 8:
            raise InvalidInputError(f"resolution must be >= 8, got {self.resolution}")
        if not (0.0 < self.fov < math.pi):
            raise InvalidInputError(f"fov must be in (0, pi), got {self.fov}")
        if abs(self.elevation) >= math.pi / 2 - 1e-6:
            raise InvalidInputError("elevation too close to the poles for a z-up camera")


@dataclass(frozen=True)
class RenderBundle:
    frame: NocsFrame
    depth_front: np.ndarray
    depth_back: np.ndarray
    normals: np.ndarray
    silhouette: np.ndarray

    def __post_init__(self):
        m = self.frame.mask
        if self.silhouette.shape != m.shape or not np.array_equal(self.silhouette, m):
            raise InvalidInputError("silhouette must equal the NOCS mask")
        if np.any(self.depth_back[m] < self.depth_front[m] - 1e-6):
            raise InvalidInputError("depth_back < depth_front on masked pixels")


@dataclass(frozen=True)
class SketchImage:
    """Binary stroke raster, 1.0 = stroke."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise InvalidInputError(f"sketch must be 2-D, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def camera_basis(pose: ViewPose):
    """(origin, right, up, forward) in float64, forward pointing at the box center."""
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    ce, se = math.cos(pose.elevation), math.sin(pose.elevation)
    outward = np.array([ce * ca, ce * sa, se])
    origin = CANONICAL_CENTER + pose.distance * outward
    forward = -outward
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return origin, right, up, forward


def pixel_rays(pose: ViewPose):
    """(origin [3], directions [H,W,3] unit float64) through pixel centers."""
    origin, right, up, forward = camera_basis(pose)
    res = pose.resolution
    half = math.tan(pose.fov / 2.0)
    px = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    py = 1.0 - (np.arange(res) + 0.5) / res * 2.0
    sx = px[None, :] * half
    sy = py[:, None] * half
    dirs = forward[None, None] + sx[..., None] * right + sy[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origin, dirs


def project_points(points: np.ndarray, pose: ViewPose):
    """Project world points with the rendering camera.

    Returns (rows, cols) as floats plus an in-front flag; callers round to
    pixel indices. Exactly inverts pixel_rays at pixel centers.
    """
    origin, right, up, forward = camera_basis(pose)
    v = np.asarray(points, dtype=np.float64) - origin
    zf = v @ forward
    in_front = zf > 1e-9
    half = math.tan(pose.fov / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (v @ right) / (zf * half)
        sy = (v @ up) / (zf * half)
    res = pose.resolution
    cols = (sx + 1.0) / 2.0 * res - 0.5
    rows = (1.0 - sy) / 2.0 * res - 0.5
    return rows, cols, in_front


def make_view_ring(
    n: int,
    elevations: list[float],
    seed: int,
    distance: float = DEFAULT_DISTANCE,
    fov: float = DEFAULT_FOV,
    resolution: int = 64,
) -> list[ViewPose]:
    """n poses, azimuths evenly spaced over [0, 2pi), elevations cycled.

    The seed jitters only the shared azimuth phase, so a given seed always
    produces the same ring.
    """
    if n < 1:
        raise InvalidInputError(f"need at least one view, got {n}")
    if not elevations:
        raise InvalidInputError("elevation list must be non-empty")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi / n)
    poses = []
    for i in range(n):
        poses.append(
            ViewPose(
                azimuth=(phase + 2.0 * math.pi * i / n) % (2.0 * math.pi),
                elevation=float(elevations[i % len(elevations)]),
                distance=distance,
                fov=fov,
                resolution=resolution,
            )
        )
    return poses


def _moller_trumbore(origin, dirs, tris, ray_chunk=None):
    """First and last hits for every ray.

    Returns (t_near, tri_near, u_near, v_near, t_far, tri_far, u_far, v_far)
    flattened over rays; tri indices are -1 for misses.
    """
    if ray_chunk is None:
        # keep the [rays, tris] work arrays around a few hundred MB max
        ray_chunk = int(np.clip(2_000_000 // max(len(tris), 1), 64, 4096))
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    tvec = origin[None, :] - v0          # constant per triangle
    qvec = np.cross(tvec, e1)            # constant per triangle
    t_num = (e2 * qvec).sum(-1)          # t = t_num / det

    n_rays = dirs.shape[0]
    t_near = np.full(n_rays, np.inf)
    t_far = np.full(n_rays, -np.inf)
    idx_near = np.full(n_rays, -1, dtype=np.int64)
    idx_far = np.full(n_rays, -1, dtype=np.int64)
    uv_near = np.zeros((n_rays, 2))
    uv_far = np.zeros((n_rays, 2))

    for start in range(0, n_rays, ray_chunk):
        stop = min(start + ray_chunk, n_rays)
        d = dirs[start:stop]                         # [R,3]
        pvec = np.cross(d[:, None, :], e2[None])     # [R,T,3]
        det = (e1[None] * pvec).sum(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            u = (tvec[None] * pvec).sum(-1) * inv
            v = (d[:, None, :] * qvec[None]).sum(-1) * inv
            t = t_num[None] * inv
        hit = (
            (np.abs(det) > 1e-12)
            & (u >= -_RAY_EPS)
            & (v >= -_RAY_EPS)
            & (u + v <= 1.0 + _RAY_EPS)
            & (t > _T_MIN)
        )
        t_hit = np.where(hit, t, np.inf)
        near = t_hit.argmin(axis=1)
        rows = np.arange(stop - start)
        any_hit = hit[rows, near]
        t_near[start:stop] = np.where(any_hit, t_hit[rows, near], np.inf)
        idx_near[start:stop] = np.where(any_hit, near, -1)
        uv_near[start:stop, 0] = u[rows, near]
        uv_near[start:stop, 1] = v[rows, near]

        t_hit_far = np.where(hit, t, -np.inf)
        far = t_hit_far.argmax(axis=1)
        t_far[start:stop] = np.where(any_hit, t_hit_far[rows, far], -np.inf)
        idx_far[start:stop] = np.where(any_hit, far, -1)
        uv_far[start:stop, 0] = u[rows, far]
        uv_far[start:stop, 1] = v[rows, far]

    return t_near, idx_near, uv_near, t_far, idx_far, uv_far


def cast_views(mesh: Mesh, pose: ViewPose) -> RenderBundle:
    """Ray-cast a normalized mesh into a full raster bundle.

    Per pixel: nearest hit -> visible NOCS value (the hit point itself, which
    already lives in [0,1]^3), farthest hit -> occluded NOCS value, ray
    parameters -> depth layers, nearest geometric normal (oriented toward the
    camera) -> normal map, any hit -> silhouette. Deterministic.
    """
    verts = mesh.vertices
    if verts.min() < -1e-5 or verts.max() > 1.0 + 1e-5:
        raise ContractViolationError(
            "cast_views requires a normalized mesh: vertex coordinates outside [0,1] by more than 1e-5"
        )
    res = pose.resolution
    origin, dirs = pixel_rays(pose)
    flat_dirs = dirs.reshape(-1, 3)
    tris = mesh.triangles()
    t_near, idx_near, uv_near, t_far, idx_far, uv_far = _moller_trumbore(origin, flat_dirs, tris)

    mask = (idx_near >= 0).reshape(res, res)
    hit_rows = np.nonzero(idx_near >= 0)[0]

    def surface_points(idx, uv):
        tri = tris[idx[hit_rows]]
        u = uv[hit_rows, 0][:, None]
        v = uv[hit_rows, 1][:, None]
        pts = tri[:, 0] + u * (tri[:, 1] - tri[:, 0]) + v * (tri[:, 2] - tri[:, 0])
        return np.clip(pts, 0.0, 1.0)

    vis_vals = np.zeros((res * res, 3), dtype=np.float32)
    occ_vals = np.zeros((res * res, 3), dtype=np.float32)
    vis_vals[hit_rows] = surface_points(idx_near, uv_near).astype(np.float32)
    occ_vals[hit_rows] = surface_points(idx_far, uv_far).astype(np.float32)

    depth_front = np.zeros(res * res, dtype=np.float32)
    depth_back = np.zeros(res * res, dtype=np.float32)
    depth_front[hit_rows] = t_near[hit_rows].astype(np.float32)
    depth_back[hit_rows] = t_far[hit_rows].astype(np.float32)

    normals = np.zeros((res * res, 3), dtype=np.float32)
    if hit_rows.size:
        tri = tris[idx_near[hit_rows]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        facing = (n * flat_dirs[hit_rows]).sum(axis=1)
        n = np.where(facing[:, None] > 0, -n, n)
        normals[hit_rows] = n.astype(np.float32)

    frame = NocsFrame(
        NocsMap(vis_vals.reshape(res, res, 3), mask),
        NocsMap(occ_vals.reshape(res, res, 3), mask),
    )
    return RenderBundle(
        frame=frame,
        depth_front=depth_front.reshape(res, res),
        depth_back=depth_back.reshape(res, res),
        normals=normals.reshape(res, res, 3),
        silhouette=mask,
    )


def _shift(arr, dy, dx, fill):
    out = np.full_like(arr, fill)
    h, w = arr.shape[:2]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = arr[ys_src, xs_src]
    return out


def extract_sketch(bundle: RenderBundle, depth_thresh: float = 0.02,
                   normal_thresh: float = 0.3) -> SketchImage:
    """Edge-based synthetic sketch: silhouette outline plus interior creases.

    A pixel becomes a stroke at a 4-neighbor mask transition, where it is the
    nearer side of a depth jump above depth_thresh, or where the normal turns
    by more than normal_thresh (as 1 - dot) against a masked neighbor. This
    extractor is a stand-in for artist sketches; there is no canonical
    definition to match.
    """
    if depth_thresh <= 0 or normal_thresh <= 0:
        raise InvalidInputError("sketch thresholds must be positive")
    mask = bundle.silhouette
    depth = bundle.depth_front
    normals = bundle.normals
    stroke = np.zeros_like(mask)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb_mask = _shift(mask, dy, dx, False)
        stroke |= mask & ~nb_mask
        both = mask & nb_mask
        nb_depth = _shift(depth, dy, dx, 0.0)
        stroke |= both & (nb_depth - depth > depth_thresh)
        nb_norm = _shift(normals, dy, dx, 0.0)
        dot = (normals * nb_norm).sum(axis=-1)
        stroke |= both & (1.0 - dot > normal_thresh)
    return SketchImage(stroke.astype(np.float32))
