"""Canonical-space mesh and point-cloud types plus the NOCS raster codec.

The canonical frame is the unit cube [0,1]^3: meshes are scaled so their
axis-aligned bounding box has diagonal length 1 and sits centered at
(0.5, 0.5, 0.5), which keeps every surface coordinate usable as an RGB
value. Raster geometry is stored in float32; the surface-distance oracle
computes in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError

CANONICAL_CENTER = np.array([0.5, 0.5, 0.5])
# a pixel of a generated map counts as foreground when any channel clears this;
# lossless for unit-diagonal normalized meshes (true foreground max-channel
# stays well above it) while rejecting the dark-gray background mode
DEFAULT_MASK_THRESHOLD = 0.2


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: vertices [N,3] float32, faces [M,3] int32 vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float32)
        f = np.asarray(self.faces, dtype=np.int32)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 1:
            raise InvalidInputError(f"mesh '{self.name}': vertices must be [N,3], got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
            raise InvalidInputError(f"mesh '{self.name}': needs at least one triangle, got faces {f.shape}")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise InvalidInputError(f"mesh '{self.name}': face index out of range (0..{v.shape[0] - 1})")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def triangles(self) -> np.ndarray:
        """[M,3,3] float64 corner array."""
        return self.vertices.astype(np.float64)[self.faces]


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D point set in canonical space with per-point source-view tags."""

    points: np.ndarray
    view_tags: np.ndarray = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        tags = self.view_tags
        if tags is None:
            tags = np.zeros(p.shape[0], dtype=np.int32)
        tags = np.asarray(tags, dtype=np.int32).reshape(-1)
        if tags.shape[0] != p.shape[0]:
            raise InvalidInputError(f"point/tag count mismatch: {p.shape[0]} vs {tags.shape[0]}")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "view_tags", tags)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class NocsMap:
    """H x W raster of canonical coordinates with a foreground mask.

    Masked values lie in [0,1]^3; unmasked pixels are exactly zero.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim != 3 or v.shape[2] != 3:
            raise InvalidInputError(f"NOCS values must be [H,W,3], got {v.shape}")
        if m.shape != v.shape[:2]:
            raise InvalidInputError(f"mask shape {m.shape} does not match raster {v.shape[:2]}")
        if m.any():
            fg = v[m]
            if fg.min() < 0.0 or fg.max() > 1.0:
                raise InvalidInputError("masked NOCS values outside [0,1]")
        if (~m).any() and np.any(v[~m] != 0.0):
            raise InvalidInputError("unmasked NOCS values must be exactly 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class NocsFrame:
    """Visible and occluded (back-surface) NOCS layers sharing one mask."""

    visible: NocsMap
    occluded: NocsMap

    def __post_init__(self):
        if self.visible.values.shape != self.occluded.values.shape:
            raise InvalidInputError("visible/occluded layer dimensions differ")
        if not np.array_equal(self.visible.mask, self.occluded.mask):
            raise InvalidInputError("visible/occluded layers must share one mask")

    @property
    def mask(self):
        return self.visible.mask

    @property
    def height(self):
        return self.visible.height

    @property
    def width(self):
        return self.visible.width


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Scale and recenter so the bounding-box diagonal is 1 at (0.5,0.5,0.5).

    Idempotent: a mesh already in canonical form is returned unchanged.
    """
    v = mesh.vertices.astype(np.float64)
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag < 1e-12:
        raise DegenerateGeometryError(f"mesh '{mesh.name}' has zero extent")
    center = (lo + hi) / 2.0
    if abs(diag - 1.0) < 1e-7 and np.abs(center - CANONICAL_CENTER).max() < 1e-7:
        return mesh
    out = (v - center) / diag + CANONICAL_CENTER
    normalized = Mesh(out.astype(np.float32), mesh.faces, mesh.name)
    tris = normalized.triangles()
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    if np.any(areas < 1e-14):
        raise DegenerateGeometryError(
            f"mesh '{mesh.name}': {int((areas < 1e-14).sum())} zero-area face(s) after normalization"
        )
    return normalized


def nocs_map_to_points(source: NocsFrame | NocsMap, view_tag: int = 0) -> PointCloud:
    """Decode masked pixels to 3D points, row-major, one point per layer.

    For a frame the visible layer's points come first, then the occluded
    layer's, both in the same row-major pixel order.
    """
    if isinstance(source, NocsFrame):
        layers = [source.visible, source.occluded]
    else:
        layers = [source]
    chunks = []
    for layer in layers:
        ys, xs = np.nonzero(layer.mask)
        chunks.append(layer.values[ys, xs])
    pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3), np.float32)
    tags = np.full(pts.shape[0], view_tag, dtype=np.int32)
    return PointCloud(pts, tags)


def fuse_point_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Multiset union in input order; duplicates from overlapping views are kept."""
    if not clouds:
        return PointCloud(np.zeros((0, 3), np.float32), np.zeros(0, np.int32))
    pts = np.concatenate([c.points for c in clouds], axis=0)
    tags = np.concatenate([c.view_tags for c in clouds], axis=0)
    return PointCloud(pts, tags)


def _closest_point_distances(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Min distance from each point to any triangle; float64, [P]."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = b - a
    ac = c - a
    p = points[:, None, :]  # [P,1,3]
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    # region selection, first match wins (Ericson, Real-Time Collision Detection)
    close = np.empty_like(ap)
    cond_a = (d1 <= 0) & (d2 <= 0)
    cond_b = (d3 >= 0) & (d4 <= d3)
    cond_c = (d6 >= 0) & (d5 <= d6)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    cond_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    interior = a + v_in[..., None] * ab + w_in[..., None] * ac
    close[:] = interior
    sel = cond_bc & True
    close = np.where(sel[..., None], b + w_bc[..., None] * (c - b), close)
    close = np.where(cond_ac[..., None], a + w_ac[..., None] * ac, close)
    close = np.where(cond_ab[..., None], a + v_ab[..., None] * ab, close)
    close = np.where(cond_c[..., None], np.broadcast_to(c, close.shape), close)
    close = np.where(cond_b[..., None], np.broadcast_to(b, close.shape), close)
    close = np.where(cond_a[..., None], np.broadcast_to(a, close.shape), close)

    d = np.linalg.norm(p - close, axis=-1)
    return d.min(axis=1)


def points_mesh_distance(points: np.ndarray, mesh: Mesh, chunk: int = 1024) -> np.ndarray:
    """Exact min Euclidean distance from each point to the mesh surface.

    Brute force over all faces in float64; this is the oracle the renderer
    and decoder are validated against.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles()
    out = np.empty(pts.shape[0], dtype=np.float64)
    for start in range(0, pts.shape[0], chunk):
        stop = min(start + chunk, pts.shape[0])
        out[start:stop] = _closest_point_distances(pts[start:stop], tris)
    return out


def point_mesh_distance(point, mesh: Mesh) -> float:
    """Distance from one point to the mesh surface (brute force, float64)."""
    return float(points_mesh_distance(np.asarray(point, dtype=np.float64).reshape(1, 3), mesh)[0])


def save_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY, element vertex with x y z properties."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for x, y, z in cloud.points:
        lines.append(f"{x:.6f} {y:.6f} {z:.6f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def save_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
