"""Procedural training data: category meshes, rendered pairs, manifests.

Shapes are assemblies of boxes and cylinders with seeded random dimensions,
so every ground truth is exactly verifiable against the mesh surface. An OBJ
import path keeps real-asset experiments possible.

Manifest format: UTF-8, one '# split=... seed=...' comment line, a
tab-separated header row, then one record per rendered view with paths
relative to the manifest's directory.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .geometry import Mesh, normalize_mesh
from .rasters import save_nocs_frame, save_pgm, save_ppm
from .render import ViewPose, cast_views, extract_sketch

CATEGORIES = ("chair", "car", "airplane")

MANIFEST_COLUMNS = (
    "object_id",
    "category",
    "view_index",
    "sketch",
    "nocs",
    "azimuth",
    "elevation",
    "distance",
    "fov",
    "resolution",
    "prompt",
)


@dataclass(frozen=True)
class SampleRecord:
    object_id: str
    category: str
    view_index: int
    sketch_path: str
    nocs_path: str
    azimuth: float
    elevation: float
    distance: float
    fov: float
    resolution: int
    prompt: str

    def pose(self) -> ViewPose:
        return ViewPose(
            azimuth=self.azimuth,
            elevation=self.elevation,
            distance=self.distance,
            fov=self.fov,
            resolution=self.resolution,
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    split: str
    seed: int
    root: Path

    def object_ids(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.object_id not in seen:
                seen.append(r.object_id)
        return seen

    def by_object(self) -> dict[str, list[SampleRecord]]:
        out: dict[str, list[SampleRecord]] = {}
        for r in self.records:
            out.setdefault(r.object_id, []).append(r)
        return out


# ---------------------------------------------------------------------------
# primitive assemblies


def _box(center, size):
    cx, cy, cz = center
    sx, sy, sz = size
    signs = [(x, y, z) for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    verts = [
        (cx + x * sx / 2, cy + y * sy / 2, cz + z * sz / 2) for x, y, z in signs
    ]
    quads = [
        (0, 1, 3, 2),
        (4, 6, 7, 5),
        (0, 4, 5, 1),
        (2, 3, 7, 6),
        (0, 2, 6, 4),
        (1, 5, 7, 3),
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return verts, faces


def _cylinder(base_center, axis, radius, length, nseg=10):
    """Closed cylinder along one coordinate axis ('x', 'y' or 'z')."""
    ax = "xyz".index(axis)
    u, v = [i for i in range(3) if i != ax]
    verts = []
    lo = list(base_center)
    hi = list(base_center)
    hi[ax] += length
    for t in range(nseg):
        ang = 2 * math.pi * t / nseg
        ring = list(lo)
        ring[u] += radius * math.cos(ang)
        ring[v] += radius * math.sin(ang)
        verts.append(tuple(ring))
        ring2 = list(ring)
        ring2[ax] += length
        verts.append(tuple(ring2))
    bi = len(verts)
    verts.append(tuple(lo))
    ti = len(verts)
    verts.append(tuple(hi))
    faces = []
    for t in range(nseg):
        a = 2 * t
        b = 2 * ((t + 1) % nseg)
        faces.append((a, b, a + 1))
        faces.append((b, b + 1, a + 1))
        faces.append((bi, b, a))
        faces.append((ti, a + 1, b + 1))
    return verts, faces


def _merge(parts, name):
    verts = []
    faces = []
    for pv, pf in parts:
        off = len(verts)
        verts.extend(pv)
        faces.extend((a + off, b + off, c + off) for a, b, c in pf)
    return Mesh(np.asarray(verts, np.float32), np.asarray(faces, np.int32), name)


def _chair(rng, name):
    seat_w = rng.uniform(0.8, 1.2)
    seat_d = rng.uniform(0.8, 1.2)
    seat_t = rng.uniform(0.1, 0.18)
    height = rng.uniform(0.7, 1.1)
    back_h = rng.uniform(0.7, 1.2)
    back_t = rng.uniform(0.08, 0.15)
    leg_r = rng.uniform(0.05, 0.09)
    parts = [_box((0, 0, height + seat_t / 2), (seat_w, seat_d, seat_t))]
    inset_x = seat_w / 2 - leg_r * 1.2
    inset_y = seat_d / 2 - leg_r * 1.2
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(_cylinder((sx * inset_x, sy * inset_y, 0), "z", leg_r, height, nseg=8))
    parts.append(
        _box((0, -seat_d / 2 + back_t / 2, height + seat_t + back_h / 2), (seat_w, back_t, back_h))
    )
    if rng.random() < 0.5:  # armrests
        arm_h = rng.uniform(0.25, 0.4)
        for sx in (-1, 1):
            parts.append(
                _box(
                    (sx * (seat_w / 2 - 0.05), 0, height + seat_t + arm_h / 2),
                    (0.1, seat_d * 0.8, arm_h),
                )
            )
    return _merge(parts, name)


def _car(rng, name):
    body_l = rng.uniform(1.6, 2.2)
    body_w = rng.uniform(0.7, 1.0)
    body_h = rng.uniform(0.35, 0.5)
    cabin_l = body_l * rng.uniform(0.4, 0.6)
    cabin_h = rng.uniform(0.25, 0.4)
    wheel_r = rng.uniform(0.16, 0.24)
    wheel_w = 0.1
    parts = [_box((0, 0, wheel_r + body_h / 2), (body_l, body_w, body_h))]
    parts.append(
        _box(
            (rng.uniform(-0.2, 0.0), 0, wheel_r + body_h + cabin_h / 2),
            (cabin_l, body_w * 0.85, cabin_h),
        )
    )
    for sx in (-1, 1):
        for sy in (-1, 1):
            base = (sx * body_l * 0.32, sy * (body_w / 2 + wheel_w) - wheel_w / 2, wheel_r)
            parts.append(_cylinder((base[0], base[1], base[2]), "y", wheel_r, wheel_w, nseg=10))
    return _merge(parts, name)


def _airplane(rng, name):
    fus_l = rng.uniform(1.8, 2.4)
    fus_r = rng.uniform(0.12, 0.18)
    span = rng.uniform(1.6, 2.2)
    chord = rng.uniform(0.35, 0.55)
    wing_t = 0.06
    tail_h = rng.uniform(0.3, 0.45)
    parts = [_cylinder((-fus_l / 2, 0, 0), "x", fus_r, fus_l, nseg=10)]
    parts.append(_box((rng.uniform(0.0, 0.2), 0, 0), (chord, span, wing_t)))
    parts.append(_box((-fus_l / 2 + chord * 0.3, 0, tail_h / 2), (chord * 0.6, wing_t, tail_h)))
    parts.append(_box((-fus_l / 2 + chord * 0.3, 0, 0), (chord * 0.6, span * 0.4, wing_t)))
    return _merge(parts, name)


_BUILDERS = {"chair": _chair, "car": _car, "airplane": _airplane}


def generate_procedural_shapes(category: str, n: int, seed: int) -> list[Mesh]:
    """n normalized meshes of one category, deterministic per (category, seed, index)."""
    if category not in _BUILDERS:
        raise InvalidInputError(f"unknown category '{category}' (have {sorted(_BUILDERS)})")
    if n < 1:
        raise InvalidInputError(f"need n >= 1, got {n}")
    out = []
    cat_key = zlib.crc32(category.encode("utf-8"))
    for i in range(n):
        rng = np.random.default_rng([seed, cat_key, i])
        mesh = _BUILDERS[category](rng, f"{category}_{i:03d}")
        out.append(normalize_mesh(mesh))
    return out


# ---------------------------------------------------------------------------
# OBJ ingestion


def parse_obj(text: str) -> Mesh:
    """Parse 'v' and 'f' records; polygons are fan-triangulated.

    Supports 1-based and negative indices and the v/vt/vn slash syntax
    (only the vertex index is used). Other record types are skipped.
    """
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    name = "obj"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "v":
            if len(tokens) < 4:
                raise ParseError(f"vertex needs 3 coordinates: {raw!r}", line=lineno)
            try:
                verts.append(tuple(float(t) for t in tokens[1:4]))
            except ValueError:
                raise ParseError(f"bad vertex coordinate: {raw!r}", line=lineno) from None
        elif kind == "f":
            if len(tokens) < 4:
                raise ParseError(f"face needs at least 3 vertices: {raw!r}", line=lineno)
            idx = []
            for tok in tokens[1:]:
                ref = tok.split("/")[0]
                try:
                    i = int(ref)
                except ValueError:
                    raise ParseError(f"bad face index {ref!r}", line=lineno) from None
                if i == 0:
                    raise ParseError("face index 0 is not allowed", line=lineno)
                i = i - 1 if i > 0 else len(verts) + i
                if not (0 <= i < len(verts)):
                    raise ParseError(f"face index {ref} out of range (have {len(verts)} vertices)", line=lineno)
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
        elif kind == "o" and len(tokens) > 1:
            name = tokens[1]
        # vn/vt/g/s/usemtl/mtllib/l and friends are irrelevant here
    if not faces:
        raise ParseError("no faces found")
    return Mesh(np.asarray(verts, np.float32), np.asarray(faces, np.int32), name)


def load_obj(path) -> Mesh:
    return parse_obj(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# rendering to disk


def build_dataset(
    items: list[tuple[str, str, Mesh]],
    ring: list[ViewPose],
    prompts: dict[str, str] | None,
    out_dir,
    seed: int,
    depth_thresh: float = 0.02,
    normal_thresh: float = 0.3,
    previews: bool = False,
) -> Manifest:
    """Render every (object, pose), write rasters, return the manifest.

    ``items`` are (object_id, category, normalized mesh). Prompts default to
    the category name; a prompts dict overrides per object id.
    """
    if not items or not ring:
        raise InvalidInputError("build_dataset needs at least one mesh and one pose")
    root = Path(out_dir)
    (root / "rasters").mkdir(parents=True, exist_ok=True)
    (root / "sketches").mkdir(parents=True, exist_ok=True)
    if previews:
        (root / "previews").mkdir(parents=True, exist_ok=True)
    records = []
    for object_id, category, mesh in items:
        prompt = (prompts or {}).get(object_id, category)
        for k, pose in enumerate(ring):
            bundle = cast_views(mesh, pose)
            sketch = extract_sketch(bundle, depth_thresh, normal_thresh)
            nocs_rel = f"rasters/{object_id}_v{k:02d}.nmap"
            sketch_rel = f"sketches/{object_id}_v{k:02d}.pgm"
            save_nocs_frame(root / nocs_rel, bundle.frame)
            save_pgm(root / sketch_rel, sketch.values)
            if previews:
                save_ppm(root / f"previews/{object_id}_v{k:02d}.ppm", bundle.frame.visible.values)
            records.append(
                SampleRecord(
                    object_id=object_id,
                    category=category,
                    view_index=k,
                    sketch_path=sketch_rel,
                    nocs_path=nocs_rel,
                    azimuth=pose.azimuth,
                    elevation=pose.elevation,
                    distance=pose.distance,
                    fov=pose.fov,
                    resolution=pose.resolution,
                    prompt=prompt,
                )
            )
    return Manifest(tuple(records), split="all", seed=seed, root=root)


def split_manifest(m: Manifest, test_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Split by object id (never by view) with a seeded shuffle."""
    if not (0.0 < test_fraction < 1.0):
        raise InvalidInputError(f"test fraction must be in (0,1), got {test_fraction}")
    ids = m.object_ids()
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(test_fraction * len(ids)))
    if n_test < 1 or n_test >= len(ids):
        raise InvalidInputError(
            f"fraction {test_fraction} leaves an empty split for {len(ids)} objects"
        )
    test_ids = set(order[:n_test])
    train = tuple(r for r in m.records if r.object_id not in test_ids)
    test = tuple(r for r in m.records if r.object_id in test_ids)
    return (
        Manifest(train, split="train", seed=seed, root=m.root),
        Manifest(test, split="test", seed=seed, root=m.root),
    )


def save_manifest(m: Manifest, path) -> None:
    lines = [f"# split={m.split} seed={m.seed}", "\t".join(MANIFEST_COLUMNS)]
    for r in m.records:
        prompt = r.prompt.replace("\t", " ").replace("\n", " ")
        lines.append(
            "\t".join(
                [
                    r.object_id,
                    r.category,
                    str(r.view_index),
                    r.sketch_path,
                    r.nocs_path,
                    repr(r.azimuth),
                    repr(r.elevation),
                    repr(r.distance),
                    repr(r.fov),
                    str(r.resolution),
                    prompt,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# split="):
        raise ParseError(f"{path}: missing manifest header")
    meta = dict(part.split("=", 1) for part in lines[0][2:].split())
    header = tuple(lines[1].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise ParseError(f"{path}: unexpected manifest columns {header}")
    records = []
    for lineno, raw in enumerate(lines[2:], start=3):
        if not raw.strip():
            continue
        cells = raw.split("\t")
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ParseError(f"expected {len(MANIFEST_COLUMNS)} cells, got {len(cells)}", line=lineno)
        try:
            records.append(
                SampleRecord(
                    object_id=cells[0],
                    category=cells[1],
                    view_index=int(cells[2]),
                    sketch_path=cells[3],
                    nocs_path=cells[4],
                    azimuth=float(cells[5]),
                    elevation=float(cells[6]),
                    distance=float(cells[7]),
                    fov=float(cells[8]),
                    resolution=int(cells[9]),
                    prompt=cells[10],
                )
            )
        except ValueError as exc:
            raise ParseError(f"bad record: {exc}", line=lineno) from None
    return Manifest(tuple(records), split=meta.get("split", "all"),
                    seed=int(meta.get("seed", 0)), root=path.parent)


def load_prompt_sidecar(path) -> dict[str, str]:
    """object_id <tab> prompt per line; '#' comments allowed."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError(f"expected 'object_id<TAB>prompt', got {raw!r}", line=lineno)
        object_id, prompt = line.split("\t", 1)
        out[object_id] = prompt
    return out
