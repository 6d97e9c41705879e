"""File formats for rasters.

NMAP is the lossless float32 container for NOCS data (8-bit images would
destroy the sub-millimeter round trip): magic "NMAP", version, width,
height, channel count (3 for a single layer, 6 for a visible+occluded
frame), a mask flag, the float32 little-endian payload in row-major
channel-last order, then an optional packed mask bitplane.

PGM/PPM writers produce 8-bit previews for human inspection; PGM doubles as
the storage format for binary sketches, where 8 bits are lossless.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError
from .geometry import NocsFrame, NocsMap

NMAP_MAGIC = b"NMAP"
NMAP_VERSION = 1


def save_raster(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 3 or values.shape[2] not in (3, 6):
        raise ParseError(f"raster must be [H,W,3] or [H,W,6], got {values.shape}")
    h, w, c = values.shape
    with open(path, "wb") as f:
        f.write(NMAP_MAGIC)
        f.write(struct.pack("<HIIBB", NMAP_VERSION, w, h, c, 1 if mask is not None else 0))
        f.write(values.tobytes(order="C"))
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            if m.shape != (h, w):
                raise ParseError(f"mask shape {m.shape} does not match raster {h}x{w}")
            f.write(np.packbits(m.reshape(-1)).tobytes())


def load_raster(path):
    """Returns (values [H,W,C] float32, mask [H,W] bool or None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != NMAP_MAGIC:
        raise ParseError(f"{path}: not an NMAP raster (bad magic)")
    version, w, h, c, has_mask = struct.unpack_from("<HIIBB", blob, 4)
    if version != NMAP_VERSION:
        raise ParseError(f"{path}: unsupported NMAP version {version}")
    if c not in (3, 6):
        raise ParseError(f"{path}: channel count must be 3 or 6, got {c}")
    off = 4 + 12
    n = h * w * c
    if len(blob) < off + 4 * n:
        raise ParseError(f"{path}: truncated payload")
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(h, w, c).astype(np.float32)
    off += 4 * n
    mask = None
    if has_mask:
        nbytes = (h * w + 7) // 8
        if len(blob) < off + nbytes:
            raise ParseError(f"{path}: truncated mask bitplane")
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off))
        mask = bits[: h * w].reshape(h, w).astype(bool)
        off += nbytes
    if off != len(blob):
        raise ParseError(f"{path}: trailing bytes")
    return values, mask


def save_nocs_frame(path, frame: NocsFrame) -> None:
    stacked = np.concatenate([frame.visible.values, frame.occluded.values], axis=2)
    save_raster(path, stacked, frame.mask)


def load_nocs_frame(path) -> NocsFrame:
    values, mask = load_raster(path)
    if values.shape[2] != 6:
        raise ParseError(f"{path}: expected a 6-channel frame, got {values.shape[2]} channels")
    if mask is None:
        raise ParseError(f"{path}: frame raster is missing its mask")
    return NocsFrame(NocsMap(values[:, :, :3], mask), NocsMap(values[:, :, 3:], mask))


def save_nocs_map(path, m: NocsMap) -> None:
    save_raster(path, m.values, m.mask)


def load_nocs_map(path) -> NocsMap:
    values, mask = load_raster(path)
    if values.shape[2] != 3:
        raise ParseError(f"{path}: expected a 3-channel map, got {values.shape[2]} channels")
    if mask is None:
        raise ParseError(f"{path}: map raster is missing its mask")
    return NocsMap(values, mask)


def save_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM; input values in [0,1], 1 = stroke = white."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ParseError(f"PGM wants a 2-D image, got {v.shape}")
    data = np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    if len(blob) - pos < w * h:
        raise ParseError(f"{path}: truncated PGM payload")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (data.astype(np.float32) / 255.0).astype(np.float32)


def save_ppm(path, rgb: np.ndarray) -> None:
    """8-bit color preview; input values in [0,1]."""
    v = np.asarray(rgb, dtype=np.float64)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ParseError(f"PPM wants [H,W,3], got {v.shape}")
    data = np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes(order="C"))
