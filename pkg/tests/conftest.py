import numpy as np
import pytest

from sketchnocs.geometry import Mesh


def box_mesh(center=(0.5, 0.5, 0.5), size=(1.0, 1.0, 1.0), name="box"):
    """Axis-aligned box as 12 triangles."""
    cx, cy, cz = center
    sx, sy, sz = size
    signs = np.array(
        [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
    )
    verts = np.array([cx, cy, cz]) + signs * np.array([sx, sy, sz]) / 2.0
    # corner order: index bit 2 = x, bit 1 = y, bit 0 = z
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return Mesh(verts.astype(np.float32), np.asarray(faces, np.int32), name)


@pytest.fixture
def unit_cube():
    return box_mesh()
