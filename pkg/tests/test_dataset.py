import hashlib

import numpy as np
import pytest

from sketchnocs.errors import InvalidInputError, ParseError
from sketchnocs.dataset import (
    build_dataset,
    generate_procedural_shapes,
    load_manifest,
    load_prompt_sidecar,
    parse_obj,
    save_manifest,
    split_manifest,
)
from sketchnocs.geometry import nocs_map_to_points, normalize_mesh, points_mesh_distance
from sketchnocs.rasters import load_nocs_frame, load_pgm
from sketchnocs.render import make_view_ring


def test_procedural_deterministic():
    a = generate_procedural_shapes("chair", 1, 7)[0]
    b = generate_procedural_shapes("chair", 1, 7)[0]
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


@pytest.mark.parametrize("category", ["chair", "car", "airplane"])
def test_procedural_normalized_and_valid(category):
    for mesh in generate_procedural_shapes(category, 3, seed=11):
        again = normalize_mesh(mesh)
        np.testing.assert_array_equal(again.vertices, mesh.vertices)
        assert mesh.vertices.min() >= -1e-6 and mesh.vertices.max() <= 1 + 1e-6


def test_procedural_distinct_shapes():
    meshes = generate_procedural_shapes("car", 8, seed=3)
    digests = {hashlib.sha1(m.vertices.tobytes()).hexdigest() for m in meshes}
    assert len(digests) == 8


def test_procedural_unknown_category():
    with pytest.raises(InvalidInputError):
        generate_procedural_shapes("boat", 1, 0)


def test_parse_obj_minimal():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert mesh.n_vertices == 3 and mesh.n_faces == 1


def test_parse_obj_quad_fan():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])


def test_parse_obj_negative_and_slash_indices():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2/2/2 -1/3/3\n")
    np.testing.assert_array_equal(mesh.faces, [[0, 1, 2]])


def test_parse_obj_index_out_of_range_names_line():
    with pytest.raises(ParseError) as err:
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    assert "line 4" in str(err.value)


def test_parse_obj_malformed_vertex():
    with pytest.raises(ParseError) as err:
        parse_obj("v 0 zero 0\nf 1 1 1\n")
    assert "line 1" in str(err.value)


def test_parse_obj_ignores_extras():
    text = "mtllib x.mtl\no thing\nv 0 0 0\nvn 0 0 1\nvt 0 0\nv 1 0 0\nv 0 1 0\ns off\nf 1/1/1 2/2/1 3/3/1\n"
    mesh = parse_obj(text)
    assert mesh.name == "thing" and mesh.n_faces == 1


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    meshes = generate_procedural_shapes("chair", 2, seed=5)
    items = [(m.name, "chair", m) for m in meshes]
    ring = make_view_ring(4, [0.3], seed=5, resolution=32)
    manifest = build_dataset(items, ring, None, out, seed=5)
    return out, manifest


def test_build_dataset_counts_and_files(small_dataset):
    out, manifest = small_dataset
    assert len(manifest.records) == 8  # 2 meshes x 4 views
    for r in manifest.records:
        assert (out / r.sketch_path).exists()
        assert (out / r.nocs_path).exists()
        assert r.prompt == "chair"


def test_build_dataset_rasters_decode_to_surface(small_dataset):
    out, manifest = small_dataset
    meshes = {m.name: m for m in generate_procedural_shapes("chair", 2, seed=5)}
    r = manifest.records[3]
    frame = load_nocs_frame(out / r.nocs_path)
    cloud = nocs_map_to_points(frame)
    assert points_mesh_distance(cloud.points, meshes[r.object_id]).max() < 1e-4
    sketch = load_pgm(out / r.sketch_path)
    assert set(np.unique(sketch)) <= {0.0, 1.0}


def test_manifest_round_trip_and_determinism(small_dataset, tmp_path):
    out, manifest = small_dataset
    p1 = tmp_path / "m1.tsv"
    p2 = tmp_path / "m2.tsv"
    save_manifest(manifest, p1)
    save_manifest(manifest, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_manifest(p1)
    assert loaded.records == manifest.records
    assert loaded.seed == manifest.seed and loaded.split == manifest.split


def test_split_by_object_no_leakage():
    records = []
    meshes = generate_procedural_shapes("car", 10, seed=1)
    items = [(m.name, "car", m) for m in meshes]
    ring = make_view_ring(2, [0.2], seed=1, resolution=32)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        manifest = build_dataset(items, ring, None, tmp, seed=1)
        train, test = split_manifest(manifest, 0.2, seed=9)
        train_ids = set(r.object_id for r in train.records)
        test_ids = set(r.object_id for r in test.records)
        assert len(test_ids) == 2 and len(train_ids) == 8
        assert not (train_ids & test_ids)
        again = split_manifest(manifest, 0.2, seed=9)
        assert again[0].records == train.records
        with pytest.raises(InvalidInputError):
            split_manifest(manifest, 0.01, seed=0)


def test_prompt_sidecar(tmp_path):
    p = tmp_path / "prompts.tsv"
    p.write_text("# comment\nchair_000\ta tall wooden chair\n")
    prompts = load_prompt_sidecar(p)
    assert prompts == {"chair_000": "a tall wooden chair"}
    bad = tmp_path / "bad.tsv"
    bad.write_text("chair_000 no tab here\n")
    with pytest.raises(ParseError):
        load_prompt_sidecar(bad)
