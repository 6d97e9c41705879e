import numpy as np
import pytest

from sketchnocs.errors import CheckpointError, InvalidInputError
from sketchnocs.dataset import generate_procedural_shapes
from sketchnocs.render import cast_views, extract_sketch, make_view_ring
from sketchnocs.tensor import Tensor
from sketchnocs.viewpoint import (
    ViewpointLabel,
    bin_table_from_ring,
    classify_viewpoint,
    encode_viewpoint,
    fuse_condition,
    init_sve,
    load_sve,
    save_sve,
    train_viewpoint_encoder,
)

RES = 32
ARCH = "00" * 16


def _sketch_set(n_shapes=8, n_views=4, seed=2):
    ring = make_view_ring(n_views, [0.35], seed=seed, resolution=RES)
    samples = []
    for mesh in generate_procedural_shapes("chair", n_shapes, seed=seed):
        for k, pose in enumerate(ring):
            sketch = extract_sketch(cast_views(mesh, pose))
            samples.append((sketch.values, k))
    return samples, ring


@pytest.fixture(scope="module")
def trained_sve():
    samples, ring = _sketch_set()
    w, history = train_viewpoint_encoder(
        samples, n_bins=len(ring), resolution=RES, feature_dim=32,
        arch_hash=ARCH, seed=0, epochs=30, lr=2e-3, batch_size=8,
    )
    return w, history, samples, ring


def test_training_reaches_accuracy(trained_sve):
    _, history, _, _ = trained_sve
    assert history["train_accuracy"] >= 0.95


def test_single_class_rejected():
    samples, _ = _sketch_set(n_shapes=2, n_views=1)
    with pytest.raises(InvalidInputError):
        train_viewpoint_encoder(samples, n_bins=4, resolution=RES, feature_dim=16, arch_hash=ARCH)


def test_conflicting_labels_bound_accuracy():
    samples, _ = _sketch_set(n_shapes=2, n_views=2)
    conflicted = samples + [(samples[0][0], (samples[0][1] + 1) % 2)]
    _, history = train_viewpoint_encoder(
        conflicted, n_bins=2, resolution=RES, feature_dim=16, arch_hash=ARCH,
        seed=1, epochs=15,
    )
    assert history["train_accuracy"] < 1.0


def test_training_deterministic():
    samples, ring = _sketch_set(n_shapes=3, n_views=2)
    kwargs = dict(n_bins=len(ring), resolution=RES, feature_dim=16, arch_hash=ARCH,
                  seed=3, epochs=4)
    w1, _ = train_viewpoint_encoder(samples, **kwargs)
    w2, _ = train_viewpoint_encoder(samples, **kwargs)
    for name in w1.tensors:
        np.testing.assert_array_equal(w1.tensors[name].data, w2.tensors[name].data)


def test_encode_deterministic_and_finite(trained_sve):
    w, _, samples, _ = trained_sve
    f1 = encode_viewpoint(samples[0][0], w)
    f2 = encode_viewpoint(samples[0][0], w)
    np.testing.assert_array_equal(f1, f2)
    assert f1.shape == (32,)
    zero = encode_viewpoint(np.zeros((RES, RES), np.float32), w)
    assert np.all(np.isfinite(zero))


def test_encode_resolution_mismatch(trained_sve):
    w, _, _, _ = trained_sve
    with pytest.raises(InvalidInputError):
        encode_viewpoint(np.zeros((16, 16), np.float32), w)


def test_opposite_views_classified_apart(trained_sve):
    w, _, samples, ring = trained_sve
    n_views = len(ring)
    front = classify_viewpoint(samples[0][0], w)
    back = classify_viewpoint(samples[n_views // 2][0], w)
    assert front != back


def test_relabel_covariance():
    samples, ring = _sketch_set(n_shapes=3, n_views=4)
    n = len(ring)
    perm = [(k + 1) % n for k in range(n)]  # relabel bins by rotation
    relabeled = [(s, perm[label]) for s, label in samples]
    kwargs = dict(n_bins=n, resolution=RES, feature_dim=16, arch_hash=ARCH, seed=5, epochs=5)
    w_a, _ = train_viewpoint_encoder(samples, **kwargs)
    w_b, _ = train_viewpoint_encoder(relabeled, **kwargs)
    from sketchnocs import tensor as tz
    from sketchnocs.viewpoint import sve_forward

    xs = np.stack([s for s, _ in samples])[:, None, :, :]
    with tz.no_recording():
        logits_a, _ = sve_forward(Tensor(xs), w_a)
        logits_b, _ = sve_forward(Tensor(xs), w_b)
    np.testing.assert_allclose(logits_b.data[:, perm], logits_a.data, atol=1e-5)


def test_fuse_condition_vectors():
    out = fuse_condition(np.array([1.0, 2.0], np.float32), np.array([3.0], np.float32))
    np.testing.assert_array_equal(out.data, [1, 2, 3])
    zeros = fuse_condition(np.zeros(2, np.float32), np.array([3.0, 4.0], np.float32))
    np.testing.assert_array_equal(zeros.data[2:], [3, 4])
    wide = fuse_condition(np.zeros(32, np.float32), np.zeros(64, np.float32))
    assert wide.data.shape == (96,)


def test_fuse_condition_lossless_and_batched():
    fv = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    fs = Tensor(np.arange(8, dtype=np.float32).reshape(2, 4) + 10)
    out = fuse_condition(fv, fs)
    np.testing.assert_array_equal(out.data[:, :3], fv.data)
    np.testing.assert_array_equal(out.data[:, 3:], fs.data)
    with pytest.raises(InvalidInputError):
        fuse_condition(fv, Tensor(np.zeros((3, 4), np.float32)))
    with pytest.raises(InvalidInputError):
        fuse_condition(np.zeros(2, np.float32), np.zeros(3, np.float32), d_v=4)


def test_viewpoint_label_validation():
    table = bin_table_from_ring(make_view_ring(4, [0.3], seed=0))
    ViewpointLabel(3, table)
    with pytest.raises(InvalidInputError):
        ViewpointLabel(4, table)


def test_sve_checkpoint_round_trip(tmp_path, trained_sve):
    w, _, samples, _ = trained_sve
    path = tmp_path / "sve.ckpt"
    save_sve(path, w)
    loaded = load_sve(path, expect_arch_hash=ARCH)
    assert loaded.n_bins == w.n_bins and loaded.resolution == w.resolution
    np.testing.assert_array_equal(
        encode_viewpoint(samples[0][0], loaded), encode_viewpoint(samples[0][0], w)
    )
    with pytest.raises(CheckpointError):
        load_sve(path, expect_arch_hash="ff" * 16)
