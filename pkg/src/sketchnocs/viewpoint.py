"""Sketch viewpoint encoder: a small CNN classifier over view-ring bins.

The penultimate activation is the viewpoint feature fed to the generator.
Three conv-relu-downsample blocks and a dense head stand in for a large
pretrained backbone; capacity is all that changes at desk scale, not the
role. The classifier head is zero-initialized, which makes training exactly
covariant under relabeling the bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import CheckpointError, InvalidInputError
from .render import SketchImage, ViewPose
from .tensor import Adam, Tape, Tensor, backpropagate, load_checkpoint, save_checkpoint

_CHANNELS = (8, 16, 32)


@dataclass(frozen=True)
class ViewpointLabel:
    """Bin index plus the (azimuth, elevation) centers it indexes into."""

    bin: int
    table: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not (0 <= self.bin < len(self.table)):
            raise InvalidInputError(f"bin {self.bin} outside table of {len(self.table)}")


def bin_table_from_ring(ring: list[ViewPose]) -> tuple[tuple[float, float], ...]:
    return tuple((p.azimuth, p.elevation) for p in ring)


@dataclass
class SveWeights:
    tensors: dict[str, Tensor]
    n_bins: int
    feature_dim: int
    resolution: int
    arch_hash: str


def _hash_to_floats(hex_hash: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(hex_hash), dtype=np.uint8).astype(np.float32)


def _floats_to_hash(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8)).hex()


def _he(rng, shape, fan_in):
    return Tensor(
        (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32),
        requires_grad=True,
    )


def _zeros(shape):
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


def init_sve(resolution: int, feature_dim: int, n_bins: int, arch_hash: str, seed: int) -> SveWeights:
    if resolution % 8 != 0:
        raise InvalidInputError(f"sketch resolution must be divisible by 8, got {resolution}")
    rng = np.random.default_rng([seed, 0x53_56_45])
    c1, c2, c3 = _CHANNELS
    flat = c3 * (resolution // 8) ** 2
    tensors = {
        "conv1.w": _he(rng, (c1, 1, 3, 3), 9),
        "conv1.b": _zeros((c1,)),
        "conv2.w": _he(rng, (c2, c1, 3, 3), c1 * 9),
        "conv2.b": _zeros((c2,)),
        "conv3.w": _he(rng, (c3, c2, 3, 3), c2 * 9),
        "conv3.b": _zeros((c3,)),
        "fc.w": _he(rng, (flat, feature_dim), flat),
        "fc.b": _zeros((feature_dim,)),
        # zero head: per-class rows start identical, so relabeled training
        # reproduces relabeled logits exactly
        "head.w": _zeros((feature_dim, n_bins)),
        "head.b": _zeros((n_bins,)),
    }
    return SveWeights(tensors, n_bins, feature_dim, resolution, arch_hash)


def sve_forward(x: Tensor, w: SveWeights) -> tuple[Tensor, Tensor]:
    """Batched forward: x is [N,1,H,W]; returns (logits [N,bins], features [N,D_v])."""
    t = w.tensors
    h = tz.downsample2x(tz.relu(tz.conv2d(x, t["conv1.w"], t["conv1.b"])))
    h = tz.downsample2x(tz.relu(tz.conv2d(h, t["conv2.w"], t["conv2.b"])))
    h = tz.downsample2x(tz.relu(tz.conv2d(h, t["conv3.w"], t["conv3.b"])))
    feats = tz.relu(tz.dense(h, t["fc.w"], t["fc.b"]))
    logits = tz.dense(feats, t["head.w"], t["head.b"])
    return logits, feats


def _as_batch(sketch) -> np.ndarray:
    values = sketch.values if isinstance(sketch, SketchImage) else np.asarray(sketch, np.float32)
    if values.ndim != 2:
        raise InvalidInputError(f"sketch must be 2-D, got {values.shape}")
    return values[None, None, :, :].astype(np.float32)


def encode_viewpoint(sketch, w: SveWeights) -> np.ndarray:
    """Viewpoint feature f_v for one sketch; pure function of (sketch, weights)."""
    batch = _as_batch(sketch)
    if batch.shape[2] != w.resolution or batch.shape[3] != w.resolution:
        raise InvalidInputError(
            f"sketch resolution {batch.shape[2:]} does not match encoder resolution {w.resolution}"
        )
    with tz.no_recording():
        _, feats = sve_forward(Tensor(batch), w)
    return feats.data[0].copy()


def classify_viewpoint(sketch, w: SveWeights) -> int:
    batch = _as_batch(sketch)
    with tz.no_recording():
        logits, _ = sve_forward(Tensor(batch), w)
    return int(np.argmax(logits.data[0]))


def fuse_condition(f_v, f_s, d_v: int | None = None, d_s: int | None = None):
    """Concatenate viewpoint and shape features: lossless, [f_v ; f_s].

    Accepts per-view 2-D tensors (gradients flow through the concat) or
    plain 1-D vectors.
    """
    fv_arr = f_v.data if isinstance(f_v, Tensor) else np.asarray(f_v, np.float32)
    fs_arr = f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s, np.float32)
    if d_v is not None and fv_arr.shape[-1] != d_v:
        raise InvalidInputError(f"viewpoint feature width {fv_arr.shape[-1]} != configured {d_v}")
    if d_s is not None and fs_arr.shape[-1] != d_s:
        raise InvalidInputError(f"shape feature width {fs_arr.shape[-1]} != configured {d_s}")
    if fv_arr.ndim != fs_arr.ndim:
        raise InvalidInputError(f"feature rank mismatch: {fv_arr.shape} vs {fs_arr.shape}")
    if fv_arr.ndim == 1:
        return Tensor(np.concatenate([fv_arr, fs_arr]))
    if fv_arr.shape[0] != fs_arr.shape[0]:
        raise InvalidInputError(f"per-view counts differ: {fv_arr.shape} vs {fs_arr.shape}")
    a = f_v if isinstance(f_v, Tensor) else Tensor(fv_arr)
    b = f_s if isinstance(f_s, Tensor) else Tensor(fs_arr)
    return tz.concat([a, b])


def train_viewpoint_encoder(
    samples: list[tuple[np.ndarray, int]],
    n_bins: int,
    resolution: int,
    feature_dim: int,
    arch_hash: str,
    seed: int = 0,
    epochs: int = 40,
    lr: float = 1e-3,
    batch_size: int = 16,
    val_samples: list[tuple[np.ndarray, int]] | None = None,
    init: SveWeights | None = None,
) -> tuple[SveWeights, dict]:
    """Train the classifier with softmax cross-entropy; deterministic per seed."""
    if not samples:
        raise InvalidInputError("empty training set")
    labels = sorted(set(label for _, label in samples))
    if len(labels) < 2:
        raise InvalidInputError("need at least two distinct viewpoint classes")
    if max(labels) >= n_bins or min(labels) < 0:
        raise InvalidInputError(f"labels outside [0, {n_bins})")
    w = init if init is not None else init_sve(resolution, feature_dim, n_bins, arch_hash, seed)
    xs = np.stack([np.asarray(s, np.float32) for s, _ in samples])[:, None, :, :]
    ys = np.asarray([label for _, label in samples], dtype=np.int64)
    opt = Adam(lr=lr)
    params = w.tensors
    history = {"loss": [], "train_accuracy": None, "val_accuracy": None}
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xE0, epoch])
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(samples), batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            with tape:
                logits, _ = sve_forward(Tensor(xs[idx]), SveWeights(params, n_bins, feature_dim, resolution, arch_hash))
                loss = tz.softmax_cross_entropy(logits, ys[idx])
            grads = backpropagate(tape, loss)
            params = opt.step(params, grads)
            total += loss.item() * len(idx)
        history["loss"].append(total / len(samples))
    out = SveWeights(params, n_bins, feature_dim, resolution, arch_hash)
    history["train_accuracy"] = _accuracy(xs, ys, out)
    if val_samples:
        vx = np.stack([np.asarray(s, np.float32) for s, _ in val_samples])[:, None, :, :]
        vy = np.asarray([label for _, label in val_samples], dtype=np.int64)
        history["val_accuracy"] = _accuracy(vx, vy, out)
    return out, history


def _accuracy(xs, ys, w: SveWeights) -> float:
    with tz.no_recording():
        logits, _ = sve_forward(Tensor(xs), w)
    return float((np.argmax(logits.data, axis=1) == ys).mean())


def save_sve(path, w: SveWeights) -> None:
    table = dict(w.tensors)
    table["meta.n_bins"] = np.asarray([w.n_bins], np.float32)
    table["meta.feature_dim"] = np.asarray([w.feature_dim], np.float32)
    table["meta.resolution"] = np.asarray([w.resolution], np.float32)
    table["meta.arch_hash"] = _hash_to_floats(w.arch_hash)
    save_checkpoint(path, table)


def load_sve(path, expect_arch_hash: str | None = None) -> SveWeights:
    table = load_checkpoint(path)
    try:
        n_bins = int(table.pop("meta.n_bins")[0])
        feature_dim = int(table.pop("meta.feature_dim")[0])
        resolution = int(table.pop("meta.resolution")[0])
        arch_hash = _floats_to_hash(table.pop("meta.arch_hash"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata entry {exc}") from None
    if expect_arch_hash is not None and arch_hash != expect_arch_hash:
        raise CheckpointError(
            f"{path}: checkpoint architecture {arch_hash[:8]}... does not match configuration "
            f"{expect_arch_hash[:8]}..."
        )
    tensors = {name: Tensor(arr, requires_grad=True) for name, arr in table.items()}
    return SveWeights(tensors, n_bins, feature_dim, resolution, arch_hash)
