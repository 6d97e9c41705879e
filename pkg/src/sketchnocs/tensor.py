"""Minimal dense tensors with reverse-mode automatic differentiation.

Every network in this package is assembled from a fixed catalog of
primitives, each with a hand-written backward pass. There is no general
broadcasting: each primitive validates the one shape rule it supports, which
keeps the backward passes small enough to grad-check individually.

Reductions use numpy's pairwise summation, so permuting a reduced axis moves
results only at the level of float rounding.

Tensors are float32 by default. Building a graph from float64 tensors runs
the same primitives in float64, which the gradient checker uses for tight
tolerances.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, InvalidInputError

_ids = itertools.count(1)


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    Treat ``data`` as immutable: primitives allocate fresh arrays and the
    optimizer replaces whole tensors instead of writing in place.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def astype(self, dtype, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.astype(dtype), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("op", "inputs", "out_tid", "ctx")

    def __init__(self, op, inputs, out_tid, ctx):
        self.op = op
        self.inputs = inputs
        self.out_tid = out_tid
        self.ctx = ctx


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_recording():
    """Suppress tape recording inside the block (inference passes)."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


class Gradients:
    """Gradient arrays keyed by the tensors they belong to."""

    def __init__(self, by_id):
        self._by_id = by_id

    def get(self, tensor):
        return self._by_id.get(tensor.tid)

    def __len__(self):
        return len(self._by_id)


class _Primitive:
    __slots__ = ("name", "forward", "backward")

    def __init__(self, name, forward, backward):
        self.name = name
        self.forward = forward
        self.backward = backward


PRIMITIVES: dict[str, _Primitive] = {}


def _register(name: str, forward: Callable, backward: Callable):
    PRIMITIVES[name] = _Primitive(name, forward, backward)


def apply_primitive(op: str, inputs: list[Tensor], params: dict | None = None) -> Tensor:
    """Run one primitive forward and record it on the active tape.

    Recording happens only when some input requires a gradient and a tape is
    active; otherwise this is a plain forward evaluation.
    """
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise InvalidInputError(f"unknown primitive '{op}'")
    params = {} if params is None else params
    out_data, ctx = prim.forward([t.data for t in inputs], params)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        if tape.consumed:
            raise InvalidInputError("tape already consumed by backpropagate")
        tape.entries.append(_TapeEntry(op, tuple(inputs), out.tid, ctx))
        tape._produced.add(out.tid)
    return out


def backpropagate(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over the tape; returns gradients for leaf tensors.

    The tape is consumed: reusing it afterwards is an error.
    """
    if tape.consumed:
        raise InvalidInputError("tape already consumed")
    if loss.size != 1:
        raise InvalidInputError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tid not in tape._produced:
        raise InvalidInputError("loss tensor was not recorded on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {loss.tid: np.ones(loss.data.shape, dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.out_tid, None)
        if g is None:
            continue
        input_grads = PRIMITIVES[entry.op].backward(g, entry.ctx)
        for t, ig in zip(entry.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = grads.get(t.tid)
            grads[t.tid] = ig if acc is None else acc + ig
    return Gradients(grads)


# ---------------------------------------------------------------------------
# primitive catalog


def _shape_err(op, *shapes):
    return InvalidInputError(f"{op} shape mismatch: " + " vs ".join(str(tuple(s)) for s in shapes))


def _conv2d_fwd(inputs, params):
    if len(inputs) not in (2, 3):
        raise InvalidInputError("conv2d expects (input, kernel[, bias])")
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) == 3 else None
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise _shape_err("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_err("conv2d bias", b.shape, (w.shape[0],))
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(o, c * 9).T
    if b is not None:
        out = out + b
    out = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w, b is not None)


def _conv2d_bwd(g, ctx):
    cols, x_shape, w, has_b = ctx
    n, c, h, wd = x_shape
    o = w.shape[0]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wd, o)
    gw = (g2.T @ cols).reshape(o, c, 3, 3)
    gcols = (g2 @ w.reshape(o, c * 9)).reshape(n, h, wd, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
    for ki in range(3):
        for kj in range(3):
            gxp[:, :, ki:ki + h, kj:kj + wd] += gcols[:, :, :, :, ki, kj]
    gx = gxp[:, :, 1:h + 1, 1:wd + 1]
    out = [gx, gw]
    if has_b:
        out.append(g.sum(axis=(0, 2, 3)))
    return out


def _dense_fwd(inputs, params):
    if len(inputs) not in (2, 3):
        raise InvalidInputError("dense expects (input, weight[, bias])")
    x, w = inputs[0], inputs[1]
    b = inputs[2] if len(inputs) == 3 else None
    if x.ndim < 2 or w.ndim != 2:
        raise _shape_err("dense", x.shape, w.shape)
    xf = x.reshape(x.shape[0], -1)
    if xf.shape[1] != w.shape[0]:
        raise _shape_err("dense", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise _shape_err("dense bias", b.shape, (w.shape[1],))
    out = xf @ w
    if b is not None:
        out = out + b
    return out, (xf, x.shape, w, b is not None)


def _dense_bwd(g, ctx):
    xf, x_shape, w, has_b = ctx
    gx = (g @ w.T).reshape(x_shape)
    gw = xf.T @ g
    out = [gx, gw]
    if has_b:
        out.append(g.sum(axis=0))
    return out


def _relu_fwd(inputs, params):
    (x,) = inputs
    return np.maximum(x, 0), (x > 0)


def _relu_bwd(g, ctx):
    return [g * ctx]


def _sigmoid(x):
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return s


def _silu_fwd(inputs, params):
    (x,) = inputs
    s = _sigmoid(x)
    return x * s, (x, s)


def _silu_bwd(g, ctx):
    x, s = ctx
    return [g * (s * (1.0 + x * (1.0 - s)))]


def _add_fwd(inputs, params):
    a, b = inputs
    if b.shape == a.shape:
        return a + b, (None, None)
    # bias-style rule: the right operand may match a leading prefix of the
    # left shape and is broadcast over the remaining trailing axes
    if b.ndim < a.ndim and b.shape == a.shape[: b.ndim]:
        reduce_axes = tuple(range(b.ndim, a.ndim))
        return a + b.reshape(b.shape + (1,) * (a.ndim - b.ndim)), (b.shape, reduce_axes)
    raise _shape_err("add", a.shape, b.shape)


def _add_bwd(g, ctx):
    b_shape, reduce_axes = ctx
    if reduce_axes is None:
        return [g, g]
    return [g, g.sum(axis=reduce_axes)]


def _mul_scalar_fwd(inputs, params):
    (x,) = inputs
    if "scalar" not in params:
        raise InvalidInputError("mul_scalar requires params['scalar']")
    s = float(params["scalar"])
    return x * np.asarray(s, dtype=x.dtype), s


def _mul_scalar_bwd(g, ctx):
    return [g * np.asarray(ctx, dtype=g.dtype)]


def _concat_fwd(inputs, params):
    if len(inputs) < 2:
        raise InvalidInputError("concat expects at least two inputs")
    first = inputs[0]
    if first.ndim < 2:
        raise _shape_err("concat", first.shape)
    for x in inputs[1:]:
        if x.ndim != first.ndim or x.shape[:1] != first.shape[:1] or x.shape[2:] != first.shape[2:]:
            raise _shape_err("concat", first.shape, x.shape)
    sizes = [x.shape[1] for x in inputs]
    return np.concatenate(inputs, axis=1), sizes


def _concat_bwd(g, ctx):
    sizes = ctx
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=1))


def _mean_axis_fwd(inputs, params):
    (x,) = inputs
    if "axis" not in params:
        raise InvalidInputError("mean_axis requires params['axis']")
    axis = int(params["axis"])
    if not (0 <= axis < x.ndim):
        raise InvalidInputError(f"mean_axis axis {axis} out of range for shape {x.shape}")
    # accumulate in float64 so reordering the reduced axis cannot move the result
    out = x.mean(axis=axis, dtype=np.float64).astype(x.dtype)
    return out, (axis, x.shape[axis])


def _mean_axis_bwd(g, ctx):
    axis, n = ctx
    ge = np.expand_dims(g, axis)
    reps = [1] * ge.ndim
    reps[axis] = n
    return [np.tile(ge, reps) / n]


def _down2x_fwd(inputs, params):
    (x,) = inputs
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise _shape_err("downsample2x", x.shape)
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out, None


def _down2x_bwd(g, ctx):
    return [np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)]


def _up2x_fwd(inputs, params):
    (x,) = inputs
    if x.ndim != 4:
        raise _shape_err("upsample2x", x.shape)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), None


def _up2x_bwd(g, ctx):
    n, c, h2, w2 = g.shape
    return [g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))]


def _gms_fwd(inputs, params):
    (x,) = inputs
    if x.ndim < 1 or x.shape[0] < 1:
        raise _shape_err("group_mean_subtract", x.shape)
    mean = x.mean(axis=0, keepdims=True, dtype=np.float64).astype(x.dtype)
    return x - mean, None


def _gms_bwd(g, ctx):
    mean = g.mean(axis=0, keepdims=True, dtype=np.float64).astype(g.dtype)
    return [g - mean]


def _mse_fwd(inputs, params):
    a, b = inputs
    if a.shape != b.shape:
        raise _shape_err("mse", a.shape, b.shape)
    diff = a - b
    return np.asarray((diff * diff).mean(), dtype=a.dtype), (diff, diff.size)


def _mse_bwd(g, ctx):
    diff, n = ctx
    ga = g * (2.0 / n) * diff
    return [ga, -ga]


def _l1_fwd(inputs, params):
    a, b = inputs
    if a.shape != b.shape:
        raise _shape_err("l1", a.shape, b.shape)
    diff = a - b
    return np.asarray(np.abs(diff).mean(), dtype=a.dtype), (np.sign(diff), diff.size)


def _l1_bwd(g, ctx):
    sign, n = ctx
    ga = g * sign / n
    return [ga, -ga]


def _layer_norm_fwd(inputs, params):
    (x,) = inputs
    if x.ndim < 2:
        raise _shape_err("layer_norm", x.shape)
    eps = float(params.get("eps", 1e-5))
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((x - mu) * inv).astype(x.dtype)
    return y, (y, inv.astype(x.dtype), int(np.prod(x.shape[1:])))


def _layer_norm_bwd(g, ctx):
    y, inv, n = ctx
    axes = tuple(range(1, g.ndim))
    g_mean = g.mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    gy_mean = (g * y).mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return [inv * (g - g_mean - y * gy_mean)]


def _sce_fwd(inputs, params):
    (logits,) = inputs
    labels = np.asarray(params.get("labels"))
    if logits.ndim != 2:
        raise _shape_err("softmax_cross_entropy", logits.shape)
    if labels.shape != (logits.shape[0],):
        raise _shape_err("softmax_cross_entropy labels", labels.shape, (logits.shape[0],))
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidInputError("softmax_cross_entropy label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = (lse - z[np.arange(n), labels]).mean()
    p = np.exp(z - lse[:, None])
    return np.asarray(loss, dtype=logits.dtype), (p, labels)


def _sce_bwd(g, ctx):
    p, labels = ctx
    n = p.shape[0]
    gl = p.copy()
    gl[np.arange(n), labels] -= 1.0
    return [g * gl / n]


_register("conv2d", _conv2d_fwd, _conv2d_bwd)
_register("dense", _dense_fwd, _dense_bwd)
_register("relu", _relu_fwd, _relu_bwd)
_register("silu", _silu_fwd, _silu_bwd)
_register("add", _add_fwd, _add_bwd)
_register("mul_scalar", _mul_scalar_fwd, _mul_scalar_bwd)
_register("concat", _concat_fwd, _concat_bwd)
_register("mean_axis", _mean_axis_fwd, _mean_axis_bwd)
_register("downsample2x", _down2x_fwd, _down2x_bwd)
_register("upsample2x", _up2x_fwd, _up2x_bwd)
_register("group_mean_subtract", _gms_fwd, _gms_bwd)
_register("layer_norm", _layer_norm_fwd, _layer_norm_bwd)
_register("mse", _mse_fwd, _mse_bwd)
_register("l1", _l1_fwd, _l1_bwd)
_register("softmax_cross_entropy", _sce_fwd, _sce_bwd)


# convenience wrappers

def conv2d(x, w, b=None):
    return apply_primitive("conv2d", [x, w] + ([b] if b is not None else []))


def dense(x, w, b=None):
    return apply_primitive("dense", [x, w] + ([b] if b is not None else []))


def relu(x):
    return apply_primitive("relu", [x])


def silu(x):
    return apply_primitive("silu", [x])


def add(a, b):
    return apply_primitive("add", [a, b])


def mul_scalar(x, s):
    return apply_primitive("mul_scalar", [x], {"scalar": s})


def concat(tensors):
    return apply_primitive("concat", list(tensors))


def mean_axis(x, axis):
    return apply_primitive("mean_axis", [x], {"axis": axis})


def downsample2x(x):
    return apply_primitive("downsample2x", [x])


def upsample2x(x):
    return apply_primitive("upsample2x", [x])


def group_mean_subtract(x):
    return apply_primitive("group_mean_subtract", [x])


def layer_norm(x, eps=1e-5):
    """Normalize each index-0 slice to zero mean, unit variance over all
    remaining axes. Keeps deep stacks trainable; any following conv or dense
    layer absorbs scale and shift."""
    return apply_primitive("layer_norm", [x], {"eps": eps})


def mse(a, b):
    return apply_primitive("mse", [a, b])


def l1(a, b):
    return apply_primitive("l1", [a, b])


def softmax_cross_entropy(logits, labels):
    return apply_primitive("softmax_cross_entropy", [logits], {"labels": labels})


def grad_check(f, x: Tensor, eps: float = 1e-3, coords=None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps one tensor to a scalar Tensor and must be deterministic.
    Perturbs every coordinate of ``x`` by default; pass ``coords`` (flat
    indices) to spot-check large tensors. Returns the max over checked
    coordinates of ``|g_ad - g_fd| / max(1e-6, |g_ad| + |g_fd|)``.

    The reverse-mode side runs at the dtype of ``x``; the finite-difference
    side evaluates in float64 so the comparison measures the recorded
    backward pass instead of float32 subtraction cancellation.

    Kinked inputs (relu at exactly 0) are a known failure mode of the finite
    difference side; nudge inputs away from kinks before calling.
    """
    if not (1e-4 <= eps <= 1e-2):
        raise InvalidInputError(f"eps must be in [1e-4, 1e-2], got {eps}")
    xg = Tensor(np.array(x.data, copy=True), requires_grad=True)
    tape = Tape()
    with tape:
        out = f(xg)
    if out.size != 1:
        raise InvalidInputError("grad_check target must be scalar-valued")
    g = backpropagate(tape, out).get(xg)
    g_ad = np.zeros_like(xg.data) if g is None else g
    flat = x.data.astype(np.float64).reshape(-1)
    indices = range(flat.size) if coords is None else coords
    shape = x.data.shape
    worst = 0.0
    for i in indices:
        saved = flat[i]
        flat[i] = saved + eps
        lp = f(Tensor(flat.reshape(shape))).item()
        flat[i] = saved - eps
        lm = f(Tensor(flat.reshape(shape))).item()
        flat[i] = saved
        fd = (lp - lm) / (2.0 * eps)
        ad = float(g_ad.reshape(-1)[i])
        err = abs(ad - fd) / max(1e-6, abs(ad) + abs(fd))
        worst = max(worst, err)
    return worst


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    ``step`` returns a new parameter dict; tensors are replaced, never
    mutated. Moments are tracked per parameter name so state survives a
    checkpoint round trip.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: Gradients) -> dict[str, Tensor]:
        out = dict(params)
        for name in sorted(params):
            p = params[name]
            g = grads.get(p)
            if g is None:
                continue
            g = g.astype(np.float32, copy=False)
            t = self._t.get(name, 0) + 1
            self._t[name] = t
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            new = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            out[name] = Tensor(new.astype(p.dtype, copy=False), requires_grad=True)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for name, m in self._m.items():
            state[f"opt.m.{name}"] = m
            state[f"opt.v.{name}"] = self._v[name]
            state[f"opt.t.{name}"] = np.asarray([self._t[name]], dtype=np.float32)
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self._m[key[6:]] = arr.copy()
            elif key.startswith("opt.v."):
                self._v[key[6:]] = arr.copy()
            elif key.startswith("opt.t."):
                self._t[key[6:]] = int(arr.reshape(-1)[0])


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then a sorted named tensor table of
# (name, shape, float32 little-endian data)

CHECKPOINT_MAGIC = b"TCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    items = []
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        items.append((name, arr))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out
