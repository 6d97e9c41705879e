"""Gradient verification harness shared by the CLI and the test suite.

Checks every primitive in the catalog against central differences at both
float32 and float64, then drives the full denoiser at a small resolution,
checking the input and a sampled set of coordinates from every parameter.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .diffusion import DenoiserSpec, build_condition, init_denoiser, predict_noise
from .tensor import PRIMITIVES, Tensor, grad_check

TOLERANCES = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}


def _eps_for(dtype):
    # float64 can afford a smaller step, which keeps finite-difference
    # truncation through deep compositions under the 1e-5 tolerance
    return 1e-4 if np.dtype(dtype) == np.float64 else 1e-3


def _mse_to_zero(out_shape, dtype):
    target = Tensor(np.zeros(out_shape, dtype))
    return lambda out: tz.mse(out, target)


def check_all_primitives(dtype) -> dict[str, float]:
    """Max relative error per primitive; every catalog entry is exercised."""
    dtype = np.dtype(dtype).type
    rng = np.random.default_rng(2024)

    def randn(shape, scale=1.0):
        a = rng.standard_normal(shape) * scale
        a = a + 0.05 * np.sign(a) + 0.01  # keep relu/l1 kinks off zero
        return Tensor(a.astype(dtype))

    x4 = randn((2, 3, 4, 4))
    w4 = randn((5, 3, 3, 3), 0.4)
    b4 = randn((5,))
    xd = randn((3, 6))
    wd = randn((6, 4), 0.4)
    bd = randn((4,))
    xr = randn((4, 5))
    xp = randn((2, 2, 4, 4))
    prefix = randn((2, 3))
    m2 = randn((3, 4))
    ln_target = randn((2, 2, 4, 4))
    mse_x = randn((3, 4))
    l1_x = randn((3, 4))
    logits = randn((5, 3))
    labels = np.array([0, 2, 1, 2, 0])

    cases = {
        "conv2d": (lambda t: tz.mse(tz.conv2d(t, w4, b4), Tensor(np.zeros((2, 5, 4, 4), dtype))), x4),
        "dense": (lambda t: tz.mse(tz.dense(xd, t, bd), Tensor(np.zeros((3, 4), dtype))), wd),
        "relu": (lambda t: tz.mse(tz.relu(t), Tensor(np.zeros((4, 5), dtype))), xr),
        "silu": (lambda t: tz.mse(tz.silu(t), Tensor(np.zeros((4, 5), dtype))), xr),
        "add": (lambda t: tz.mse(tz.add(x4, t), Tensor(np.zeros((2, 3, 4, 4), dtype))), prefix),
        "mul_scalar": (lambda t: tz.mse(tz.mul_scalar(t, -1.7), Tensor(np.zeros((4, 5), dtype))), xr),
        "concat": (lambda t: tz.mse(tz.concat([t, xp]), Tensor(np.zeros((2, 4, 4, 4), dtype))), xp),
        "mean_axis": (lambda t: tz.mse(tz.mean_axis(t, 1), Tensor(np.zeros((2, 4, 4), dtype))), x4),
        "downsample2x": (lambda t: tz.mse(tz.downsample2x(t), Tensor(np.zeros((2, 2, 2, 2), dtype))), xp),
        "upsample2x": (lambda t: tz.mse(tz.upsample2x(t), Tensor(np.zeros((2, 2, 8, 8), dtype))), xp),
        "group_mean_subtract": (
            lambda t: tz.mse(tz.group_mean_subtract(t), Tensor(np.zeros((2, 2, 4, 4), dtype))), xp),
        "layer_norm": (lambda t: tz.mse(tz.layer_norm(t), ln_target), xp),
        "mse": (lambda t: tz.mse(t, m2), mse_x),
        "l1": (lambda t: tz.l1(t, m2), l1_x),
        "softmax_cross_entropy": (lambda t: tz.softmax_cross_entropy(t, labels), logits),
    }
    missing = set(PRIMITIVES) - set(cases)
    if missing:
        raise AssertionError(f"gradcheck suite does not cover: {sorted(missing)}")
    eps = _eps_for(dtype)
    return {name: grad_check(f, x, eps=eps) for name, (f, x) in cases.items()}


def check_denoiser(dtype, res: int = 8, n_views: int = 2, coords_per_param: int = 6) -> dict[str, float]:
    """Drive the full denoiser block as one differentiable program.

    The raster input is checked over every coordinate; each parameter tensor
    is checked over a seeded sample of coordinates (a full per-coordinate
    sweep of every parameter would take hours, not minutes).
    """
    dtype = np.dtype(dtype).type
    spec = DenoiserSpec(base_width=8, time_dim=8, viewpoint_dim=4, shape_dim=8,
                        prompt_dim=8, prompt_vocab=16)
    w = init_denoiser(spec, arch_hash="", seed=3)
    rng = np.random.default_rng(2025)
    tensors = {
        name: Tensor((rng.standard_normal(t.shape) * 0.3).astype(dtype),
                     requires_grad=t.requires_grad)
        for name, t in w.tensors.items()
    }
    w = w.replaced(tensors)
    z = Tensor(rng.standard_normal((n_views, 6, res, res)).astype(dtype))
    sketches = (rng.random((n_views, res, res)) > 0.7).astype(dtype)
    f_v = rng.standard_normal((n_views, spec.viewpoint_dim)).astype(dtype)
    target = Tensor(np.zeros((n_views, 6, res, res), dtype))

    def loss_wrt_input(t):
        cond = build_condition(sketches, w, "a chair", f_v=f_v)
        return tz.mse(predict_noise(t, 3, cond, w), target)

    eps = _eps_for(dtype)
    results = {"denoiser:input": grad_check(loss_wrt_input, z, eps=eps)}

    def loss_wrt(name):
        def f(param):
            w2 = w.replaced({name: param})
            cond = build_condition(sketches, w2, "a chair", f_v=f_v)
            return tz.mse(predict_noise(z, 3, cond, w2), target)
        return f

    coord_rng = np.random.default_rng(77)
    for name in sorted(w.tensors):
        if name.startswith("phi."):
            continue
        t = w.tensors[name]
        n = min(coords_per_param, t.size)
        coords = sorted(coord_rng.choice(t.size, size=n, replace=False).tolist())
        results[f"denoiser:{name}"] = grad_check(loss_wrt(name), t, eps=eps, coords=coords)
    return results
