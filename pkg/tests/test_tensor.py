import numpy as np
import pytest

from sketchnocs import tensor as tz
from sketchnocs.errors import CheckpointError, InvalidInputError
from sketchnocs.tensor import (
    Adam,
    Tape,
    Tensor,
    apply_primitive,
    backpropagate,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)


def _randn(rng, shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


def test_relu_forward():
    out = tz.relu(Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_mean_axis_identical_views():
    rng = np.random.default_rng(0)
    x = _randn(rng, (3, 4))
    stack = Tensor(np.stack([x, x, x, x, x]))
    out = tz.mean_axis(stack, 0)
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = Tensor(_randn(rng, (1, 2, 5, 5)))
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    out = tz.conv2d(x, Tensor(w))
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_add_prefix_broadcast():
    a = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
    b = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    out = tz.add(a, b)
    assert out.shape == (2, 3, 4, 4)
    np.testing.assert_allclose(out.data[1, 2], 1.0 + 5.0)


def test_add_shape_mismatch_message():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4,)))
    with pytest.raises(InvalidInputError) as err:
        tz.add(a, b)
    assert "(2, 3)" in str(err.value) and "(4,)" in str(err.value)


def test_group_mean_subtract_zero_sum():
    rng = np.random.default_rng(2)
    x = Tensor(_randn(rng, (5, 3, 8, 8)))
    out = tz.group_mean_subtract(x)
    np.testing.assert_allclose(out.data.sum(axis=0), 0.0, atol=1e-5)


def test_unknown_primitive():
    with pytest.raises(InvalidInputError):
        apply_primitive("matmul", [Tensor([1.0])])


def test_backprop_mse_scalar():
    v = 3.0
    x = Tensor(np.array([v], dtype=np.float64), requires_grad=True)
    tape = Tape()
    with tape:
        loss = tz.mse(x, Tensor(np.array([0.0])))
    g = backpropagate(tape, loss).get(x)
    np.testing.assert_allclose(g, [2.0 * v])


def test_backprop_l1_sign():
    x = Tensor(np.array([3.0]), requires_grad=True)
    tape = Tape()
    with tape:
        loss = tz.l1(x, Tensor(np.array([0.0])))
    g = backpropagate(tape, loss).get(x)
    np.testing.assert_allclose(g, [1.0])


def test_backprop_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = Tape()
    with tape:
        y = tz.relu(x)
    with pytest.raises(InvalidInputError):
        backpropagate(tape, y)


def test_tape_consumed_once():
    x = Tensor(np.ones(2), requires_grad=True)
    tape = Tape()
    with tape:
        loss = tz.mse(x, Tensor(np.zeros(2)))
    backpropagate(tape, loss)
    with pytest.raises(InvalidInputError):
        backpropagate(tape, loss)


def test_no_recording_context():
    x = Tensor(np.ones(2), requires_grad=True)
    tape = Tape()
    with tape:
        with tz.no_recording():
            tz.relu(x)
        tz.relu(x)
    assert len(tape.entries) == 1


def test_loss_not_on_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    tape = Tape()
    loss = tz.mse(x, Tensor(np.zeros(2)))  # recorded nowhere
    with pytest.raises(InvalidInputError):
        backpropagate(tape, loss)


def _primitive_checks(dtype, tol):
    """Grad-check every primitive on a few random shapes."""
    rng = np.random.default_rng(7)

    def nudge(a):
        # keep relu/l1 kinks away from 0
        a = a + 0.05 * np.sign(a) + 0.01
        return a.astype(dtype)

    results = {}

    x = Tensor(nudge(_randn(rng, (2, 3, 4, 4))))
    w = Tensor(nudge(_randn(rng, (5, 3, 3, 3)) * 0.4))
    b = Tensor(nudge(_randn(rng, (5,))))
    results["conv2d:x"] = grad_check(lambda t: tz.mse(tz.conv2d(t, w, b), Tensor(np.zeros((2, 5, 4, 4), dtype))), x)
    results["conv2d:w"] = grad_check(lambda t: tz.mse(tz.conv2d(x, t, b), Tensor(np.zeros((2, 5, 4, 4), dtype))), w)
    results["conv2d:b"] = grad_check(lambda t: tz.mse(tz.conv2d(x, w, t), Tensor(np.zeros((2, 5, 4, 4), dtype))), b)

    xd = Tensor(nudge(_randn(rng, (3, 6))))
    wd = Tensor(nudge(_randn(rng, (6, 4)) * 0.4))
    bd = Tensor(nudge(_randn(rng, (4,))))
    results["dense:x"] = grad_check(lambda t: tz.mse(tz.dense(t, wd, bd), Tensor(np.zeros((3, 4), dtype))), xd)
    results["dense:w"] = grad_check(lambda t: tz.mse(tz.dense(xd, t, bd), Tensor(np.zeros((3, 4), dtype))), wd)

    xr = Tensor(nudge(_randn(rng, (4, 5))))
    results["relu"] = grad_check(lambda t: tz.mse(tz.relu(t), Tensor(np.zeros((4, 5), dtype))), xr)
    results["silu"] = grad_check(lambda t: tz.mse(tz.silu(t), Tensor(np.zeros((4, 5), dtype))), xr)

    a4 = Tensor(nudge(_randn(rng, (2, 3, 4, 4))))
    bpre = Tensor(nudge(_randn(rng, (2, 3))))
    results["add:full"] = grad_check(lambda t: tz.mse(tz.add(t, a4), Tensor(np.zeros((2, 3, 4, 4), dtype))), a4)
    results["add:prefix"] = grad_check(lambda t: tz.mse(tz.add(a4, t), Tensor(np.zeros((2, 3, 4, 4), dtype))), bpre)

    results["mul_scalar"] = grad_check(lambda t: tz.mse(tz.mul_scalar(t, -1.7), Tensor(np.zeros((4, 5), dtype))), xr)

    c1 = Tensor(nudge(_randn(rng, (2, 2, 3, 3))))
    c2 = Tensor(nudge(_randn(rng, (2, 4, 3, 3))))
    results["concat"] = grad_check(
        lambda t: tz.mse(tz.concat([t, c2]), Tensor(np.zeros((2, 6, 3, 3), dtype))), c1
    )

    results["mean_axis"] = grad_check(lambda t: tz.mse(tz.mean_axis(t, 1), Tensor(np.zeros((2, 4, 4), dtype))),
                                      Tensor(nudge(_randn(rng, (2, 3, 4, 4)))))

    xp = Tensor(nudge(_randn(rng, (2, 2, 4, 4))))
    results["downsample2x"] = grad_check(lambda t: tz.mse(tz.downsample2x(t), Tensor(np.zeros((2, 2, 2, 2), dtype))), xp)
    results["upsample2x"] = grad_check(lambda t: tz.mse(tz.upsample2x(t), Tensor(np.zeros((2, 2, 8, 8), dtype))), xp)
    results["group_mean_subtract"] = grad_check(
        lambda t: tz.mse(tz.group_mean_subtract(t), Tensor(np.zeros((2, 2, 4, 4), dtype))), xp
    )
    tgt_ln = Tensor(nudge(_randn(rng, (2, 2, 4, 4))))
    results["layer_norm"] = grad_check(lambda t: tz.mse(tz.layer_norm(t), tgt_ln), xp)

    m1 = Tensor(nudge(_randn(rng, (3, 4))))
    m2 = Tensor(nudge(_randn(rng, (3, 4))))
    results["mse"] = grad_check(lambda t: tz.mse(t, m2), m1)
    results["l1"] = grad_check(lambda t: tz.l1(t, m2), m1)

    logits = Tensor(nudge(_randn(rng, (5, 3))))
    labels = np.array([0, 2, 1, 2, 0])
    results["softmax_cross_entropy"] = grad_check(lambda t: tz.softmax_cross_entropy(t, labels), logits)

    bad = {k: v for k, v in results.items() if v >= tol}
    assert not bad, f"primitives over tolerance {tol}: {bad}"
    return results


def test_primitive_gradients_float32():
    _primitive_checks(np.float32, 1e-3)


def test_primitive_gradients_float64():
    _primitive_checks(np.float64, 1e-5)


def test_grad_check_quadratic_is_tight():
    x = Tensor(np.array([1.25, -0.75], dtype=np.float64))
    err = grad_check(lambda t: tz.mse(t, Tensor(np.zeros(2))), x, eps=1e-3)
    assert err < 1e-6


def test_grad_check_eps_range():
    x = Tensor(np.ones(2))
    with pytest.raises(InvalidInputError):
        grad_check(lambda t: tz.mse(t, Tensor(np.zeros(2))), x, eps=0.5)


def test_two_layer_conv_net_matches_fd():
    rng = np.random.default_rng(11)
    x = Tensor(_randn(rng, (1, 2, 6, 6), np.float64))
    w1 = Tensor(_randn(rng, (3, 2, 3, 3), np.float64) * 0.5, requires_grad=True)
    w2 = Tensor(_randn(rng, (2, 3, 3, 3), np.float64) * 0.5, requires_grad=True)
    target = Tensor(_randn(rng, (1, 2, 6, 6), np.float64))

    def net(w):
        h = tz.silu(tz.conv2d(x, w))
        return tz.mse(tz.conv2d(h, w2), target)

    assert grad_check(net, w1, eps=1e-4) < 1e-6


def test_adam_converges_on_quadratic():
    params = {"w": Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)}
    opt = Adam(lr=0.2)
    for _ in range(200):
        tape = Tape()
        with tape:
            loss = tz.mse(params["w"], Tensor(np.zeros(2)))
        grads = backpropagate(tape, loss)
        params = opt.step(params, grads)
    assert np.abs(params["w"].data).max() < 1e-2


def test_adam_untouched_param_kept():
    params = {
        "w": Tensor(np.ones(2, dtype=np.float32), requires_grad=True),
        "frozen": Tensor(np.ones(2, dtype=np.float32), requires_grad=True),
    }
    tape = Tape()
    with tape:
        loss = tz.mse(params["w"], Tensor(np.zeros(2)))
    grads = backpropagate(tape, loss)
    out = Adam(lr=0.1).step(params, grads)
    assert out["frozen"] is params["frozen"]
    assert not np.array_equal(out["w"].data, params["w"].data)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "a.weight": Tensor(_randn(rng, (3, 4))),
        "b.bias": Tensor(_randn(rng, (7,))),
        "scalar": np.asarray(2.5, dtype=np.float32),
    }
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else t
        np.testing.assert_array_equal(loaded[name], arr)


def test_checkpoint_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(4)
    tensors = {"z": _randn(rng, (5,)), "a": _randn(rng, (2, 2))}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_checkpoint(p1, tensors)
    save_checkpoint(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "bad.ckpt"
    import struct

    path.write_bytes(b"TCKP" + struct.pack("<HI", 9, 0))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_adam_state_round_trip():
    params = {"w": Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)}
    opt = Adam(lr=0.1)
    tape = Tape()
    with tape:
        loss = tz.mse(params["w"], Tensor(np.zeros(2)))
    params2 = opt.step(params, backpropagate(tape, loss))

    clone = Adam(lr=0.1)
    clone.load_state_arrays(opt.state_arrays())
    tape_a, tape_b = Tape(), Tape()
    with tape_a:
        la = tz.mse(params2["w"], Tensor(np.zeros(2)))
    with tape_b:
        lb = tz.mse(params2["w"], Tensor(np.zeros(2)))
    out_a = opt.step(params2, backpropagate(tape_a, la))
    out_b = clone.step(params2, backpropagate(tape_b, lb))
    np.testing.assert_array_equal(out_a["w"].data, out_b["w"].data)
