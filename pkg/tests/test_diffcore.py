import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from audsr.diffcore import (
    CheckpointError,
    GraphError,
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tensor,
    amax,
    avgpool2,
    concat,
    conv2d,
    conv_output_size,
    grad_check,
    linear,
    load_checkpoint,
    log,
    mean,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    square,
    tsum,
)
from audsr.diffcore.gradcheck import relative_error


def _store(rng, **shapes):
    ps = ParamStore()
    for name, shape in shapes.items():
        ps.add(name, rng.normal(size=shape))
    return ps


def test_conv_on_ones_counts_kernel_taps():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, padding=0)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for i in range(5):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_output_size():
    assert conv_output_size(176, 3, 1, 1) == 176
    assert conv_output_size(7, 3, 2, 0) == 3


def test_avgpool_halves_and_floors():
    x = Tensor(np.arange(25, dtype=float).reshape(1, 1, 5, 5))
    out = avgpool2(x)
    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_graph_is_single_use():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = tsum(w * 2.0)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_rejects_non_scalar_and_non_finite():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (w * 2.0).backward()
    with pytest.raises(NonFiniteError):
        tsum(log(w - 1.0)).backward()


def test_detach_blocks_gradient():
    w = Tensor(np.array([2.0]), requires_grad=True)
    loss = tsum(w * w.detach())
    loss.backward()
    np.testing.assert_array_equal(w.grad, [2.0])


def test_gradients_accumulate_over_fanout():
    w = Tensor(np.array([3.0]), requires_grad=True)
    loss = tsum(w * w + w)
    loss.backward()
    np.testing.assert_array_equal(w.grad, [7.0])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_elementwise_chain_gradcheck(x0):
    ps = ParamStore()
    ps.add("x", x0)

    def closure():
        x = ps["x"]
        return tsum(sigmoid(x) * square(x) + mean(x, axis=1, keepdims=True) * x)

    rep = grad_check(closure, ps, tol=1e-6)
    assert rep.passed, rep.max_rel_error


def test_gradcheck_near_zero_gradient_is_not_failed_on_rounding():
    ps = ParamStore()
    ps.add("x", np.array([[1.0, 1e-7, 1e-7], [1e-7, 1e-7, 1e-7]]))

    def closure():
        x = ps["x"]
        return tsum(sigmoid(x) * square(x) + mean(x, axis=1, keepdims=True) * x)

    assert grad_check(closure, ps, tol=1e-6).passed


def test_conv_linear_pool_gradcheck():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    ps = _store(rng, w=(3, 2, 3, 3), b=(3,), fw=(4, 27), fb=(4,))

    def closure():
        h = avgpool2(relu(conv2d(x, ps["w"], ps["b"], padding=1)))
        h = reshape(h, (2, 27))
        return tsum(square(linear(h, ps["fw"], ps["fb"])))

    assert grad_check(closure, ps, tol=1e-4).passed


def test_amax_and_concat_gradcheck():
    rng = np.random.default_rng(3)
    ps = _store(rng, a=(2, 3, 4), b=(2, 1, 4))

    def closure():
        c = concat([ps["a"], ps["b"]], axis=1)
        return tsum(square(amax(c, axis=2)))

    assert grad_check(closure, ps, tol=1e-6).passed


def test_gradcheck_detects_wrong_gradient():
    ps = ParamStore()
    ps.add("x", np.array([0.3, -1.2, 2.0]))

    def closure():
        x = ps["x"]
        out = square(x)
        # double the analytic gradient while leaving the forward value untouched
        return tsum(out + (out - out.detach()))

    rep = grad_check(closure, ps, tol=1e-4)
    assert not rep.passed
    assert rep.failures() == ["x"]


def test_gradcheck_kink_retry_rescues_relu_near_zero():
    ps = ParamStore()
    ps.add("x", np.array([3e-6, -2.0, 1.0]))
    rep = grad_check(lambda: tsum(relu(ps["x"]) * 2.0), ps, tol=1e-4)
    assert rep.passed
    assert rep.kink_retries["x"] >= 1


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.5) == pytest.approx(1 / 3)


def test_sgd_and_adam_rebind_data():
    ps = ParamStore()
    w = ps.add("w", np.array([1.0, -1.0]))
    w.grad = np.array([0.5, -0.5])
    before = w.data
    ps.step("sgd", lr=0.1)
    np.testing.assert_allclose(w.data, [0.95, -0.95])
    assert before is not w.data
    np.testing.assert_array_equal(before, [1.0, -1.0])

    ps2 = ParamStore()
    v = ps2.add("v", np.array([1.0]))
    v.grad = np.array([4.0])
    ps2.step("adam", lr=0.01)
    # first Adam step moves by lr * sign(g) up to the epsilon term
    np.testing.assert_allclose(v.data, [0.99], atol=1e-9)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a/w": rng.normal(size=(3, 2)), "b": rng.normal(size=5)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, arrays, {"epoch": 3})
    loaded, meta = load_checkpoint(p1)
    assert meta == {"epoch": 3}
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
    save_checkpoint(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("damage", ["magic", "header", "payload", "truncate"])
def test_checkpoint_corruption_is_detected(tmp_path, damage):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"w": np.arange(6.0)}, {})
    blob = bytearray(p.read_bytes())
    if damage == "magic":
        blob[0] ^= 0xFF
    elif damage == "header":
        blob[24] = ord("}")
    elif damage == "payload":
        blob[-1] ^= 0x01
    else:
        blob = blob[:-8]
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
