import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import CHECKED_PRIMITIVES, build_case, build_chain
from texvq.autodiff import (
    PRIMITIVES,
    Adam,
    AdamHyper,
    NonFiniteGradientError,
    ShapeError,
    Tensor,
    UnknownOpError,
    backward,
    build_tape,
    detach,
    load_arrays,
    primitive_apply,
    save_arrays,
    tensor,
)
from texvq.autodiff import functional as F
from texvq.autodiff.gradcheck import check_gradients
from texvq.autodiff.nn import Conv2d, ResBlock, SelfAttention


def test_matmul_identity_rows():
    a = tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    eye = tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(F.matmul(a, eye).data, [[1.0, 2.0], [4.0, 5.0]])


def test_relu_example():
    np.testing.assert_array_equal(F.relu(tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv2d_ones_border_counts():
    # each output counts how many in-bounds taps the 3x3 window hits
    out = F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), pad=1).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - 3) // stride + 1
        wo = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(5, 3, 3, 3))
    y = rng.normal(size=(2, 5, 4, 4))
    conv = F.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    tconv = F.transposed_conv2d(Tensor(y), Tensor(w), stride=2, pad=1).data
    # <conv(x), y> == <x, conv^T(y)>
    assert conv.shape == y.shape and tconv.shape == x.shape
    np.testing.assert_allclose(np.sum(conv * y), np.sum(x * tconv), rtol=1e-12)


def test_shape_errors_name_op_and_extents():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))
    with pytest.raises(ShapeError, match="conv2d"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_unknown_op_rejected():
    with pytest.raises(UnknownOpError):
        primitive_apply("fft", (Tensor(np.zeros(2)),))


def test_backward_sum_and_square():
    x = tensor([0.5, -1.0, 2.0], requires_grad=True)
    backward(F.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    x = tensor([1.0, 2.0], requires_grad=True)
    backward(F.reduce_sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_and_rejects_nonscalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = F.reduce_sum(x * x)
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    with pytest.raises(ShapeError):
        backward(x * x)


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(0)
    fn, _ = build_chain(rng)
    tape = build_tape(fn())
    position = {id(t): i for i, t in enumerate(tape)}
    for i, t in enumerate(tape):
        for inp in t.node.inputs:
            if inp.node is not None:
                assert position[id(inp)] < i


def test_detach_stops_gradient_and_shares_values():
    x = tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = tensor([0.5, 0.25, 4.0], requires_grad=True)
    d = detach(x)
    assert not d.requires_grad
    assert d.data is x.data or np.shares_memory(d.data, x.data)
    backward(F.reduce_sum(d * y))
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, x.data)


def test_detach_contributes_zero_upstream():
    x = tensor([1.0, 2.0], requires_grad=True)
    loss = F.reduce_sum(x * x + detach(x) * 10.0)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_straight_through_forward_exact_backward_identity():
    rng = np.random.default_rng(1)
    soft = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    hard = Tensor(np.round(rng.normal(size=(4, 3))))
    out = F.straight_through(soft, hard)
    np.testing.assert_array_equal(out.data, hard.data)
    weight = rng.normal(size=(4, 3))
    backward(F.reduce_sum(out * Tensor(weight)))
    np.testing.assert_array_equal(soft.grad, weight)


@pytest.mark.parametrize("op", CHECKED_PRIMITIVES)
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients_match_finite_differences(op, seed):
    fn, leaves = build_case(op, np.random.default_rng(1000 * seed + CHECKED_PRIMITIVES.index(op)))
    assert check_gradients(fn, leaves) <= 1e-4


def test_every_registered_primitive_is_covered():
    # straight_through has no true derivative; it is checked by its own contract above
    assert set(PRIMITIVES) - set(CHECKED_PRIMITIVES) == {"straight_through"}


def test_three_layer_network_gradcheck():
    rng = np.random.default_rng(7)
    layers = [Conv2d(rng, 2, 3), ResBlock(rng, 3), SelfAttention(rng, 3)]
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    target = Tensor(rng.normal(size=(1, 3, 4, 4)))

    def fn():
        h = x
        for layer in layers:
            h = layer(h)
        return F.mse(h, target)

    params = [p for layer in layers for p in layer.parameters().values()]
    assert check_gradients(fn, params) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_chain_gradcheck(seed):
    fn, leaves = build_chain(np.random.default_rng(seed))
    assert check_gradients(fn, leaves) <= 1e-4


def test_tape_replay_is_bit_identical():
    def run():
        fn, leaves = build_chain(np.random.default_rng(11))
        loss = fn()
        backward(loss)
        return loss.data.copy(), [leaf.grad.copy() for leaf in leaves]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    for a, b in zip(g1, g2):
        assert a.tobytes() == b.tobytes()


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, AdamHyper(lr=0.1))
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, AdamHyper(lr=0.1))
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected first step: lr * g / (|g| + eps)
    assert abs(p.data[0] + 0.1 / (1 + 1e-8)) < 1e-15


def test_adam_rejects_nonfinite_and_names_param():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"enc.conv.weight": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteGradientError, match="enc.conv.weight"):
        opt.step()


def test_adam_runs_are_deterministic():
    def run():
        rng = np.random.default_rng(5)
        layer = Conv2d(rng, 2, 2)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        opt = Adam(layer.parameters(), AdamHyper(lr=0.01))
        for _ in range(5):
            opt.zero_grad()
            backward(F.mse(layer(x), x))
            opt.step()
        return [p.data.tobytes() for p in layer.parameters().values()]

    assert run() == run()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {
        "a.weight": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=(7,)).astype(np.float32),
        "scalar": np.array(np.pi),
    }
    save_arrays(arrays, tmp_path / "ckpt", meta={"stage": "1"})
    loaded, meta = load_arrays(tmp_path / "ckpt")
    assert meta == {"stage": "1"}
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].tobytes() == arrays[k].tobytes()
    manifest = (tmp_path / "ckpt.manifest").read_text().splitlines()
    assert manifest[1].split("\t") == ["a.weight", "<f8", "3,2,3,3", "0"]
    assert manifest[2].split("\t")[3] == str(3 * 2 * 3 * 3)
