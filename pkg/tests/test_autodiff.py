import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gossipgan.autodiff import AutodiffError, NonFiniteError, Tape, Tensor, backward, forward_op, grad, op_kinds, ops

from op_cases import REQUIRED_KINDS, gradient_check
from oracles import central_diff, conv2d_loop, conv_transpose2d_loop, rel_error


def test_every_required_kind_is_registered():
    assert REQUIRED_KINDS <= set(op_kinds())


def test_unknown_kind():
    with pytest.raises(AutodiffError):
        forward_op("softmax", Tensor([1.0]))


def test_leaky_relu_definition():
    out = forward_op("leaky_relu", Tensor([-1.0, 2.0]), slope=0.2)
    np.testing.assert_array_equal(out.data, [-0.2, 2.0])


def test_conv2d_all_ones_counts_nine():
    out = forward_op("conv2d", Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_transpose_first_generator_layer_shape():
    x = Tensor(np.zeros((1, 128, 1, 1)))
    w = Tensor(np.zeros((128, 64, 4, 4)))
    assert forward_op("conv_transpose2d", x, w, stride=1, padding=0).shape == (1, 64, 4, 4)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv2d_loop(x, w, b, stride, padding), atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_conv_transpose2d_matches_loop(stride, padding):
    rng = np.random.default_rng(stride + 7 * padding)
    x, w, b = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)
    out = ops.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv_transpose2d_loop(x, w, b, stride, padding), atol=1e-12)


@pytest.mark.parametrize("kind", sorted(REQUIRED_KINDS))
def test_first_order_gradients(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    assert max(gradient_check(kind, rng) for _ in range(10)) < 1e-4


def test_shape_mismatch_raises():
    with pytest.raises(AutodiffError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(AutodiffError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_input_raises():
    with pytest.raises(NonFiniteError):
        ops.tanh(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ops.mul(Tensor([1e308]), Tensor([1e308]))


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = grad(ops.sum(ops.mul(x, x)), [x])
    np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutodiffError):
        grad(ops.mul(x, x), [x])


def test_unreachable_wrt_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([[3.0]], requires_grad=True)
    gx, gy = grad(ops.sum(x), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros((1, 1)))
    np.testing.assert_array_equal(gx.data, [1.0, 1.0])


def test_detached_wrt_is_rejected():
    x = Tensor([1.0])
    with pytest.raises(AutodiffError):
        grad(ops.sum(x), [x])


def _two_layer(params, x):
    w1, b1, w2, b2 = params
    h = ops.tanh(ops.linear(x, w1, b1))
    return ops.sum(ops.tanh(ops.linear(h, w2, b2)))


def test_two_layer_tanh_network_against_finite_differences():
    rng = np.random.default_rng(3)
    shapes = [(5, 4), (5,), (3, 5), (3,)]
    vals = [rng.normal(size=s) * 0.7 for s in shapes]
    x = Tensor(rng.normal(size=(6, 4)))
    params = [Tensor(v, requires_grad=True) for v in vals]
    grads = grad(_two_layer(params, x), params)
    for i, v in enumerate(vals):
        def f(a, i=i):
            ps = [Tensor(a if j == i else vals[j]) for j in range(4)]
            return float(_two_layer(ps, x).data)

        assert rel_error(grads[i].data, central_diff(f, v)) < 1e-4


def _gp_linear(w, x):
    """(||d/dx (w . x)|| - 1)^2 built with double backward, averaged over the batch."""
    xt = Tensor(x, requires_grad=True)
    out = ops.sum(ops.matmul(xt, ops.reshape(w, (3, 1))))
    (gx,) = grad(out, [xt], create_graph=True)
    dev = ops.l2_norm(gx, axis=1) - 1.0
    return ops.mean(dev * dev)


def test_nested_gradient_of_penalty_on_three_parameter_linear_critic():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=3)
    x = rng.normal(size=(4, 3))
    w = Tensor(w0, requires_grad=True)
    (gw,) = grad(_gp_linear(w, x), [w])

    # FD of the penalty where the inner gradient is the analytic one (it equals w)
    def penalty(v):
        return (np.linalg.norm(v) - 1.0) ** 2

    assert rel_error(gw.data, central_diff(penalty, w0)) < 1e-3


def test_create_graph_appends_nodes():
    x = Tensor([0.3, -0.4], requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.tanh(x))
        before = len(tape)
        backward(tape, y, [x], create_graph=True)
        assert len(tape) > before
    with Tape() as tape:
        y = ops.sum(ops.tanh(x))
        before = len(tape)
        backward(tape, y, [x], create_graph=False)
        assert len(tape) == before


def test_tape_parents_precede_children():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.tanh(ops.matmul(x, x)))
        grad(y, [x], create_graph=True)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for parent in node.inputs:
            if parent.node is not None and id(parent.node) in position:
                assert position[id(parent.node)] < i


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_backward_is_linear(xv, a, b):
    def f(x):
        return ops.sum(ops.tanh(x))

    def g(x):
        return ops.sum(ops.mul(x, x))

    x = Tensor(xv, requires_grad=True)
    (combo,) = grad(ops.add(ops.mul(f(x), a), ops.mul(g(x), b)), [x])
    (gf,) = grad(f(x), [x])
    (gg,) = grad(g(x), [x])
    np.testing.assert_allclose(combo.data, a * gf.data + b * gg.data, atol=1e-12)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        y = ops.sum(ops.tanh(ops.conv2d(x, w, padding=1)))
        return [g.data.tobytes() for g in grad(y, [x, w])]

    assert run() == run()


# ---------------------------------------------------------------- dropout


def test_dropout_pair_zero_probability_is_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    a, b = ops.dropout_pair(x, 0.0, 1, 2)
    np.testing.assert_array_equal(a.data, x.data)
    np.testing.assert_array_equal(b.data, x.data)


def test_dropout_pair_half_scales_survivors_by_two():
    x = np.arange(1.0, 41.0)
    a, b = ops.dropout_pair(Tensor(x), 0.5, 1, 2)
    for out in (a.data, b.data):
        kept = out != 0
        np.testing.assert_array_equal(out[kept], 2 * x[kept])
    assert not np.array_equal(a.data != 0, b.data != 0)
    # masks regenerate from the seeds
    a2, _ = ops.dropout_pair(Tensor(x), 0.5, 1, 3)
    np.testing.assert_array_equal(a.data, a2.data)


def test_dropout_probability_one_rejected():
    with pytest.raises(AutodiffError):
        ops.dropout_pair(Tensor([1.0]), 1.0, 0, 1)


def test_dropout_expectation_monte_carlo():
    x = np.array([0.5, -1.0, 2.0, 3.0])
    p, n = 0.3, 10_000
    rng = np.random.default_rng(0)
    total = np.zeros_like(x)
    for _ in range(n):
        total += ops.dropout(Tensor(x), p, rng).data
    mean = total / n
    # per-entry std of a masked value is |x| sqrt(p/(1-p))
    sigma = np.abs(x) * np.sqrt(p / (1 - p)) / np.sqrt(n)
    assert np.all(np.abs(mean - x) <= 3 * sigma)
