import numpy as np
import pytest

from physmle import kernels
from physmle.diagnostics import COMPOSITE_STEP, composite_case, primitive_cases
from physmle.grad import (
    DimensionError,
    Parameter,
    Tensor,
    backward,
    check_gradients,
    no_grad,
    ops,
)


def naive_conv(x, w, stride, padding):
    """Direct six-loop convolution in float64."""
    b, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, co, oh, ow))
    for n in range(b):
        for o in range(co):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[n, ci, y * stride + i, xx * stride + j] * w[o, ci, i, j]
                    out[n, o, y, xx] = acc
    return out


def test_conv_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_strided_scalar_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = ops.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)), stride=2)
    np.testing.assert_array_equal(out.data[0, 0], 2 * x[0, 0, ::2, ::2])


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, naive_conv(x, w, 1, 1), atol=1e-5)


@pytest.mark.parametrize("stride,padding", [(2, 1), (2, 0), (3, 2)])
def test_conv_strided_padded_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((1, 2, 7, 9)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv(x, w, stride, padding), atol=1e-5)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_kernel_too_large_rejected():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("name", ["im2col", "col2im"])
def test_numba_and_numpy_kernels_agree(name):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
    args = (3, 3, 2, 2, 4, 5)
    cols_np = kernels.im2col_numpy(xp, *args)
    cols_nb = kernels.im2col_numba(xp, *args)
    if name == "im2col":
        np.testing.assert_array_equal(cols_np, cols_nb)
    else:
        g = rng.standard_normal(cols_np.shape).astype(np.float32)
        np.testing.assert_allclose(
            kernels.col2im_numpy(g, xp.shape, *args), kernels.col2im_numba(g, xp.shape, *args), atol=1e-6
        )


def test_backward_sum_linear():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_shared_subexpression_accumulates():
    x = Tensor([1.5], requires_grad=True)
    backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2.0])


def test_diamond_graph_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    backward((y * y + y).sum())
    # d/dx (9x^2 + 3x) = 18x + 3
    np.testing.assert_allclose(x.grad, [39.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_unreachable_keeps_grad_absent():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    backward((x * 2.0).sum())
    assert y.grad is None
    assert x.grad is not None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y._node is None and not y.requires_grad


def test_relu_subgradient_zero_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward(ops.relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_graph_order_is_recording_order():
    from physmle.grad import Graph

    x = Tensor([1.0], requires_grad=True)
    a = x * 2.0
    b = a + 1.0
    c = (b * a).sum()
    g = Graph.reachable(c)
    seqs = [n.seq for n in g.nodes]
    assert seqs == sorted(seqs)
    assert len(g.nodes) == len({id(n) for n in g.nodes}) == 4


# -- gradient checks ----------------------------------------------------------

RNG = np.random.default_rng(1234)


def _p(*shape, scale=1.0, offset=0.0):
    return Parameter(RNG.standard_normal(shape) * scale + offset)


def _weighted(t, seed=0):
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return (t * w).sum()


def test_check_gradients_sigmoid_scalar():
    w = Parameter([0.7])
    x = np.array([1.3], dtype=np.float32)
    assert check_gradients(lambda: ops.sigmoid(w * x).sum(), [w]) < 1e-4


def test_check_gradients_constant_is_zero():
    w = Parameter([0.7])
    assert check_gradients(lambda: Tensor([3.0]).sum() + w * 0.0, [w]) == 0.0


def test_check_gradients_conv_relu_chain():
    x = _p(1, 1, 4, 4)
    w = _p(1, 1, 3, 3)
    w2 = _p(1, 1, 1, 1)
    f = lambda: _weighted(ops.conv2d(ops.relu(ops.conv2d(x, w, 1, 1)), w2))
    assert check_gradients(f, [x, w, w2]) < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_gradients_reports_nonfinite():
    w = Parameter([0.0])
    assert check_gradients(lambda: ops.log(w * 0.0).sum(), [w]) == float("inf")


PRIMITIVES = primitive_cases()


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, params = PRIMITIVES[name]()
    assert check_gradients(f, params, h=1e-3, n_coords=16) < 1e-3


def test_composite_gradients():
    f, params, _ = composite_case()
    err = check_gradients(f, params, h=COMPOSITE_STEP, n_coords=3, analytic_dtype=np.float64)
    assert err < 1e-3


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        return ops.sigmoid(ops.conv2d(x, w, 1, 1)).data

    np.testing.assert_array_equal(run(), run())


def test_conv2d_multi_slices_match_single_convs_bitwise():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 9, 12)).astype(np.float32)
    ws = [rng.standard_normal((c, 4, 3, 3)).astype(np.float32) for c in (6, 2, 2)]
    out = ops.conv2d_multi(x, ws, stride=2, padding=1).data
    lo = 0
    for w in ws:
        single = ops.conv2d(x, w, stride=2, padding=1).data
        assert np.array_equal(out[:, lo : lo + w.shape[0]], single)
        lo += w.shape[0]
