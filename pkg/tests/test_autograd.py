import numpy as np
import pytest
from scipy.signal import correlate2d
from scipy.special import gammaln

from planepose import autograd as ag
from planepose.autograd import Tensor
from planepose.errors import ShapeError

from gradcheck import check_tensor


def leaf(shape, seed=0, low=-1.0, high=1.0):
    return Tensor(np.random.default_rng(seed).uniform(low, high, shape), requires_grad=True)


def run(op, *tensors):
    """Backprop a random projection of ``op(*tensors)`` and return the scalar function."""
    out = op(*tensors)
    proj = np.random.default_rng(99).standard_normal(out.shape)
    (out * proj).sum().backward()
    return lambda: float(np.sum(op(*[Tensor(t.data) for t in tensors]).data * proj))


UNARY = {
    "exp": (ag.exp, {}),
    "log": (ag.log, dict(low=0.5, high=2.0)),
    "sqrt": (ag.sqrt, dict(low=0.5, high=2.0)),
    "sin": (ag.sin, {}),
    "cos": (ag.cos, {}),
    "abs": (ag.tabs, {}),
    "relu": (ag.relu, {}),
    "softplus": (ag.softplus, {}),
    "tanh": (ag.tanh, {}),
    "lgamma": (ag.lgamma, dict(low=0.5, high=4.0)),
    "square": (ag.square, {}),
    "power": (lambda a: ag.power(a, 3.0), {}),
    "clip": (lambda a: ag.clip(a, -0.5, 0.5), {}),
    "neg": (ag.neg, {}),
    "sum_axis": (lambda a: a.sum(axis=1), {}),
    "mean": (lambda a: a.mean(axis=0, keepdims=True), {}),
    "reshape": (lambda a: a.reshape(6, 2), {}),
    "transpose": (lambda a: a.transpose(), {}),
    "getitem": (lambda a: a[1:, ::2], {}),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op, kw = UNARY[name]
    x = leaf((3, 4), **kw)
    f = run(op, x)
    assert check_tensor(f, x) < 1e-6


BINARY = {
    "add_broadcast": (ag.add, (3, 4), (4,)),
    "sub": (ag.sub, (3, 4), (3, 4)),
    "mul_broadcast": (ag.mul, (3, 1), (3, 4)),
    "div": (ag.div, (3, 4), (3, 4)),
    "matmul": (ag.matmul, (3, 4), (4, 2)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    op, sa, sb = BINARY[name]
    a = leaf(sa, 1)
    b = leaf(sb, 2, low=0.5, high=1.5)
    f = run(op, a, b)
    assert check_tensor(f, a) < 1e-6
    assert check_tensor(f, b) < 1e-6


def test_linear_gradients():
    x, w, b = leaf((5, 4), 1), leaf((3, 4), 2), leaf((3,), 3)
    f = run(ag.linear, x, w, b)
    for t in (x, w, b):
        assert check_tensor(f, t) < 1e-6


def test_stack_concat_gradients():
    a, b = leaf((2, 3), 1), leaf((2, 3), 2)
    f = run(lambda p, q: ag.stack([p, q], axis=1), a, b)
    assert check_tensor(f, a) < 1e-6
    a.grad = b.grad = None
    f = run(lambda p, q: ag.concat([p, q], axis=0), a, b)
    assert check_tensor(f, b) < 1e-6


def test_conv_gradients():
    x, w = leaf((2, 3, 6, 5), 1), leaf((4, 3, 3, 3), 2)
    f = run(ag.conv2d, x, w)
    assert check_tensor(f, x, n=40) < 1e-6
    assert check_tensor(f, w, n=40) < 1e-6


def test_image_op_gradients():
    x = leaf((2, 3, 8, 8), 4)
    for op in (ag.maxpool2x2, ag.instance_norm, lambda t: ag.adaptive_avg_pool(t, 2)):
        x.grad = None
        f = run(op, x)
        assert check_tensor(f, x, n=40) < 1e-5


def test_rodrigues_coefficient_gradients_across_branch():
    for scale in (1e-6, 1e-2, 1.0):
        t = Tensor(np.array([0.3, 1.1, 2.0]) * scale, requires_grad=True)
        f = run(lambda v: ag.rodrigues_coeffs(v)[0] + 2 * ag.rodrigues_coeffs(v)[1], t)
        assert check_tensor(f, t, eps=1e-9 if scale < 1e-3 else 1e-6) < 1e-5


# -- forward definitions ---------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_instance_norm_of_constant_is_zero():
    out = ag.instance_norm(Tensor(np.full((1, 2, 4, 4), 3.5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.random((2, 1, 7, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ag.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(1)
    x, w = rng.random((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3))
    out = ag.conv2d(Tensor(x), Tensor(w)).data
    for b in range(2):
        for o in range(4):
            ref = sum(correlate2d(x[b, c], w[o, c], mode="same") for c in range(3))
            np.testing.assert_allclose(out[b, o], ref, atol=1e-12)


def test_lgamma_values():
    x = np.array([0.5, 1.0, 2.5, 7.0])
    np.testing.assert_allclose(ag.lgamma(Tensor(x)).data, gammaln(x), rtol=1e-14)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5,\)"):
        ag.add(Tensor(np.ones((3, 4))), Tensor(np.ones(5)))
    with pytest.raises(ShapeError):
        ag.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        ag.maxpool2x2(Tensor(np.ones((1, 1, 3, 4))))


# -- backward semantics ----------------------------------------------------------


def test_sum_gradient_is_ones():
    w = leaf((4, 3))
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones((4, 3)))


def test_half_squared_norm_gradient_is_w():
    w = leaf((5,))
    (0.5 * (w * w).sum()).backward()
    np.testing.assert_allclose(w.grad, w.data, rtol=1e-15)


def test_backward_leaves_parameters_untouched():
    w = leaf((5,))
    before = w.data.copy()
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.data, before)


def test_disconnected_parameter_has_no_gradient():
    w, unused = leaf((3,)), leaf((3,), 1)
    w.sum().backward()
    assert unused.grad is None


def test_gradients_accumulate_over_shared_use():
    w = leaf((3,))
    (w * 2.0 + w * 3.0).sum().backward()
    np.testing.assert_allclose(w.grad, 5.0)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        leaf((3,)).backward()


def test_float32_constants_do_not_promote():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    assert (x * np.float64(2.0)).dtype == np.float32
    assert (np.ones(3) + x).dtype == np.float32


def test_dropout_scales_kept_units():
    x = Tensor(np.ones((1000,)))
    out = ag.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert ag.dropout(x, 0.0, np.random.default_rng(0)) is x
