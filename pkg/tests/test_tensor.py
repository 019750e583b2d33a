import numpy as np
import numpy.testing as npt
import pytest

from xdkd.tensor import (
    AutodiffError,
    ShapeError,
    Tensor,
    backward,
    bilinear_upsample,
    clamp_min,
    concat,
    conv2d,
    ew_abs,
    ew_add,
    ew_div,
    ew_mul,
    ew_sub,
    finite_diff_check,
    flatten,
    global_avg_pool,
    leaky_relu,
    new_tape,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
)


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


def proj(t, seed=1):
    w = Tensor(rand(t.shape, seed))
    return reduce_sum(ew_mul(t, w))


# ---------------------------------------------------------------------------
# elementwise

def test_add_values():
    npt.assert_array_equal(ew_add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_identity():
    x = Tensor(rand((3, 4)))
    npt.assert_array_equal(ew_mul(x, Tensor(np.ones((3, 4)))).data, x.data)


def test_mul_grad_matches_finite_differences():
    b = Tensor(rand((3, 4), seed=5))
    err = finite_diff_check(lambda x: proj(ew_mul(x, b)), Tensor(rand((3, 4), 7)), h=1e-5)
    assert err < 1e-6


def test_channel_broadcast():
    x = Tensor(rand((3, 2, 2)))
    g = Tensor(rand((3, 1, 1)))
    out = ew_mul(x, g)
    npt.assert_allclose(out.data, x.data * g.data)

    # gradient on the broadcast side sums over space
    new_tape()
    gt = Tensor(g.data, requires_grad=True)
    y = reduce_sum(ew_mul(Tensor(x.data), gt))
    backward(y)
    npt.assert_allclose(gt.grad, x.data.sum(axis=(1, 2), keepdims=True))


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError, match="shape incompatible"):
        ew_add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="shape incompatible"):
        ew_mul(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((2, 1, 1))))


def test_scalar_lifting_and_operators():
    x = Tensor([1.0, 2.0])
    npt.assert_array_equal((x + 1.0).data, [2.0, 3.0])
    npt.assert_array_equal((2.0 * x).data, [2.0, 4.0])
    npt.assert_array_equal((x - 1.0).data, [0.0, 1.0])
    npt.assert_array_equal((1.0 - x).data, [0.0, -1.0])
    npt.assert_array_equal((x / 2.0).data, [0.5, 1.0])
    npt.assert_array_equal((-x).data, [-1.0, -2.0])


def test_div_grads():
    a = Tensor(rand((4,), 1))
    b = Tensor(np.abs(rand((4,), 2)) + 0.5)
    assert finite_diff_check(lambda x: proj(ew_div(x, b)), a) < 1e-6
    assert finite_diff_check(lambda x: proj(ew_div(a, x)), b) < 1e-6


def test_abs_sub():
    x = Tensor([-2.0, 3.0])
    npt.assert_array_equal(ew_abs(x).data, [2.0, 3.0])
    npt.assert_array_equal(ew_sub(Tensor([5.0]), Tensor([2.0])).data, [3.0])


# ---------------------------------------------------------------------------
# activations

def test_relu_values():
    npt.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.abs(rand((5,), 3)) + 0.1
    npt.assert_array_equal(relu(Tensor(x)).data, x)


def test_relu_gradient_mask():
    x = rand((4, 4), seed=11)
    x[np.abs(x) < 0.05] += 0.2  # keep clear of the kink
    new_tape()
    xt = Tensor(x, requires_grad=True)
    backward(reduce_sum(relu(xt)))
    npt.assert_array_equal(xt.grad, (x > 0).astype(float))
    assert finite_diff_check(lambda t: reduce_sum(relu(t)), Tensor(x)) < 1e-6


def test_relu_all_negative_zero_grad():
    new_tape()
    x = Tensor(-np.abs(rand((3, 3), 2)) - 0.1, requires_grad=True)
    backward(reduce_sum(relu(x)))
    npt.assert_array_equal(x.grad, np.zeros((3, 3)))


def test_leaky_relu():
    out = leaky_relu(Tensor([-1.0, 2.0]), slope=0.1)
    npt.assert_allclose(out.data, [-0.1, 2.0])


def test_sigmoid_softplus_clamp():
    z = rand((6,), 4) * 3
    npt.assert_allclose(sigmoid(Tensor(z)).data, 1 / (1 + np.exp(-z)), rtol=1e-12)
    npt.assert_allclose(softplus(Tensor(z)).data, np.log1p(np.exp(z)), rtol=1e-12)
    npt.assert_array_equal(clamp_min(Tensor([-1.0, 2.0]), 0.5).data, [0.5, 2.0])
    # large inputs stay finite
    assert np.isfinite(softplus(Tensor([800.0, -800.0])).data).all()
    assert np.isfinite(sigmoid(Tensor([800.0, -800.0])).data).all()


# ---------------------------------------------------------------------------
# softmax

def test_softmax_symmetry():
    npt.assert_allclose(softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])


def test_softmax_stability():
    out = softmax(Tensor([1000.0, 0.0]), axis=0).data
    assert np.isfinite(out).all()
    npt.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_probability_vector():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = Tensor(rng.standard_normal((5, 3, 4)) * 10)
        s = softmax(z, axis=0).data
        assert (s >= 0).all()
        npt.assert_allclose(s.sum(axis=0), np.ones((3, 4)), atol=1e-12)


def test_softmax_jacobian_finite_differences():
    err = finite_diff_check(lambda z: proj(softmax(z, axis=0)), Tensor(rand((5,), 9)))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# reductions

def test_mean_value_and_grad():
    assert reduce_mean(Tensor([2.0, 4.0])).item() == 3.0
    new_tape()
    x = Tensor(rand((3, 4)), requires_grad=True)
    backward(reduce_mean(x))
    npt.assert_allclose(x.grad, np.full((3, 4), 1 / 12))


def test_global_avg_pool():
    x = np.ones((3, 4, 5)) * np.array([1.0, 2.0, 3.0])[:, None, None]
    out = global_avg_pool(Tensor(x))
    assert out.shape == (3, 1, 1)
    npt.assert_allclose(out.data.reshape(-1), [1.0, 2.0, 3.0])


def test_reduce_sum_axes():
    x = rand((2, 3, 4), 5)
    npt.assert_allclose(reduce_sum(Tensor(x), axes=(1,)).data, x.sum(axis=1))
    npt.assert_allclose(reduce_sum(Tensor(x), axes=(0, 2), keepdims=True).data,
                        x.sum(axis=(0, 2), keepdims=True))


# ---------------------------------------------------------------------------
# conv2d

def test_conv_1x1_identity():
    x = Tensor(rand((1, 4, 5), 2))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    npt.assert_array_equal(out.data, x.data)


def test_conv_sums_all_entries():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    k = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, k, Tensor(np.zeros(1)))
    npt.assert_array_equal(out.data, [[[10.0]]])


def conv_oracle(x, k, b, stride, padding, dilation):
    """Scalar-loop cross-correlation reference."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for a in range(kh):
                        for z in range(kw):
                            acc += xp[ic, i * stride + a * dilation,
                                      j * stride + z * dilation] * k[oc, ic, a, z]
                out[oc, i, j] = acc
    return out


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 3)])
def test_conv_matches_scalar_oracle(stride, padding, dilation):
    rng = np.random.default_rng(stride * 10 + padding + dilation)
    x = rng.standard_normal((2, 7, 8))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding, dilation).data
    npt.assert_allclose(got, conv_oracle(x, k, b, stride, padding, dilation), atol=1e-12)


def test_conv_kernel_grad_finite_differences():
    x = Tensor(rand((2, 5, 5), 3))
    b = Tensor(rand((3,), 4))
    err = finite_diff_check(
        lambda k: proj(conv2d(x, k, b, 1, 0, 1)), Tensor(rand((3, 2, 3, 3), 5)))
    assert err < 1e-6


def test_conv_too_large_kernel_raises():
    with pytest.raises(ShapeError, match="kernel exceeds padded input"):
        conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), Tensor(np.zeros(1)))


def test_conv_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# bilinear upsample

def test_upsample_factor_one_identity():
    x = Tensor(rand((2, 3, 4)))
    npt.assert_array_equal(bilinear_upsample(x, 1).data, x.data)


def test_upsample_constant_stays_constant():
    x = Tensor(np.full((1, 3, 3), 5.0))
    npt.assert_allclose(bilinear_upsample(x, 2).data, np.full((1, 6, 6), 5.0), atol=1e-12)


def test_upsample_grad_finite_differences():
    err = finite_diff_check(lambda x: proj(bilinear_upsample(x, 2)), Tensor(rand((1, 3, 3), 8)))
    assert err < 1e-6


def test_upsample_shape():
    assert bilinear_upsample(Tensor(rand((3, 2, 4))), 3).shape == (3, 6, 12)


# ---------------------------------------------------------------------------
# structure

def test_concat_and_grads():
    a, b = rand((2, 3, 4), 1), rand((3, 3, 4), 2)
    out = concat([Tensor(a), Tensor(b)], axis=0)
    npt.assert_array_equal(out.data, np.concatenate([a, b]))
    new_tape()
    at = Tensor(a, requires_grad=True)
    backward(reduce_sum(concat([at, Tensor(b)], axis=0)))
    npt.assert_array_equal(at.grad, np.ones_like(a))


def test_reshape_flatten():
    x = rand((3, 4), 2)
    npt.assert_array_equal(reshape(Tensor(x), (2, 6)).data, x.reshape(2, 6))
    npt.assert_array_equal(flatten(Tensor(x)).data, x.reshape(-1))


# ---------------------------------------------------------------------------
# backward semantics

def test_backward_requires_scalar():
    with pytest.raises(AutodiffError, match="backward requires scalar"):
        backward(Tensor([1.0, 2.0]))


def test_backward_accumulates_until_zeroed():
    new_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = reduce_sum(x)
    backward(y)
    backward(y)
    npt.assert_array_equal(x.grad, [2.0, 2.0])
    y.tape.zero_grads()
    assert x.grad is None


def test_backward_skips_non_ancestors():
    new_tape()
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([2.0], requires_grad=True)
    unrelated = ew_mul(z, z)  # noqa: F841
    backward(reduce_sum(ew_mul(x, x)))
    assert z.grad is None


def test_no_grad_detaches():
    with no_grad():
        x = Tensor([1.0], requires_grad=True)
        y = ew_mul(x, x)
    assert y.requires_grad is False and y.tape is None


def test_detached_branch_gets_no_gradient():
    new_tape()
    x = Tensor([3.0], requires_grad=True)
    frozen = ew_mul(x, x).detach()
    backward(reduce_sum(ew_mul(frozen, x)))
    npt.assert_array_equal(x.grad, [9.0])  # only the live factor


def test_targeted_backward_matches_full_pass():
    def build():
        new_tape()
        x = Tensor(rand((2, 3, 3), 21), requires_grad=True)
        mid = relu(ew_mul(x, Tensor(rand((2, 3, 3), 22))))
        top = reduce_sum(ew_mul(mid, mid))
        return x, mid, top

    x1, mid1, top1 = build()
    backward(top1)
    full = mid1.grad.copy()
    x_full = x1.grad.copy()

    x2, mid2, top2 = build()
    backward(top2, stops=[mid2])
    npt.assert_array_equal(mid2.grad, full)
    assert x2.grad is None  # pruned below the stop

    # stops that are ancestors of each other keep all paths
    x3, mid3, top3 = build()
    backward(top3, stops=[mid3, x3])
    npt.assert_array_equal(mid3.grad, full)
    npt.assert_array_equal(x3.grad, x_full)


def test_composite_film_conv_gradient():
    rng = np.random.default_rng(0)
    k = Tensor(rng.standard_normal((2, 3, 3, 3)))
    b = Tensor(rng.standard_normal(2))
    gamma = Tensor(rng.standard_normal((3, 1, 1)) * 0.4)
    beta = Tensor(rng.standard_normal((3, 1, 1)) * 0.4)

    def f(x):
        mod = ew_add(ew_mul(x, ew_add(gamma, 1.0)), beta)
        return reduce_mean(conv2d(mod, k, b, 1, 1, 1))

    err = finite_diff_check(f, Tensor(rng.standard_normal((3, 4, 4))))
    assert err < 1e-5


def test_forward_determinism():
    def run():
        new_tape()
        x = Tensor(rand((3, 8, 8), 33))
        k = Tensor(rand((2, 3, 3, 3), 34))
        return conv2d(relu(x), k, Tensor(rand((2,), 35)), 2, 1, 1).data

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(12)
    for _ in range(10):
        x = Tensor(rng.standard_normal((3, 6, 6)) * 100)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)))
        out = softmax(conv2d(x, k, Tensor(rng.standard_normal(4)), 1, 1, 1), axis=0)
        out = softplus(reduce_mean(ew_abs(out), axes=(1,)))
        assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# finite-diff oracle self-tests

def test_fd_oracle_on_linear_function():
    assert finite_diff_check(lambda x: reduce_sum(x), Tensor(rand((5,), 2))) < 1e-10


def test_fd_oracle_on_sum_of_squares():
    x = Tensor([1.0, 2.0])
    new_tape()
    xt = Tensor(x.data.copy(), requires_grad=True)
    backward(reduce_sum(ew_mul(xt, xt)))
    npt.assert_allclose(xt.grad, [2.0, 4.0], atol=1e-12)
    assert finite_diff_check(lambda t: reduce_sum(ew_mul(t, t)), x) < 1e-8
