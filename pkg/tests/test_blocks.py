import numpy as np
import numpy.testing as npt
import pytest

from xdkd.blocks import (
    Conv2dLayer,
    DASPPStage,
    DecoderStage,
    EncoderStage,
    PointwiseDASPP,
    film_fuse,
    film_modulate,
    make_film,
)
from xdkd.tensor import ShapeError, Tensor, conv2d, finite_diff_check, reduce_sum, ew_mul, relu


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# FiLM

def test_film_modulate_identity_bit_exact():
    f = Tensor(rand((3, 4, 5), 1))
    out = film_modulate(f, Tensor(np.zeros((3, 1, 1))), Tensor(np.zeros((3, 1, 1))))
    assert np.array_equal(out.data, f.data)


def test_film_modulate_doubling():
    f = Tensor(rand((2, 3, 3), 2))
    out = film_modulate(f, Tensor(np.ones((2, 1, 1))), Tensor(np.zeros((2, 1, 1))))
    npt.assert_array_equal(out.data, 2.0 * f.data)


def test_film_modulate_worked_example():
    out = film_modulate(Tensor([[[2.0]]]), Tensor([[[0.5]]]), Tensor([[[0.1]]]))
    npt.assert_allclose(out.data, [[[3.1]]], atol=1e-15)


def test_film_modulate_channel_mismatch():
    with pytest.raises(ShapeError):
        film_modulate(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((2, 1, 1))),
                      Tensor(np.ones((2, 1, 1))))


def test_film_linearity_identity():
    # film(a*f, g, b) == a*film(f, g, b) - (a-1)*b
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 3, 4))
    g = Tensor(rng.standard_normal((2, 1, 1)))
    b = Tensor(rng.standard_normal((2, 1, 1)))
    a = 2.75
    lhs = film_modulate(Tensor(a * f), g, b).data
    rhs = a * film_modulate(Tensor(f), g, b).data - (a - 1) * b.data
    npt.assert_allclose(lhs, rhs, atol=1e-12)


def test_film_fuse_zero_init_is_identity():
    film = make_film("t", radar_ch=2, image_ch=3, seed=0)
    f_i = Tensor(rand((3, 4, 4), 5))
    f_r = Tensor(rand((2, 4, 4), 6))
    assert np.array_equal(film_fuse(f_r, f_i, film).data, f_i.data)


def test_film_fuse_zero_radar_with_zero_bias():
    film = make_film("t", 2, 3, seed=0)
    film.gamma_conv.weight.data = rand((3, 2, 1, 1), 7)
    film.beta_conv.weight.data = rand((3, 2, 1, 1), 8)
    f_i = Tensor(rand((3, 4, 4), 9))
    out = film_fuse(Tensor(np.zeros((2, 4, 4))), f_i, film)
    npt.assert_array_equal(out.data, f_i.data)


def test_film_fuse_spatial_mismatch():
    film = make_film("t", 2, 3, seed=0)
    with pytest.raises(ShapeError):
        film_fuse(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 2, 2))), film)


def test_film_fuse_gamma_weight_gradient():
    from xdkd.gradcheck import param_finite_diff

    film = make_film("t", 2, 3, seed=0)
    rng = np.random.default_rng(10)
    film.gamma_conv.weight.data = rng.standard_normal((3, 2, 1, 1))
    film.beta_conv.weight.data = rng.standard_normal((3, 2, 1, 1))
    f_i = Tensor(rng.standard_normal((3, 4, 4)))
    f_r = Tensor(rng.standard_normal((2, 4, 4)))
    w = Tensor(rng.standard_normal((3, 4, 4)))
    err = param_finite_diff(lambda: reduce_sum(ew_mul(film_fuse(f_r, f_i, film), w)),
                            film.gamma_conv.weight)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# DASPP

def test_daspp_rates_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        DASPPStage(channels=4, rates=(2, 2))
    with pytest.raises(ValueError):
        DASPPStage(channels=4, rates=())


def test_daspp_residual_identity():
    block = PointwiseDASPP("t", DASPPStage(channels=2, rates=(1, 2)), seed=0)
    for layer in (block.point, *block.atrous):
        layer.weight.data = np.zeros_like(layer.weight.data)
        layer.bias.data = np.zeros_like(layer.bias.data)
    # final conv = identity
    block.final.weight.data = np.eye(2).reshape(2, 2, 1, 1)
    block.final.bias.data = np.zeros(2)
    f = Tensor(rand((2, 5, 6), 3))
    npt.assert_allclose(block(f).data, f.data, atol=1e-15)


def test_daspp_shape_preservation():
    block = PointwiseDASPP("t", DASPPStage(channels=8, rates=(2, 4, 8)), seed=1)
    f = Tensor(rand((8, 6, 10), 4))
    assert block(f).shape == (8, 6, 10)


def test_daspp_single_branch_reproduces_conv2d():
    # one dilation-1 branch, 1x1 branch zeroed, identity final conv: the
    # block output minus the residual equals a plain padded conv (ReLU made
    # inactive by a non-negative setup)
    block = PointwiseDASPP("t", DASPPStage(channels=1, rates=(1,)), seed=0)
    block.point.weight.data = np.zeros_like(block.point.weight.data)
    block.point.bias.data = np.zeros(1)
    kernel = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    block.atrous[0].weight.data = kernel.copy()
    block.atrous[0].bias.data = np.zeros(1)
    block.final.weight.data = np.ones((1, 1, 1, 1))
    block.final.bias.data = np.zeros(1)

    f = np.abs(rand((1, 3, 3), 5)) + 0.1  # positive input, positive kernel
    got = block(Tensor(f)).data - f
    want = conv2d(Tensor(f), Tensor(kernel), Tensor(np.zeros(1)), 1, 1, 1).data
    npt.assert_allclose(got, want, atol=1e-12)


def test_daspp_channel_mismatch():
    block = PointwiseDASPP("t", DASPPStage(channels=2, rates=(1,)), seed=0)
    with pytest.raises(ShapeError):
        block(Tensor(np.ones((3, 4, 4))))


# ---------------------------------------------------------------------------
# encoder / decoder stages

def test_encoder_halves_spatial_dims():
    x = Tensor(rand((3, 16, 32), 1))
    sizes = []
    for i in range(4):
        st = EncoderStage(f"e{i}", x.shape[0], 4, seed=i)
        x = st(x)
        sizes.append(x.shape[1:])
    assert sizes == [(8, 16), (4, 8), (2, 4), (1, 2)]


def test_decoder_doubles_spatial_dims():
    st = DecoderStage("d", in_ch=4, skip_ch=2, out_ch=3, seed=0)
    out = st(Tensor(rand((4, 2, 4), 2)), Tensor(rand((2, 4, 8), 3)))
    assert out.shape == (3, 4, 8)


def test_decoder_skip_mismatch():
    st = DecoderStage("d", 4, 2, 3, seed=0)
    with pytest.raises(ShapeError):
        st(Tensor(np.ones((4, 2, 4))), Tensor(np.ones((2, 5, 8))))


def test_conv_layer_param_registration():
    layer = Conv2dLayer("conv", 3, 4, 1, seed=0)
    names = [n for n, _ in layer.params()]
    assert names == ["conv.weight", "conv.bias"]
    assert sum(p.size for _, p in layer.params()) == 3 * 4 + 4


def test_encoder_decoder_roundtrip_gradient():
    rng = np.random.default_rng(6)
    enc = EncoderStage("e", 2, 3, seed=1)
    dec = DecoderStage("d", 3, 2, 2, seed=2)
    w = Tensor(rng.standard_normal((2, 4, 6)))

    def f(x):
        out = dec(enc(x), x)
        return reduce_sum(ew_mul(out, w))

    x0 = Tensor(rng.standard_normal((2, 4, 6)))
    y = f(x0)
    assert np.isfinite(y.data).all()
    assert finite_diff_check(f, x0) < 1e-5
