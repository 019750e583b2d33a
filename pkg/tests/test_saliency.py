import math

import numpy as np
import numpy.testing as npt
import pytest

from xdkd.saliency import (
    DistillationError,
    NORM_EPS,
    SaliencyBundle,
    gradcam_weights,
    normalize_map,
    render_saliency_maps,
    saliency_map,
    xkd_loss,
)
from xdkd.tensor import Tensor, backward, ew_mul, new_tape, reduce_sum


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# scalar-loop oracle, independent of the tensor stack

def oracle_alpha(dphi):
    c = dphi.shape[0]
    return [sum(dphi[ci].reshape(-1)) / dphi[ci].size for ci in range(c)]


def oracle_map(feat, alpha):
    h, w = feat.shape[1:]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            v = 0.0
            for ci in range(feat.shape[0]):
                v += alpha[ci] * feat[ci, i, j]
            out[i, j] = max(v, 0.0)
    return out


def oracle_normalize(m):
    v = m.reshape(-1)
    norm = math.sqrt(sum(x * x for x in v))
    return np.array([x / (norm + NORM_EPS) for x in v])


def oracle_xkd(feats_s, dphis_s, feats_t, dphis_t):
    total = 0.0
    for fs, gs, ft, gt in zip(feats_s, dphis_s, feats_t, dphis_t):
        vs = oracle_normalize(oracle_map(fs, oracle_alpha(gs)))
        vt = oracle_normalize(oracle_map(ft, oracle_alpha(gt)))
        total += 1.0 - float(np.dot(vs, vt))
    return total / len(feats_s)


# ---------------------------------------------------------------------------
# building bundles with known dphi/dF: phi = sum(w * F) makes dphi/dF = w

def make_bundle(seed, layers=("a", "b"), c=3, h=2, w=2):
    rng = np.random.default_rng(seed)
    new_tape()
    student_feats, teacher_feats = {}, {}
    ws, wt = {}, {}
    phi_s = None
    phi_t = None
    for name in layers:
        fs = Tensor(rng.standard_normal((c, h, w)), requires_grad=True)
        ft = Tensor(rng.standard_normal((c, h, w)), requires_grad=True)
        ws[name] = rng.standard_normal((c, h, w))
        wt[name] = rng.standard_normal((c, h, w))
        ts = reduce_sum(ew_mul(fs, Tensor(ws[name])))
        tt = reduce_sum(ew_mul(ft, Tensor(wt[name])))
        phi_s = ts if phi_s is None else phi_s + ts
        phi_t = tt if phi_t is None else phi_t + tt
        student_feats[name] = fs
        teacher_feats[name] = ft
    bundle = SaliencyBundle(layers=tuple(layers), student_feats=student_feats,
                            teacher_feats=teacher_feats, phi_student=phi_s,
                            phi_teacher=phi_t)
    return bundle, ws, wt


# ---------------------------------------------------------------------------
# unit pieces

def test_gradcam_weights_constant_gradient():
    g = np.ones((3, 4, 5)) * np.array([1.0, -2.0, 0.5])[:, None, None]
    npt.assert_allclose(gradcam_weights(Tensor(np.zeros((3, 4, 5))), Tensor(g)).data,
                        [1.0, -2.0, 0.5])


def test_gradcam_weights_zero():
    out = gradcam_weights(Tensor(rand((2, 3, 3))), Tensor(np.zeros((2, 3, 3))))
    npt.assert_array_equal(out.data, [0.0, 0.0])


def test_gradcam_weights_matches_oracle():
    g = rand((3, 2, 2), 5)
    npt.assert_allclose(gradcam_weights(Tensor(np.zeros((3, 2, 2))), Tensor(g)).data,
                        oracle_alpha(g), atol=1e-15)


def test_saliency_map_relu_clamps():
    f = -np.abs(rand((1, 3, 3), 1)) - 0.1
    out = saliency_map(Tensor(f), Tensor([1.0]))
    npt.assert_array_equal(out.data, np.zeros((3, 3)))


def test_saliency_map_identity_on_nonnegative():
    f = np.abs(rand((1, 3, 3), 2))
    npt.assert_array_equal(saliency_map(Tensor(f), Tensor([1.0])).data, f[0])


def test_saliency_map_matches_oracle():
    f = rand((2, 2, 2), 3)
    alpha = [1.0, -1.0]
    got = saliency_map(Tensor(f), Tensor(alpha)).data
    npt.assert_allclose(got, oracle_map(f, alpha), atol=1e-15)
    assert (got >= 0).all()


def test_normalize_345():
    out = normalize_map(Tensor([[3.0, 4.0]]))
    npt.assert_allclose(out.data, [0.6, 0.8], atol=1e-9)


def test_normalize_zero_map_stays_zero():
    out = normalize_map(Tensor(np.zeros((2, 2))))
    npt.assert_array_equal(out.data, np.zeros(4))
    assert np.isfinite(out.data).all()


def test_normalize_norm_close_to_one():
    v = normalize_map(Tensor(np.abs(rand((4, 4), 4)) + 0.1)).data
    assert 1 - 1e-6 <= np.linalg.norm(v) <= 1.0


def test_normalize_scale_invariance():
    m = np.abs(rand((3, 3), 6)) + 0.5
    a = normalize_map(Tensor(m)).data
    b = normalize_map(Tensor(123.45 * m)).data
    npt.assert_allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------------------
# the loss

def test_xkd_identical_maps_loss_zero():
    bundle, _, _ = make_bundle(0, layers=("a",))
    # teacher mirrors the student exactly
    bundle.teacher_feats["a"].data = bundle.student_feats["a"].data.copy()
    new_tape()
    b2, _, _ = make_bundle(0, layers=("a",))
    b2.teacher_feats["a"].data = b2.student_feats["a"].data.copy()
    # rebuild phi with equal weights on both sides so dphi matches too
    rng = np.random.default_rng(99)
    w = rng.standard_normal((3, 2, 2))
    new_tape()
    fs = Tensor(rand((3, 2, 2), 7), requires_grad=True)
    ft = Tensor(fs.data.copy(), requires_grad=True)
    bundle = SaliencyBundle(
        layers=("a",), student_feats={"a": fs}, teacher_feats={"a": ft},
        phi_student=reduce_sum(ew_mul(fs, Tensor(w))),
        phi_teacher=reduce_sum(ew_mul(ft, Tensor(w))))
    assert abs(xkd_loss(bundle).item()) < 1e-6  # eps guard keeps it just above 0


def test_xkd_disjoint_support_loss_one():
    new_tape()
    fs = Tensor(np.array([[[2.0, 0.0], [0.0, 0.0]]]), requires_grad=True)
    ft = Tensor(np.array([[[0.0, 0.0], [0.0, 3.0]]]), requires_grad=True)
    bundle = SaliencyBundle(
        layers=("a",), student_feats={"a": fs}, teacher_feats={"a": ft},
        phi_student=reduce_sum(ew_mul(fs, Tensor(np.ones((1, 2, 2))))),
        phi_teacher=reduce_sum(ew_mul(ft, Tensor(np.ones((1, 2, 2))))))
    npt.assert_allclose(xkd_loss(bundle).item(), 1.0, atol=1e-12)


def test_xkd_both_maps_zero_gives_one():
    # all-negative features under positive weights: both maps ReLU to zero
    new_tape()
    fs = Tensor(-np.abs(rand((2, 2, 2), 8)) - 0.1, requires_grad=True)
    ft = Tensor(-np.abs(rand((2, 2, 2), 9)) - 0.1, requires_grad=True)
    ones = Tensor(np.ones((2, 2, 2)))
    bundle = SaliencyBundle(
        layers=("a",), student_feats={"a": fs}, teacher_feats={"a": ft},
        phi_student=reduce_sum(ew_mul(fs, ones)),
        phi_teacher=reduce_sum(ew_mul(ft, ones)))
    npt.assert_allclose(xkd_loss(bundle).item(), 1.0, atol=1e-12)


def test_xkd_matches_scalar_oracle():
    for seed in range(8):
        bundle, ws, wt = make_bundle(seed)
        got = xkd_loss(bundle).item()
        want = oracle_xkd(
            [bundle.student_feats[n].data for n in bundle.layers],
            [ws[n] for n in bundle.layers],
            [bundle.teacher_feats[n].data for n in bundle.layers],
            [wt[n] for n in bundle.layers])
        assert abs(got - want) < 1e-10


def test_xkd_range_many_random_bundles():
    for seed in range(300):
        bundle, _, _ = make_bundle(seed, layers=("a",), c=2, h=2, w=2)
        v = xkd_loss(bundle).item()
        assert 0.0 <= v <= 1.0


def test_xkd_empty_layers_error():
    bundle, _, _ = make_bundle(0)
    bundle = SaliencyBundle(layers=(), student_feats={}, teacher_feats={},
                            phi_student=bundle.phi_student,
                            phi_teacher=bundle.phi_teacher)
    with pytest.raises(DistillationError, match="no distillation layers"):
        xkd_loss(bundle)


def test_xkd_gradients_reach_student_only():
    # a layer whose map ReLUs to all-zero legitimately gets a zero gradient,
    # so only require that some student gradient flows; teacher gradients
    # must be exactly zero on every layer
    any_student = False
    for seed in (13, 14, 15):
        bundle, _, _ = make_bundle(seed)
        backward(xkd_loss(bundle))
        for name in bundle.layers:
            fs = bundle.student_feats[name]
            ft = bundle.teacher_feats[name]
            any_student |= fs.grad is not None and bool(np.any(fs.grad != 0))
            assert ft.grad is None or not np.any(ft.grad != 0)
    assert any_student


def test_render_saliency_maps_nonnegative():
    new_tape()
    f = Tensor(rand((3, 4, 4), 20), requires_grad=True)
    phi = reduce_sum(ew_mul(f, Tensor(rand((3, 4, 4), 21))))
    maps = render_saliency_maps(phi, {"layer": f}, ["layer"], source="student")
    assert maps["layer"].source == "student"
    assert (maps["layer"].values >= 0).all()
