import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgcae import nn


def naive_conv(x, w, b):
    """Direct same-padding cross-correlation, one output at a time."""
    n, h, wd, _ = x.shape
    k, _, _, c_out = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, h, wd, c_out))
    for i in range(n):
        for r in range(h):
            for c in range(wd):
                patch = xp[i, r:r + k, c:c + k, :]
                for o in range(c_out):
                    out[i, r, c, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    return out


def naive_maxpool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), h=st.integers(1, 8), w=st.integers(1, 8), c_in=st.integers(1, 4),
       c_out=st.integers(1, 4), k=st.sampled_from([1, 3, 5]), seed=st.integers(0, 2**31))
def test_conv_matches_naive_oracle(n, h, w, c_in, c_out, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, h, w, c_in))
    wt = rng.normal(size=(k, k, c_in, c_out))
    b = rng.normal(size=c_out)
    np.testing.assert_allclose(nn.conv2d_forward(x, wt, b), naive_conv(x, wt, b), rtol=0, atol=1e-12)


def test_conv_single_image_and_kernel_delta():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 6, 3))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[1, 1, c, c] = 1.0
    np.testing.assert_array_equal(nn.conv2d_forward(x, w, np.zeros(3)), x)


def test_conv_channel_mismatch_names_layer():
    with pytest.raises(nn.ConfigurationError, match="enc1"):
        nn.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1), name="enc1")


@pytest.mark.parametrize("c_in,c_out", [(2, 3), (4, 1), (3, 3)])
def test_conv_backward_finite_difference(c_in, c_out):
    rng = np.random.default_rng(c_in * 10 + c_out)
    x = rng.normal(size=(2, 5, 4, c_in))
    w = rng.normal(size=(3, 3, c_in, c_out))
    b = rng.normal(size=c_out)
    g = rng.normal(size=(2, 5, 4, c_out))
    dx, dw, db = nn.conv2d_backward(g, x, w)
    sizes = [x.size, w.size, b.size]
    flat = np.concatenate([x.ravel(), w.ravel(), b])

    def f(v):
        xx = v[:sizes[0]].reshape(x.shape)
        ww = v[sizes[0]:sizes[0] + sizes[1]].reshape(w.shape)
        bb = v[sizes[0] + sizes[1]:]
        loss = float(np.sum(nn.conv2d_forward(xx, ww, bb) * g))
        return loss, np.concatenate([dx.ravel(), dw.ravel(), db])

    assert nn.gradient_check(f, flat, n_coords=flat.size) < 1e-6


def test_upconv_equals_upsample_then_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 5, 4))
    w = rng.normal(size=(5, 5, 4, 2))
    b = rng.normal(size=2)
    ref = nn.conv2d_forward(nn.upsample2x2_forward(x), w, b)
    np.testing.assert_allclose(nn.upconv2d_forward(x, w, b), ref, rtol=0, atol=1e-12)
    g = rng.normal(size=ref.shape)
    dx, dw, db = nn.upconv2d_backward(g, x, w)
    du, dw_ref, db_ref = nn.conv2d_backward(g, nn.upsample2x2_forward(x), w)
    np.testing.assert_allclose(dx, nn.upsample2x2_backward(du), atol=1e-11)
    np.testing.assert_allclose(dw, dw_ref, atol=1e-11)
    np.testing.assert_allclose(db, db_ref, atol=1e-12)


def test_maxpool_matches_oracle_and_routes_gradient():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 4, 3))
    out, idx = nn.maxpool2x2_forward(x)
    np.testing.assert_array_equal(out, naive_maxpool(x))
    g = rng.normal(size=out.shape)
    dx = nn.maxpool2x2_backward(g, idx)
    assert dx.shape == x.shape
    # gradient lands only on the argmax of each window
    np.testing.assert_allclose(dx.reshape(2, 3, 2, 2, 2, 3).sum(axis=(2, 4)), g)
    assert np.count_nonzero(dx) == g.size


def test_maxpool_ties_take_first_element():
    x = np.ones((1, 2, 2, 1))
    _, idx = nn.maxpool2x2_forward(x)
    dx = nn.maxpool2x2_backward(np.ones((1, 1, 1, 1)), idx)
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def test_maxpool_rejects_odd_size():
    with pytest.raises(nn.ConfigurationError):
        nn.maxpool2x2_forward(np.zeros((1, 5, 4, 1)))


def test_upsample_repeats_and_backward_sums():
    x = np.arange(4.0).reshape(1, 2, 2, 1)
    up = nn.upsample2x2_forward(x)
    assert up.shape == (1, 4, 4, 1)
    assert up[0, 1, 1, 0] == 0.0 and up[0, 3, 2, 0] == 3.0
    np.testing.assert_array_equal(nn.upsample2x2_backward(np.ones_like(up)), 4 * np.ones_like(x))


def test_dense_backward_finite_difference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(4, 3))
    dx, dw, db = nn.dense_backward(g, x, w)
    flat = np.concatenate([x.ravel(), w.ravel(), b])

    def f(v):
        out = nn.dense_forward(v[:24].reshape(4, 6), v[24:42].reshape(6, 3), v[42:])
        return float(np.sum(out * g)), np.concatenate([dx.ravel(), dw.ravel(), db])

    assert nn.gradient_check(f, flat, n_coords=flat.size) < 1e-6


def test_dense_shape_mismatch():
    with pytest.raises(nn.ConfigurationError):
        nn.dense_forward(np.zeros((2, 5)), np.zeros((4, 3)), np.zeros(3))


@pytest.mark.parametrize("act", ["relu", "sigmoid"])
def test_activation_backward(act):
    rng = np.random.default_rng(4)
    # keep inputs away from the ReLU kink
    x = rng.uniform(0.1, 2.0, size=20) * rng.choice([-1, 1], size=20)
    g = rng.normal(size=20)
    fwd = getattr(nn, act)
    back = getattr(nn, act + "_backward")
    dx = back(g, fwd(x))

    def f(v):
        return float(np.sum(fwd(v) * g)), dx

    assert nn.gradient_check(f, x, n_coords=20) < 1e-6


def test_sigmoid_is_stable_at_extremes():
    out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    z = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])
    p = nn.softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[1], 1 / 3)
    np.testing.assert_allclose(nn.softmax(z[0] + 50), p[0])


def test_crossentropy_uniform_logits():
    loss, grad = nn.softmax_crossentropy(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10), abs=1e-12)
    expected = np.full(10, 0.1)
    expected[3] -= 1
    np.testing.assert_allclose(grad, expected)


def test_crossentropy_gradient_and_label_check():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 4))
    y = np.array([0, 3, 1])
    _, g = nn.softmax_crossentropy(z, y)

    def f(v):
        return nn.softmax_crossentropy(v.reshape(3, 4), y)[0], g.ravel()

    assert nn.gradient_check(f, z.ravel(), n_coords=12) < 1e-6
    with pytest.raises(nn.ConfigurationError):
        nn.softmax_crossentropy(z, np.array([0, 4, 1]))


def test_mse_loss_and_gradient():
    loss, g = nn.mse_loss(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    assert loss == 5.0
    np.testing.assert_array_equal(g, [2.0, 4.0])
    with pytest.raises(nn.ConfigurationError):
        nn.mse_loss(np.zeros(2), np.zeros(3))


def test_sgd_step_and_length_check():
    np.testing.assert_array_equal(nn.sgd_step(np.ones(3), np.ones(3), 0.5), [0.5, 0.5, 0.5])
    with pytest.raises(nn.ConfigurationError):
        nn.sgd_step(np.ones(3), np.ones(2), 0.1)


def test_gradient_check_detects_wrong_gradient():
    def f(v):
        return float(np.sum(v ** 2)), 3 * v

    assert nn.gradient_check(f, np.ones(5), n_coords=5) > 0.1


def test_gradient_check_rejects_nonfinite_loss():
    with pytest.raises(FloatingPointError):
        nn.gradient_check(lambda v: (float("nan"), v), np.ones(3))


def test_param_vector_segments_roundtrip():
    pv = nn.ParamVector(np.arange(6.0), {"a": slice(0, 2), "b": slice(2, 6)})
    np.testing.assert_array_equal(pv.segment("b"), [2, 3, 4, 5])
    other = pv.copy()
    other.scatter(np.zeros(6))
    assert pv.gather()[5] == 5.0 and other.gather().sum() == 0.0


def test_layer_spec_param_counts():
    assert nn.LayerSpec("conv", 3, 3, 32, "c").param_count == 3 * 3 * 3 * 32 + 32
    assert nn.LayerSpec("dense", None, 200, 128, "d").param_count == 200 * 128 + 128
    assert nn.LayerSpec("maxpool", None, 4, 4, "p").param_count == 0
