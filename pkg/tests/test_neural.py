import numpy as np
import pytest

from covidseg.errors import DataError, NumericError
from covidseg.neural import (
    AdamState,
    ConvSpec,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    init_adam_state,
    instance_norm_backward,
    instance_norm_forward,
    relu_backward,
    relu_forward,
    residual_add_backward,
    residual_add_forward,
    softmax2_backward,
    softmax2_forward,
)

from gradcheck import TOL, check_grad


def conv_oracle(x, w, dilation):
    """Direct 7-nested-loop cross-correlation with zero padding."""
    batch, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    out = np.zeros((batch, cout, h, wd))
    for b in range(batch):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                ii = i + ki * dilation - ph
                                jj = j + kj * dilation - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[b, c, ii, jj] * w[o, c, ki, kj]
                    out[b, o, i, j] = acc
    return out


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv_matches_naive_oracle(rng, dilation):
    x = rng.standard_normal((2, 3, 9, 10))
    w = rng.standard_normal((4, 3, 3, 3))
    spec = ConvSpec(3, 4, (3, 3), dilation)
    got = conv2d_forward(x, w, spec)
    assert got.shape == (2, 4, 9, 10)  # shape preserved for any dilation
    assert np.allclose(got, conv_oracle(x, w, dilation), atol=1e-12)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d_forward(x, w, ConvSpec(3, 3, (1, 1), 1))
    assert np.array_equal(out, x)


def test_conv_zero_weights(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out = conv2d_forward(x, np.zeros((5, 2, 3, 3)), ConvSpec(2, 5, (3, 3), 1))
    assert (out == 0).all()


def test_conv_bias(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = np.zeros((2, 2, 1, 1))
    out = conv2d_forward(x, w, ConvSpec(2, 2, (1, 1), 1), bias=np.array([1.5, -2.0]))
    assert np.allclose(out[0, 0], 1.5) and np.allclose(out[0, 1], -2.0)


def test_conv_shape_errors(rng):
    x = rng.standard_normal((1, 3, 4, 4))
    with pytest.raises(DataError):
        conv2d_forward(x, np.zeros((2, 2, 3, 3)), ConvSpec(2, 2, (3, 3), 1))
    with pytest.raises(DataError):
        ConvSpec(2, 2, (2, 2), 1)  # even kernels cannot preserve shape


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv_backward_finite_difference(rng, dilation):
    for _ in range(10):
        x = rng.standard_normal((2, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        spec = ConvSpec(2, 3, (3, 3), dilation)
        upstream = rng.standard_normal((2, 3, 5, 6))
        grad_x, grad_w = conv2d_backward(x, w, spec, upstream)

        def loss():
            return float(np.sum(conv2d_forward(x, w, spec) * upstream))

        assert check_grad(loss, x, grad_x) < TOL
        assert check_grad(loss, w, grad_w) < TOL


def test_conv_backward_zero_and_linearity(rng):
    x = rng.standard_normal((1, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(2, 3, (3, 3), 2)
    gx0, gw0 = conv2d_backward(x, w, spec, np.zeros((1, 3, 4, 5)))
    assert (gx0 == 0).all() and (gw0 == 0).all()
    g = rng.standard_normal((1, 3, 4, 5))
    gx1, gw1 = conv2d_backward(x, w, spec, g)
    gx3, gw3 = conv2d_backward(x, w, spec, 3.0 * g)
    assert np.allclose(gx3, 3.0 * gx1) and np.allclose(gw3, 3.0 * gw1)


def test_instance_norm_finite_difference(rng):
    for _ in range(10):
        x = rng.standard_normal((2, 3, 4, 5))
        scale = rng.standard_normal(3)
        shift = rng.standard_normal(3)
        upstream = rng.standard_normal((2, 3, 4, 5))
        _, cache = instance_norm_forward(x, scale, shift)
        grad_x, grad_scale, grad_shift = instance_norm_backward(cache, upstream)

        def loss():
            return float(np.sum(instance_norm_forward(x, scale, shift)[0] * upstream))

        assert check_grad(loss, x, grad_x) < TOL
        assert check_grad(loss, scale, grad_scale) < TOL
        assert check_grad(loss, shift, grad_shift) < TOL


def test_instance_norm_normalizes(rng):
    x = rng.standard_normal((2, 3, 6, 7)) * 5 + 2
    y, _ = instance_norm_forward(x, np.ones(3), np.zeros(3))
    assert np.allclose(y.mean(axis=(2, 3)), 0, atol=1e-6)
    assert np.allclose(y.std(axis=(2, 3)), 1, atol=1e-3)


def test_relu_and_residual(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    y = relu_forward(x)
    assert (y >= 0).all()
    g = rng.standard_normal(x.shape)
    assert np.allclose(relu_backward(y, g), g * (x > 0))

    a, b = rng.standard_normal((2, 1, 2, 2)), rng.standard_normal((2, 1, 2, 2))
    assert np.allclose(residual_add_forward(a, b), a + b)
    ga, gb = residual_add_backward(g[:, :1, :2, :2])
    assert np.array_equal(ga, gb)
    with pytest.raises(DataError):
        residual_add_forward(a, b[:1])


def test_relu_finite_difference(rng):
    for _ in range(10):
        x = rng.standard_normal((2, 2, 4, 4)) + 0.05  # keep entries away from the kink
        upstream = rng.standard_normal(x.shape)
        y = relu_forward(x)
        grad = relu_backward(y, upstream)

        def loss():
            return float(np.sum(relu_forward(x) * upstream))

        assert check_grad(loss, x, grad) < TOL


def test_softmax2_values(rng):
    logits = np.zeros((1, 2, 2, 2))
    probs = softmax2_forward(logits)
    assert np.allclose(probs, 0.5)
    logits = rng.standard_normal((3, 2, 4, 5)) * 10
    probs = softmax2_forward(logits)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6
    with pytest.raises(DataError):
        softmax2_forward(np.zeros((1, 3, 2, 2)))


def test_softmax2_finite_difference(rng):
    for _ in range(10):
        logits = rng.standard_normal((2, 2, 3, 4))
        upstream = rng.standard_normal(logits.shape)
        probs = softmax2_forward(logits)
        grad = softmax2_backward(probs, upstream)

        def loss():
            return float(np.sum(softmax2_forward(logits) * upstream))

        assert check_grad(loss, logits, grad) < TOL


def test_adam_hand_example():
    # scalar, g=1, t=1, lr=0.1: bias-corrected update is exactly lr * 1/(1+eps)
    params = {"w": np.array([2.0])}
    state = init_adam_state(params)
    adam_step(params, {"w": np.array([1.0])}, state, t=1, lr=0.1)
    assert params["w"][0] == pytest.approx(2.0 - 0.1, abs=1e-6)


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = init_adam_state(params)
    adam_step(params, {"w": np.zeros(2)}, state, t=1, lr=0.5)
    assert np.array_equal(params["w"], [1.0, -2.0])


def test_adam_decay_pulls_toward_zero():
    params = {"w": np.array([1.0, -1.0])}
    state = init_adam_state(params)
    for t in range(1, 20):
        adam_step(params, {"w": np.zeros(2)}, state, t, lr=0.05, weight_decay=0.1)
    assert abs(params["w"][0]) < 1.0 and abs(params["w"][1]) < 1.0
    assert params["w"][0] > 0 > params["w"][1]  # shrinks, does not overshoot sign


def test_adam_rejects_non_finite():
    params = {"w": np.array([1.0])}
    state = init_adam_state(params)
    with pytest.raises(NumericError, match="w"):
        adam_step(params, {"w": np.array([np.nan])}, state, 1, 0.1)


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    spec = ConvSpec(3, 4, (3, 3), 2)
    a = conv2d_forward(x, w, spec)
    b = conv2d_forward(x, w, spec)
    assert a.tobytes() == b.tobytes()
