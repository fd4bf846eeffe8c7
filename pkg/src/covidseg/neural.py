"""Minimal reverse-mode differentiation kernels for the segmentation network.

A "tensor4" is a plain numpy array of shape (batch, channels, rows, cols).
Ops are pure functions: forward passes return outputs (plus a cache where the
backward pass needs saved state), backward passes return exact adjoints.
Everything is dtype-polymorphic; training runs float32 (convolutions
accumulate in BLAS sgemm), gradient checks run the same code in float64.
Reductions for normalization statistics and parameter-gradient sums
accumulate in double precision regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

Tensor4 = np.ndarray


@dataclass(frozen=True)
class ConvSpec:
    """Shape-preserving zero-padded 2D convolution (cross-correlation)."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    dilation: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise DataError(f"only odd kernels preserve shape, got {self.kernel}")
        if self.dilation < 1:
            raise DataError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def padding(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return (self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


def _check_conv_shapes(x: Tensor4, w: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DataError(f"conv input shape {x.shape} incompatible with {spec}")
    if w.shape != spec.weight_shape:
        raise DataError(f"conv weight shape {w.shape}, expected {spec.weight_shape}")


def _pad_nhwc(x: Tensor4, ph: int, pw: int) -> np.ndarray:
    """NCHW input -> zero-padded channels-last copy (B, H+2ph, W+2pw, C)."""
    b, c, h, wd = x.shape
    out = np.zeros((b, h + 2 * ph, wd + 2 * pw, c), dtype=x.dtype)
    out[:, ph : ph + h, pw : pw + wd, :] = x.transpose(0, 2, 3, 1)
    return out


def _taps(spec: ConvSpec):
    kh, kw = spec.kernel
    d = spec.dilation
    return [(ki, kj, ki * d, kj * d) for ki in range(kh) for kj in range(kw)]


def conv2d_forward(x: Tensor4, w: np.ndarray, spec: ConvSpec, bias=None) -> Tensor4:
    """Dilated zero-padded cross-correlation; output spatial dims equal input dims.

    Internally channels-last: one gemm per kernel tap over contiguous windows.
    """
    _check_conv_shapes(x, w, spec)
    b, c, h, wd = x.shape
    o = spec.out_channels
    ph, pw = spec.padding
    xp = _pad_nhwc(x, ph, pw)

    out_flat = np.empty((b * h * wd, o), dtype=x.dtype)
    if bias is None:
        out_flat[:] = 0
    else:
        out_flat[:] = np.asarray(bias, dtype=x.dtype)[None, :]
    tmp = np.empty_like(out_flat)
    for ki, kj, oi, oj in _taps(spec):
        window = np.ascontiguousarray(xp[:, oi : oi + h, oj : oj + wd, :])
        # contiguous per-tap weight matrix keeps the product on the BLAS path
        w_tap = np.ascontiguousarray(w[:, :, ki, kj].T)
        np.matmul(window.reshape(b * h * wd, c), w_tap, out=tmp)
        out_flat += tmp
    return np.ascontiguousarray(out_flat.reshape(b, h, wd, o).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: Tensor4, w: np.ndarray, spec: ConvSpec, grad_out: Tensor4
) -> tuple[Tensor4, np.ndarray]:
    """Exact adjoints of conv2d_forward with respect to the input and the weights."""
    _check_conv_shapes(x, w, spec)
    if grad_out.shape != (x.shape[0], spec.out_channels, x.shape[2], x.shape[3]):
        raise DataError(f"grad_out shape {grad_out.shape} does not match forward output")
    b, c, h, wd = x.shape
    o = spec.out_channels
    ph, pw = spec.padding
    xp = _pad_nhwc(x, ph, pw)

    go_flat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(b * h * wd, o)
    grad_w = np.empty_like(w)
    grad_xp = np.zeros_like(xp)
    spread = np.empty((b * h * wd, c), dtype=grad_out.dtype)
    for ki, kj, oi, oj in _taps(spec):
        window = np.ascontiguousarray(xp[:, oi : oi + h, oj : oj + wd, :])
        grad_w[:, :, ki, kj] = go_flat.T @ window.reshape(b * h * wd, c)
        np.matmul(go_flat, np.ascontiguousarray(w[:, :, ki, kj]), out=spread)
        grad_xp[:, oi : oi + h, oj : oj + wd, :] += spread.reshape(b, h, wd, c)
    grad_x = np.ascontiguousarray(
        grad_xp[:, ph : ph + h, pw : pw + wd, :].transpose(0, 3, 1, 2)
    )
    return grad_x, grad_w


def instance_norm_forward(x: Tensor4, scale: np.ndarray, shift: np.ndarray, eps: float = 1e-5):
    """Normalize per (sample, channel) over spatial dims; y = scale*xhat + shift.

    Returns (y, cache) where cache feeds instance_norm_backward.
    """
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DataError(f"instance norm shapes: x {x.shape}, scale {scale.shape}, shift {shift.shape}")
    mean = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    centered = x - mean
    var = np.mean(centered * centered, axis=(2, 3), keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std
    y = scale[None, :, None, None] * xhat + shift[None, :, None, None]
    return y, (xhat, inv_std, scale)


def instance_norm_backward(cache, grad_y: Tensor4):
    """Adjoints of instance_norm_forward: (grad_x, grad_scale, grad_shift)."""
    xhat, inv_std, scale = cache
    grad_shift = grad_y.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_y.dtype)
    grad_scale = (grad_y * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(grad_y.dtype)
    g = grad_y * scale[None, :, None, None]
    g_mean = g.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(grad_y.dtype)
    gx_mean = (g * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(grad_y.dtype)
    grad_x = inv_std * (g - g_mean - xhat * gx_mean)
    return grad_x, grad_scale, grad_shift


def relu_forward(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(y: Tensor4, grad_y: Tensor4) -> Tensor4:
    # y is the forward *output*; the mask y > 0 equals x > 0
    return grad_y * (y > 0)


def residual_add_forward(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise DataError(f"residual add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def residual_add_backward(grad_out: Tensor4) -> tuple[Tensor4, Tensor4]:
    return grad_out, grad_out


def softmax2_forward(logits: Tensor4) -> Tensor4:
    """Stable softmax over the 2-class channel axis."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DataError(f"softmax2 expects 2 channels, got shape {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax2_backward(probs: Tensor4, grad_probs: Tensor4) -> Tensor4:
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter tensor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, mutating params and state in place.

    L2 regularization is applied by adding weight_decay * theta to the raw
    gradient before the moment updates. t is the 1-based step count.
    """
    if t < 1:
        raise DataError(f"adam step count must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
