"""Minimal deterministic numerical engine for the fixed denoising network.

Tensors are numpy arrays in (batch, channel, height, width) layout.  The
engine runs in 32-bit floats for production; ``set_default_dtype`` switches
new allocations to 64-bit for verification.  Convolution dispatches on the
input dtype:

* float32: im2col + single BLAS GEMM per layer (the production hot path,
  with a 1x1 fast path and thread-local workspace buffers).
* float64: an order-preserving kernel whose per-element accumulation order
  is identical to the six-loop reference, so outputs are bitwise equal to
  ``conv2d_forward_naive`` / ``conv2d_backward_naive``.  Compiled with
  numba when available, with an equivalent numpy fallback.

Reduction orders are fixed everywhere, so identical inputs give bitwise
identical outputs across runs on the same build.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def set_default_dtype(dtype) -> None:
    """Select the engine-wide float width for new allocations."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported engine dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the engine dtype (used by verification tests)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def as_nchw(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has empty dimension: shape {x.shape}")
    return x


@dataclass
class ConvLayer:
    """One convolution layer: weights (out, in, kh, kw), bias, zero padding."""

    weights: np.ndarray
    bias: np.ndarray
    padding: int
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be (out, in, kh, kw), got {self.weights.shape}")
        out_ch, _, kh, kw = self.weights.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ValueError(f"kernel size {kh}x{kw} unsupported (1x1 or 3x3 only)")
        if self.padding != (kh - 1) // 2:
            raise ValueError(f"padding {self.padding} does not preserve size for {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias must have shape ({out_ch},), got {self.bias.shape}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class AdamState:
    """Adam moments for one parameter tensor (lr 0.001, betas 0.9/0.999, eps 1e-8)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, lr: float = 0.001) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), lr=lr)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam update, in place; returns the updated parameter array."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"param/grad/state shapes differ: {param.shape} vs {grad.shape} vs {state.m.shape}"
        )
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    m_hat = state.m / bias1
    v_hat = state.v / bias2
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


# ---------------------------------------------------------------------------
# activations and losses
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].

    Computed in the fused form max(z,0) - z*t + log1p(exp(-|z|)), which
    equals sigmoid-then-BCE exactly but never overflows.  Returns
    (loss, grad_logits) with grad = (sigmoid(z) - t) / N.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.shape != target.shape:
        raise ShapeError(f"logits shape {logits.shape} != target shape {target.shape}")
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise ValueError("BCE targets must lie in [0, 1]")
    z = logits
    per_elem = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_elem.mean())
    grad = (sigmoid(z) - target) / z.size
    return loss, grad.astype(logits.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error; returns (loss, grad_pred) with grad 2(p-t)/N."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / pred.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


# ---------------------------------------------------------------------------
# convolution: shared plumbing
# ---------------------------------------------------------------------------

_workspace = threading.local()


def _buf(key, shape, dtype) -> np.ndarray:
    """Thread-local scratch buffer, reused across calls with equal shapes."""
    store = getattr(_workspace, "bufs", None)
    if store is None:
        store = _workspace.bufs = {}
    buf = store.get(key)
    if buf is None or buf.shape != shape or buf.dtype != dtype:
        buf = np.empty(shape, dtype=dtype)
        store[key] = buf
    return buf


def clear_workspace() -> None:
    if hasattr(_workspace, "bufs"):
        _workspace.bufs.clear()


def _check_conv_args(x: np.ndarray, layer: ConvLayer, name="input") -> np.ndarray:
    x = as_nchw(x, name)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{name} has {x.shape[1]} channels but layer expects {layer.in_channels}"
        )
    if x.dtype != layer.weights.dtype:
        raise ShapeError(f"{name} dtype {x.dtype} != layer dtype {layer.weights.dtype}")
    return x


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    xp = _buf(("pad", x.shape, pad), (n, c, h + 2 * pad, w + 2 * pad), x.dtype)
    xp.fill(0)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _apply_activation(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0)
    return pre.copy()


# ---------------------------------------------------------------------------
# convolution: float32 production path (im2col + GEMM)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, out_buf: np.ndarray) -> np.ndarray:
    """Gather kh*kw shifted views of the padded input into (c*kh*kw, n*h*w)."""
    n, c, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, h, w),
        strides=(sc, sh, sw, sn, sh, sw),
        writeable=False,
    )
    cols = out_buf.reshape(c, kh, kw, n, h, w)
    np.copyto(cols, patches)
    return out_buf


def _forward_gemm(x: np.ndarray, layer: ConvLayer):
    n, c, h, w = x.shape
    out_ch = layer.out_channels
    kh, kw = layer.weights.shape[2:]
    w_mat = layer.weights.reshape(out_ch, -1)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    else:
        xp = _pad_input(x, layer.padding)
        cols = _buf(("cols", x.shape, kh), (c * kh * kw, n * h * w), x.dtype)
        _im2col(xp, kh, kw, cols)
    pre = np.matmul(w_mat, cols)
    pre += layer.bias[:, None]
    pre = pre.reshape(out_ch, n, h, w).transpose(1, 0, 2, 3).copy()
    return pre


def _backward_gemm(grad_pre: np.ndarray, x: np.ndarray, layer: ConvLayer, need_grad_input: bool):
    n, c, h, w = x.shape
    out_ch = layer.out_channels
    kh, kw = layer.weights.shape[2:]
    pad = layer.padding
    gp_mat = np.ascontiguousarray(grad_pre.transpose(1, 0, 2, 3)).reshape(out_ch, n * h * w)
    grad_bias = gp_mat.sum(axis=1)

    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    else:
        xp = _pad_input(x, pad)
        cols = _buf(("cols", x.shape, kh), (c * kh * kw, n * h * w), x.dtype)
        _im2col(xp, kh, kw, cols)
    grad_w = np.matmul(gp_mat, cols.T).reshape(layer.weights.shape)

    grad_input = None
    if need_grad_input:
        w_mat = layer.weights.reshape(out_ch, -1)
        grad_cols = np.matmul(w_mat.T, gp_mat)
        if kh == 1 and kw == 1:
            grad_input = np.ascontiguousarray(
                grad_cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            )
        else:
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            gc = grad_cols.reshape(c, kh, kw, n, h, w)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, :, dy : dy + h, dx : dx + w] += gc[:, dy, dx].transpose(1, 0, 2, 3)
            grad_input = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
    return grad_input, grad_w, grad_bias


# ---------------------------------------------------------------------------
# convolution: float64 order-preserving path
#
# Accumulation order per output element is (in_ch, then ky, then kx) for the
# forward, (out_ch, ky, kx) for input gradients and (batch, y, x) for weight
# and bias gradients -- exactly the orders of the naive reference below, so
# results agree bitwise.
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True, parallel=True, fastmath=False)
    def _nb_forward(xp, w, bias, out):
        n, ci, hp, wp = xp.shape
        co, _, kh, kw = w.shape
        h = hp - kh + 1
        wo = wp - kw + 1
        for bo in prange(n * co):
            b = bo // co
            o = bo % co
            acc = np.empty((h, wo), dtype=xp.dtype)
            for y in range(h):
                for x in range(wo):
                    acc[y, x] = bias[o]
            for i in range(ci):
                for dy in range(kh):
                    for dx in range(kw):
                        wv = w[o, i, dy, dx]
                        for y in range(h):
                            xrow = xp[b, i, y + dy]
                            arow = acc[y]
                            for x in range(wo):
                                arow[x] += xrow[x + dx] * wv
            out[b, o] = acc

    @njit(cache=True, parallel=True, fastmath=False)
    def _nb_grad_input(gp, w, gx, pad):
        n, co, h, wo = gp.shape
        _, ci, kh, kw = w.shape
        for bi in prange(n * ci):
            b = bi // ci
            i = bi % ci
            for py in range(h):
                for px in range(wo):
                    acc = 0.0
                    for o in range(co):
                        for dy in range(kh):
                            y = py + pad - dy
                            if y < 0 or y >= h:
                                continue
                            for dx in range(kw):
                                x = px + pad - dx
                                if 0 <= x < wo:
                                    acc += gp[b, o, y, x] * w[o, i, dy, dx]
                    gx[b, i, py, px] = acc

    @njit(cache=True, parallel=True, fastmath=False)
    def _nb_grad_weights(gp, xp, gw):
        n, co, h, wo = gp.shape
        ci = xp.shape[1]
        kh = gw.shape[2]
        kw = gw.shape[3]
        for oi in prange(co * ci):
            o = oi // ci
            i = oi % ci
            for dy in range(kh):
                for dx in range(kw):
                    acc = 0.0
                    for b in range(n):
                        for y in range(h):
                            grow = gp[b, o, y]
                            xrow = xp[b, i, y + dy]
                            for x in range(wo):
                                acc += grow[x] * xrow[x + dx]
                    gw[o, i, dy, dx] = acc

    @njit(cache=True, parallel=True, fastmath=False)
    def _nb_grad_bias(gp, gb):
        n, co, h, wo = gp.shape
        for o in prange(co):
            acc = 0.0
            for b in range(n):
                for y in range(h):
                    for x in range(wo):
                        acc += gp[b, o, y, x]
            gb[o] = acc


def _forward_exact(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    n, c, h, w = x.shape
    kh, kw = layer.weights.shape[2:]
    xp = np.ascontiguousarray(_pad_input(x, layer.padding))
    pre = np.empty((n, layer.out_channels, h, w), dtype=x.dtype)
    if _HAVE_NUMBA:
        _nb_forward(xp, np.ascontiguousarray(layer.weights), layer.bias, pre)
    else:
        pre[:] = layer.bias[None, :, None, None]
        for i in range(c):
            for dy in range(kh):
                for dx in range(kw):
                    pre += (
                        xp[:, i, dy : dy + h, dx : dx + w][:, None]
                        * layer.weights[:, i, dy, dx][None, :, None, None]
                    )
    return pre


def _backward_exact(grad_pre: np.ndarray, x: np.ndarray, layer: ConvLayer, need_grad_input: bool):
    n, c, h, w = x.shape
    out_ch = layer.out_channels
    kh, kw = layer.weights.shape[2:]
    pad = layer.padding
    gp = np.ascontiguousarray(grad_pre)
    xp = np.ascontiguousarray(_pad_input(x, pad))
    weights = np.ascontiguousarray(layer.weights)

    grad_w = np.empty_like(layer.weights)
    grad_b = np.empty_like(layer.bias)
    if _HAVE_NUMBA:
        _nb_grad_weights(gp, xp, grad_w)
        _nb_grad_bias(gp, grad_b)
    else:
        for o in range(out_ch):
            acc = 0.0
            for b in range(n):
                for y in range(h):
                    for xx in range(w):
                        acc += float(gp[b, o, y, xx])
            grad_b[o] = acc
        for o in range(out_ch):
            for i in range(c):
                for dy in range(kh):
                    for dx in range(kw):
                        acc = 0.0
                        for b in range(n):
                            for y in range(h):
                                for xx in range(w):
                                    acc += float(gp[b, o, y, xx]) * float(xp[b, i, y + dy, xx + dx])
                        grad_w[o, i, dy, dx] = acc

    grad_input = None
    if need_grad_input:
        grad_input = np.empty_like(x)
        if _HAVE_NUMBA:
            _nb_grad_input(gp, weights, grad_input, pad)
        else:
            for b in range(n):
                for i in range(c):
                    for py in range(h):
                        for px in range(w):
                            acc = 0.0
                            for o in range(out_ch):
                                for dy in range(kh):
                                    y = py + pad - dy
                                    if not 0 <= y < h:
                                        continue
                                    for dx in range(kw):
                                        xx = px + pad - dx
                                        if 0 <= xx < w:
                                            acc += float(gp[b, o, y, xx]) * float(
                                                weights[o, i, dy, dx]
                                            )
                            grad_input[b, i, py, px] = acc
    return grad_input, grad_w, grad_b


# ---------------------------------------------------------------------------
# public convolution ops
# ---------------------------------------------------------------------------


def conv2d_forward(x, layer: ConvLayer, return_preact: bool = False):
    """Spatial-size-preserving 2-D convolution plus the layer's activation.

    out[b,o,y,x] = bias[o] + sum_{i,dy,dx} x_padded[b,i,y+dy,x+dx] * w[o,i,dy,dx]

    With ``return_preact`` the pre-activation tensor is returned alongside
    (needed to backpropagate through the ReLU mask).
    """
    x = _check_conv_args(x, layer)
    if x.dtype == np.float64:
        pre = _forward_exact(x, layer)
    else:
        pre = _forward_gemm(x, layer)
    out = _apply_activation(pre, layer.activation)
    if return_preact:
        return out, pre
    return out


def conv2d_backward(grad_out, saved_input, layer: ConvLayer, preact=None, need_grad_input=True):
    """Exact gradients of a scalar loss through conv2d_forward.

    ``preact`` is the saved pre-activation from the forward pass; it is
    recomputed when omitted.  Returns (grad_input, grad_weights, grad_bias);
    grad_input is None when ``need_grad_input`` is false.
    """
    x = _check_conv_args(saved_input, layer, name="saved_input")
    grad_out = as_nchw(grad_out, "grad_out").astype(x.dtype, copy=False)
    n, _, h, w = x.shape
    expect = (n, layer.out_channels, h, w)
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expect}")
    if layer.activation == "relu":
        if preact is None:
            preact = conv2d_forward(x, layer, return_preact=True)[1]
        grad_pre = grad_out * (preact > 0)
    else:
        grad_pre = grad_out
    if x.dtype == np.float64:
        return _backward_exact(grad_pre, x, layer, need_grad_input)
    return _backward_gemm(grad_pre, x, layer, need_grad_input)


# ---------------------------------------------------------------------------
# naive six-loop reference (test oracle; accumulates in float64)
# ---------------------------------------------------------------------------


def conv2d_forward_naive(x, layer: ConvLayer, return_preact: bool = False):
    """Direct-definition convolution used as the equivalence oracle.

    Per output element the accumulator runs over (in_ch, ky, kx) in order,
    in float64; with float64 inputs the optimized path must agree bitwise.
    """
    x = _check_conv_args(x, layer)
    n, c, h, w = x.shape
    kh, kw = layer.weights.shape[2:]
    pad = layer.padding
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    weights, bias = layer.weights, layer.bias
    pre = np.empty((n, layer.out_channels, h, w), dtype=x.dtype)
    for b in range(n):
        for o in range(layer.out_channels):
            for y in range(h):
                for xx in range(w):
                    acc = float(bias[o])
                    for i in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += float(xp[b, i, y + dy, xx + dx]) * float(
                                    weights[o, i, dy, dx]
                                )
                    pre[b, o, y, xx] = acc
    out = _apply_activation(pre, layer.activation)
    if return_preact:
        return out, pre
    return out


def conv2d_backward_naive(grad_out, saved_input, layer: ConvLayer, preact=None):
    """Loop-reference gradients matching conv2d_backward's contract."""
    x = _check_conv_args(saved_input, layer, name="saved_input")
    grad_out = as_nchw(grad_out, "grad_out")
    n, c, h, w = x.shape
    kh, kw = layer.weights.shape[2:]
    pad = layer.padding
    if layer.activation == "relu":
        if preact is None:
            preact = conv2d_forward_naive(x, layer, return_preact=True)[1]
        gp = grad_out * (preact > 0)
    else:
        gp = grad_out
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    weights = layer.weights

    grad_b = np.empty_like(layer.bias)
    for o in range(layer.out_channels):
        acc = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    acc += float(gp[b, o, y, xx])
        grad_b[o] = acc

    grad_w = np.empty_like(weights)
    for o in range(layer.out_channels):
        for i in range(c):
            for dy in range(kh):
                for dx in range(kw):
                    acc = 0.0
                    for b in range(n):
                        for y in range(h):
                            for xx in range(w):
                                acc += float(gp[b, o, y, xx]) * float(xp[b, i, y + dy, xx + dx])
                    grad_w[o, i, dy, dx] = acc

    grad_input = np.empty_like(x)
    for b in range(n):
        for i in range(c):
            for py in range(h):
                for px in range(w):
                    acc = 0.0
                    for o in range(layer.out_channels):
                        for dy in range(kh):
                            y = py + pad - dy
                            if not 0 <= y < h:
                                continue
                            for dx in range(kw):
                                xx = px + pad - dx
                                if 0 <= xx < w:
                                    acc += float(gp[b, o, y, xx]) * float(weights[o, i, dy, dx])
                    grad_input[b, i, py, px] = acc
    return grad_input, grad_w, grad_b
