"""Dense forward/backward kernels used by the network.

Tensors are plain ``numpy.ndarray`` objects (row-major, explicit shape).
Every kernel is deterministic: argmax ties resolve to the lowest flat index
and all reductions run in a fixed order.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value reaches a place that forbids it."""


def check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))
        raise NumericalError(
            f"{name}: {len(bad)} non-finite value(s), first at index "
            f"{tuple(int(i) for i in bad[0])} (shape {x.shape})"
        )


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(
    a: np.ndarray, b: np.ndarray, grad_c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if grad_c.shape != (a.shape[0], b.shape[1]) or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul_backward: a {a.shape}, b {b.shape}, grad_c {grad_c.shape}"
        )
    return grad_c @ b.T, a.T @ grad_c


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Return columns shaped (Cin, kh, kw, H', W') over the padded input."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Cross-correlate ``x`` (Cin, H, W) with ``kernels`` (Cout, Cin, kh, kw)."""
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs kernels {kernels.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    _, h, w = x.shape
    cout, cin, kh, kw = kernels.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{w + 2 * pad}"
        )
    cols = _im2col(x, kh, kw, stride, pad)
    ho, wo = cols.shape[3:]
    out = kernels.reshape(cout, -1) @ cols.reshape(cin * kh * kw, ho * wo)
    out += bias[:, None]
    return out.reshape(cout, ho, wo)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias."""
    cin, h, w = x.shape
    cout, _, kh, kw = kernels.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    if grad_out.shape != (cout, ho, wo):
        raise ShapeError(
            f"conv2d_backward: grad_out {grad_out.shape}, expected {(cout, ho, wo)}"
        )
    cols = _im2col(x, kh, kw, stride, pad)
    g2 = grad_out.reshape(cout, ho * wo)
    grad_kernels = (g2 @ cols.reshape(cin * kh * kw, ho * wo).T).reshape(kernels.shape)
    grad_bias = g2.sum(axis=1)
    grad_cols = (kernels.reshape(cout, -1).T @ g2).reshape(cin, kh, kw, ho, wo)
    grad_xp = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += grad_cols[:, i, j]
    grad_x = grad_xp[:, pad : pad + h, pad : pad + w] if pad else grad_xp
    return np.ascontiguousarray(grad_x), grad_kernels, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2d(
    x: np.ndarray, kh: int, kw: int, stride: int, ceil_mode: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed max over each channel of ``x`` (C, H, W).

    Returns the pooled map and, for every output element, the flat index
    into ``x`` of the winning input element. With ``ceil_mode`` the last
    row/column of windows may hang over the border and only covers the
    in-bounds part (output size ``ceil((H - kh) / stride) + 1``).
    """
    c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"maxpool2d: window {kh}x{kw} exceeds input {h}x{w}")
    if ceil_mode:
        ho = -(-(h - kh) // stride) + 1
        wo = -(-(w - kw) // stride) + 1
    else:
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    hp = (ho - 1) * stride + kh
    wp = (wo - 1) * stride + kw
    if hp > h or wp > w:
        xp = np.full((c, max(hp, h), max(wp, w)), -np.inf, dtype=x.dtype)
        xp[:, :h, :w] = x
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(c, ho, wo, kh * kw)
    local = win.argmax(axis=3)
    out = np.take_along_axis(win, local[..., None], axis=3)[..., 0]
    dy, dx = np.divmod(local, kw)
    ys = np.arange(ho)[None, :, None] * stride + dy
    xs = np.arange(wo)[None, None, :] * stride + dx
    argmax = (np.arange(c)[:, None, None] * h + ys) * w + xs
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(
    argmax: np.ndarray, grad_out: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    """Route each output gradient to its recorded winner (additively)."""
    size = int(np.prod(input_shape))
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype, copy=False).reshape(input_shape)


def sgd_update(
    param: np.ndarray,
    grad: np.ndarray,
    momentum_buf: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place momentum SGD step with L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``.
    """
    check_finite("sgd_update grad", grad)
    momentum_buf *= momentum
    momentum_buf += grad
    if weight_decay:
        momentum_buf += weight_decay * param
    param -= lr * momentum_buf
