"""Differentiable primitive operations on :class:`Tensor`.

Elementwise arithmetic broadcasts numpy-style; reductions take an axis or
axis tuple. Max selections route their gradient to the argmax element,
breaking ties at the lowest linear (row-major) index, which keeps training
deterministic. Shape preconditions are validated eagerly and violations
raise :class:`ShapeError` with the offending dimensions.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import ShapeError, Tensor, as_tensor, grad_enabled, is_checked

__all__ = [
    "add", "sub", "mul", "div", "neg", "exp", "sqrt", "relu", "softplus",
    "tsum", "tmean", "tmax", "matmul", "reshape", "transpose", "concat",
    "index_select", "conv2d", "max_pool2d", "global_max_pool",
    "adaptive_avg_pool2d", "bilinear_upsample", "batch_norm2d",
]


def _check_input(*tensors: Tensor):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError("non-finite value at op boundary (checked mode)")


def _result(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if is_checked():
        _check_input(*inputs)
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    data = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _result(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def sqrt(a) -> Tensor:
    """Elementwise square root; gradient is unbounded at 0, callers guard."""
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (g * (0.5 / data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    """log(1 + e^x), numerically stable; smooth positive reparameterization."""
    a = as_tensor(a)
    data = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(data, (a,), lambda g: (g * sig,))


# --- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _result(data, (a,), vjp)


def tmax(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first (lowest-index) argmax."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    data = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        data = np.squeeze(data, axis=ax)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, ax), g, axis=ax)
        return (ga,)

    return _result(data, (a,), vjp)


# --- linear algebra / structure -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, vjp)


def index_select(a, axis: int, indices) -> Tensor:
    """Gather slices along ``axis``; gradient scatter-adds back (duplicates sum)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _result(data, (a,), vjp)


# --- convolution and pooling ----------------------------------------------------

def _as_batched(a: Tensor):
    if a.ndim == 3:
        return reshape(a, (1,) + a.shape), True
    if a.ndim == 4:
        return a, False
    raise ShapeError(f"expected a 3-D (C,H,W) or 4-D (N,C,H,W) tensor, got {a.shape}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N,C_in,H,W) with (C_out,C_in,k,k) kernels.

    A 3-D input (C,H,W) is treated as a single sample and returns 3-D.
    Output spatial size is floor((H + 2*padding - k)/stride) + 1.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    xb, squeeze = _as_batched(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (C_out,C_in,kh,kw), got {weight.shape}")
    n, c_in, h, w = xb.shape
    c_out, k_cin, kh, kw = weight.shape
    if k_cin != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c_in} channels, kernel expects {k_cin} "
            f"(input {xb.shape}, kernel {weight.shape})"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")

    out = _conv2d_batched(xb, weight, bias, stride, padding)
    return reshape(out, out.shape[1:]) if squeeze else out


def _conv2d_batched(x: Tensor, weight: Tensor, bias, stride: int, padding: int) -> Tensor:
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c_in * kh * kw)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    out_data = (cols @ w2.T).transpose(0, 2, 1).reshape(n, c_out, ho, wo)

    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
        inputs = (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(n, c_out, ho * wo).transpose(0, 2, 1)  # (N, Ho*Wo, C_out)
        gw = np.einsum("npo,npk->ok", g2, cols, optimize=True).reshape(weight.data.shape)
        gcols = (g2 @ w2).reshape(n, ho, wo, c_in, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(
            (n, c_in, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
        )
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out_data, inputs, vjp)


def max_pool2d(x, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Spatial max pooling; ties route gradient to the lowest linear index."""
    x = as_tensor(x)
    xb, squeeze = _as_batched(x)
    stride = stride or kernel
    n, c, h, w = xb.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"max_pool2d kernel {kernel} exceeds input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(xb.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    idx = np.argmax(win, axis=-1)  # first max = lowest row-major offset in window
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(xb.data)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + idx // kernel
        cols_ = wi * stride + idx % kernel
        np.add.at(gx, (ni, ci, rows, cols_), g)
        return (gx,)

    out = _result(out_data, (xb,), vjp)
    return reshape(out, out.shape[1:]) if squeeze else out


def global_max_pool(x) -> Tensor:
    """Max over the trailing two (spatial) axes. (C,H,W) -> (C,), (H,W) -> scalar."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"global_max_pool needs at least 2 dims, got {x.shape}")
    flat = reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    return tmax(flat, axis=-1)


def adaptive_avg_pool2d(x, output_size) -> Tensor:
    """Average-pool the trailing two axes to ``output_size`` (th, tw).

    Windows follow the floor/ceil boundary rule, so exact tilings (H % th == 0)
    reduce to plain window averaging and preserve the per-channel mean.
    """
    x = as_tensor(x)
    if isinstance(output_size, int):
        output_size = (output_size, output_size)
    th, tw = output_size
    h, w = x.shape[-2], x.shape[-1]
    if th < 1 or tw < 1:
        raise ShapeError(f"adaptive_avg_pool2d target must be >= 1, got {output_size}")
    if th > h or tw > w:
        raise ShapeError(f"adaptive_avg_pool2d cannot upsize {h}x{w} to {th}x{tw}")

    hs = [(i * h) // th for i in range(th)]
    he = [-(-(i + 1) * h // th) for i in range(th)]  # ceil
    ws = [(j * w) // tw for j in range(tw)]
    we = [-(-(j + 1) * w // tw) for j in range(tw)]

    lead = x.shape[:-2]
    out_data = np.empty(lead + (th, tw), dtype=x.data.dtype)
    for i in range(th):
        for j in range(tw):
            out_data[..., i, j] = x.data[..., hs[i] : he[i], ws[j] : we[j]].mean(axis=(-2, -1))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(th):
            for j in range(tw):
                area = (he[i] - hs[i]) * (we[j] - ws[j])
                gx[..., hs[i] : he[i], ws[j] : we[j]] += g[..., i : i + 1, j : j + 1] / area
        return (gx,)

    return _result(out_data, (x,), vjp)


def _bilinear_coords(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-aligned bilinear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def bilinear_upsample(x, size) -> Tensor:
    """Resize the trailing two axes to ``size`` by bilinear interpolation.

    Uses the half-pixel (align_corners=False) grid convention.
    """
    x = as_tensor(x)
    if isinstance(size, int):
        size = (size, size)
    h_out, w_out = size
    h, w = x.shape[-2], x.shape[-1]
    r0, r1, wr0, wr1 = _bilinear_coords(h, h_out)
    c0, c1, wc0, wc1 = _bilinear_coords(w, w_out)

    dt = x.data.dtype
    w00 = (wr0[:, None] * wc0[None, :]).astype(dt)
    w01 = (wr0[:, None] * wc1[None, :]).astype(dt)
    w10 = (wr1[:, None] * wc0[None, :]).astype(dt)
    w11 = (wr1[:, None] * wc1[None, :]).astype(dt)

    d = x.data
    out_data = (
        d[..., r0[:, None], c0[None, :]] * w00
        + d[..., r0[:, None], c1[None, :]] * w01
        + d[..., r1[:, None], c0[None, :]] * w10
        + d[..., r1[:, None], c1[None, :]] * w11
    )

    def vjp(g):
        gx = np.zeros_like(x.data)
        flat = gx.reshape(-1, h, w)
        gf = g.reshape(-1, h_out, w_out)
        rr0 = np.broadcast_to(r0[:, None], (h_out, w_out))
        rr1 = np.broadcast_to(r1[:, None], (h_out, w_out))
        cc0 = np.broadcast_to(c0[None, :], (h_out, w_out))
        cc1 = np.broadcast_to(c1[None, :], (h_out, w_out))
        for b in range(flat.shape[0]):
            np.add.at(flat[b], (rr0, cc0), gf[b] * w00)
            np.add.at(flat[b], (rr0, cc1), gf[b] * w01)
            np.add.at(flat[b], (rr1, cc0), gf[b] * w10)
            np.add.at(flat[b], (rr1, cc1), gf[b] * w11)
        return (gx,)

    return _result(out_data, (x,), vjp)


# --- normalization ---------------------------------------------------------------

def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise batch normalization over (N, C, H, W).

    Training mode normalizes with batch statistics (population variance) and
    updates the running buffers in place with the given momentum; eval mode
    normalizes with the running statistics, so outputs are per-sample
    deterministic regardless of batch composition.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d affine params must have shape ({c},)")
    gview = reshape(gamma, (1, c, 1, 1))
    bview = reshape(beta, (1, c, 1, 1))

    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        inv = div(1.0, sqrt(add(var, eps)))
        xhat = mul(centered, inv)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c)
    else:
        rm = running_mean.reshape(1, c, 1, 1).astype(x.data.dtype)
        rv = running_var.reshape(1, c, 1, 1).astype(x.data.dtype)
        scale = 1.0 / np.sqrt(rv + eps)
        xhat = mul(sub(x, rm), scale)
    return add(mul(xhat, gview), bview)


# Operator sugar on Tensor (defined here so core stays import-light).
Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(as_tensor(other, like=self), self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(as_tensor(other, like=self), self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.max = tmax
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.exp = exp
Tensor.relu = relu
Tensor.sqrt = sqrt
