"""Differentiable operators over 5-D video tensors.

Every operator computes its forward value with numpy, and when called under
an active tape with at least one input requiring gradients it records a
closure implementing the exact reverse-mode rule. Convolution exposes two
forward routes: an im2col+GEMM fast path and a direct nested-loop oracle
path, selectable per call; they must agree to float32 accuracy and the test
suite holds them to that.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, active_tape

_AXIS_NAMES = ("frame", "height", "width")

# Names whose backward rule is deliberately corrupted, used to prove the
# gradient checker can detect a wrong derivative. Never set during training.
_BACKWARD_MUTATIONS: set[str] = set()


@contextmanager
def mutate_backward(name: str):
    """Corrupt the named operator's backward rule inside the context."""
    if name not in ("conv3d",):
        raise ValueError(f"no backward mutation implemented for {name!r}")
    _BACKWARD_MUTATIONS.add(name)
    try:
        yield
    finally:
        _BACKWARD_MUTATIONS.discard(name)


def _mutated(name: str) -> bool:
    return name in _BACKWARD_MUTATIONS


def _triple(value, what: str) -> tuple[int, int, int]:
    if isinstance(value, (int, np.integer)):
        value = (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValueError(f"{what} must be an int or a 3-tuple, got {value}")
    return value


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], make_backward) -> Tensor:
    """Wrap a forward result, asserting finiteness and recording if needed."""
    assert np.all(np.isfinite(out_data)), f"{op} produced non-finite values"
    tape = active_tape()
    needs = tuple(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if tape is None or not any(needs):
        return Tensor(out_data, dtype=out_data.dtype)
    out = Tensor(out_data, requires_grad=True, dtype=out_data.dtype)
    tape.record(out, [t for t in inputs if isinstance(t, Tensor)], make_backward(needs))
    return out


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _check_window_geometry(op: str, spatial, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for axis, (n, k, s, p) in enumerate(zip(spatial, kernel, stride, padding)):
        if s < 1:
            raise ValueError(f"{op}: stride along {_AXIS_NAMES[axis]} must be >= 1, got {s}")
        if p < 0:
            raise ValueError(f"{op}: padding along {_AXIS_NAMES[axis]} must be >= 0, got {p}")
        if p >= k:
            raise ValueError(
                f"{op}: padding {p} along {_AXIS_NAMES[axis]} must be smaller than the window {k}"
            )
        if k > n + 2 * p:
            raise ValueError(
                f"{op}: window {k} exceeds padded input extent {n + 2 * p} along {_AXIS_NAMES[axis]}"
            )
        o = _out_extent(n, k, s, p)
        if o < 1:
            raise ValueError(f"{op}: zero-sized output along {_AXIS_NAMES[axis]}")
        out.append(o)
    return tuple(out)


def _gather_windows(xp: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    """Stack sliding windows: (N, C, kf, kh, kw, Fo, Ho, Wo)."""
    n, c = xp.shape[:2]
    kf, kh, kw = kernel
    sf, sh, sw = stride
    fo, ho, wo = out_shape
    cols = np.empty((n, c, kf, kh, kw, fo, ho, wo), dtype=xp.dtype)
    for a in range(kf):
        for b in range(kh):
            for d in range(kw):
                cols[:, :, a, b, d] = xp[
                    :, :, a : a + sf * fo : sf, b : b + sh * ho : sh, d : d + sw * wo : sw
                ]
    return cols


def _scatter_windows(dcols: np.ndarray, padded_shape, kernel, stride, out_shape) -> np.ndarray:
    """Adjoint of _gather_windows: sum window gradients into the padded array."""
    kf, kh, kw = kernel
    sf, sh, sw = stride
    fo, ho, wo = out_shape
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for a in range(kf):
        for b in range(kh):
            for d in range(kw):
                dxp[:, :, a : a + sf * fo : sf, b : b + sh * ho : sh, d : d + sw * wo : sw] += (
                    dcols[:, :, a, b, d]
                )
    return dxp


def _pad5(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    pf, ph, pw = padding
    if pf == ph == pw == 0:
        return x
    return np.pad(
        x, ((0, 0), (0, 0), (pf, pf), (ph, ph), (pw, pw)), constant_values=value
    )


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    method: str = "im2col",
) -> Tensor:
    """3-D cross-correlation of (N,C,F,H,W) input with (Co,Ci,kf,kh,kw) weight.

    method selects the forward route: "im2col" (GEMM fast path) or "direct"
    (nested-loop oracle). Both share the same contract and must agree.
    """
    if method not in ("im2col", "direct"):
        raise ValueError(f"conv3d: unknown method {method!r}")
    if x.ndim != 5:
        raise ValueError(f"conv3d: input must be rank 5, got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d: weight must be rank 5, got shape {weight.shape}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    n, cin, f, h, w = x.shape
    cout, cin_w, kf, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(
            f"conv3d: input has {cin} channels but weight expects {cin_w} along the channel axis"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d: bias shape {bias.shape} does not match {cout} output channels")
    kernel = (kf, kh, kw)
    out_shape = _check_window_geometry("conv3d", (f, h, w), kernel, stride, padding)
    fo, ho, wo = out_shape
    kdim = cin * kf * kh * kw
    loc = fo * ho * wo

    xp = _pad5(x.data, padding)
    w2 = weight.data.reshape(cout, kdim)

    cols2 = None
    if method == "im2col":
        cols2 = _gather_windows(xp, kernel, stride, out_shape).reshape(n, kdim, loc)
        out = np.matmul(w2, cols2)  # (N, Co, L)
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(n, cout, fo, ho, wo)
    else:
        out = np.empty((n, cout, fo, ho, wo), dtype=xp.dtype)
        for ni in range(n):
            for co in range(cout):
                wk = weight.data[co]
                for fi in range(fo):
                    f0 = fi * stride[0]
                    for hi in range(ho):
                        h0 = hi * stride[1]
                        for wi in range(wo):
                            w0 = wi * stride[2]
                            window = xp[ni, :, f0 : f0 + kf, h0 : h0 + kh, w0 : w0 + kw]
                            acc = np.vdot(wk, window)
                            if bias is not None:
                                acc += bias.data[co]
                            out[ni, co, fi, hi, wi] = acc

    inputs = [x, weight] if bias is None else [x, weight, bias]

    def make_backward(needs):
        saved_cols = cols2
        padded_shape = xp.shape

        def backward_fn(g):
            g2 = g.reshape(n, cout, loc)
            dx = dw = db = None
            if needs[1]:
                if saved_cols is not None:
                    gflat = g2.transpose(1, 0, 2).reshape(cout, n * loc)
                    cflat = saved_cols.transpose(1, 0, 2).reshape(kdim, n * loc)
                    dw2 = gflat @ cflat.T
                else:
                    cols = _gather_windows(xp, kernel, stride, out_shape).reshape(n, kdim, loc)
                    dw2 = np.einsum("ncl,nkl->ck", g2, cols)
                if _mutated("conv3d"):
                    dw2 = dw2 * 2.0
                dw = dw2.reshape(weight.shape)
            if needs[0]:
                dcols2 = np.matmul(w2.T, g2)  # (N, K, L)
                dcols = dcols2.reshape(n, cin, kf, kh, kw, fo, ho, wo)
                dxp = _scatter_windows(dcols, padded_shape, kernel, stride, out_shape)
                pf, ph, pw = padding
                dx = dxp[:, :, pf : pf + f, ph : ph + h, pw : pw + w]
                dx = np.ascontiguousarray(dx)
            if bias is not None and needs[2]:
                db = g2.sum(axis=(0, 2))
            return (dx, dw) if bias is None else (dx, dw, db)

        return backward_fn

    return _finish("conv3d", out, inputs, make_backward)


def maxpool3d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max pooling with -inf padding; backward routes to the recorded argmax.

    Ties inside a window resolve to the lowest linear index, which argmax
    over the flattened window gives for free.
    """
    if x.ndim != 5:
        raise ValueError(f"maxpool3d: input must be rank 5, got shape {x.shape}")
    kernel = _triple(kernel, "kernel")
    stride = kernel if stride is None else _triple(stride, "stride")
    padding = _triple(padding, "padding")
    n, c, f, h, w = x.shape
    out_shape = _check_window_geometry("maxpool3d", (f, h, w), kernel, stride, padding)
    fo, ho, wo = out_shape
    loc = fo * ho * wo
    ksize = kernel[0] * kernel[1] * kernel[2]

    xp = _pad5(x.data, padding, value=-np.inf)
    windows = _gather_windows(xp, kernel, stride, out_shape).reshape(n, c, ksize, loc)
    am = windows.argmax(axis=2)  # first max wins ties
    out = np.take_along_axis(windows, am[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(n, c, fo, ho, wo)

    def make_backward(needs):
        fp, hp, wp = xp.shape[2:]
        # Translate (window, in-window) indices to padded flat coordinates once.
        kf, kh, kw = kernel
        ka, kb, kd = np.unravel_index(np.arange(ksize), (kf, kh, kw))
        lf, lh, lw = np.unravel_index(np.arange(loc), (fo, ho, wo))
        base_f = lf * stride[0]
        base_h = lh * stride[1]
        base_w = lw * stride[2]

        def backward_fn(g):
            g2 = g.reshape(n, c, loc)
            fpos = base_f[None, None, :] + ka[am]
            hpos = base_h[None, None, :] + kb[am]
            wpos = base_w[None, None, :] + kd[am]
            flat = (fpos * hp + hpos) * wp + wpos
            plane = fp * hp * wp
            offset = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * plane
            dxp = np.zeros(n * c * plane, dtype=g.dtype)
            np.add.at(dxp, (offset + flat).ravel(), g2.ravel())
            dxp = dxp.reshape(n, c, fp, hp, wp)
            pf, ph, pw = padding
            dx = dxp[:, :, pf : pf + f, ph : ph + h, pw : pw + w]
            return (np.ascontiguousarray(dx),)

        return backward_fn

    return _finish("maxpool3d", out, [x], make_backward)


def avgpool3d_adaptive(x: Tensor) -> Tensor:
    """Global average over (F,H,W), keeping singleton spatial axes."""
    if x.ndim != 5:
        raise ValueError(f"avgpool3d_adaptive: input must be rank 5, got shape {x.shape}")
    n, c, f, h, w = x.shape
    count = f * h * w
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def make_backward(needs):
        def backward_fn(g):
            dx = np.broadcast_to(g / count, x.shape).astype(g.dtype, copy=True)
            return (dx,)

        return backward_fn

    return _finish("avgpool3d_adaptive", out, [x], make_backward)


def _linear_axis_coeffs(in_extent: int, out_extent: int, dtype):
    """Source indices and weights for 1-D linear resampling of one axis.

    Sample t maps to source (t+0.5)*in/out - 0.5, clamped to [0, in-1],
    then blends the two nearest cells (the upper index is edge-clamped).
    """
    t = np.arange(out_extent, dtype=np.float64)
    src = np.clip((t + 0.5) * (in_extent / out_extent) - 0.5, 0.0, in_extent - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_extent - 1)
    w1 = (src - i0).astype(dtype)
    w0 = np.asarray(1.0 - w1, dtype=dtype)
    return i0, i1, w0, w1


def trilinear_upsample(x: Tensor, target) -> Tensor:
    """Resample (F,H,W) to `target` extents with separable linear interpolation."""
    if x.ndim != 5:
        raise ValueError(f"trilinear_upsample: input must be rank 5, got shape {x.shape}")
    target = _triple(target, "target")
    for axis, t in enumerate(target):
        if t < 1:
            raise ValueError(
                f"trilinear_upsample: target extent along {_AXIS_NAMES[axis]} must be >= 1"
            )
    coeffs = []
    out = x.data
    for axis_off, t in enumerate(target):
        axis = 2 + axis_off
        i0, i1, w0, w1 = _linear_axis_coeffs(out.shape[axis], t, out.dtype)
        shape = [1] * out.ndim
        shape[axis] = t
        out = out.take(i0, axis=axis) * w0.reshape(shape) + out.take(i1, axis=axis) * w1.reshape(
            shape
        )
        coeffs.append((axis, i0, i1, w0, w1))

    def make_backward(needs):
        def backward_fn(g):
            dg = g
            # each axis was interpolated exactly once from its original extent,
            # so undoing in reverse order scatters back to x.shape per axis
            for axis, i0, i1, w0, w1 in reversed(coeffs):
                src_extent = x.shape[axis]
                gm = np.moveaxis(dg, axis, 0)
                wshape = (-1,) + (1,) * (gm.ndim - 1)
                dm = np.zeros((src_extent,) + gm.shape[1:], dtype=g.dtype)
                np.add.at(dm, i0, gm * w0.reshape(wshape))
                np.add.at(dm, i1, gm * w1.reshape(wshape))
                dg = np.moveaxis(dm, 0, axis)
            return (np.ascontiguousarray(dg),)

        return backward_fn

    return _finish("trilinear_upsample", out, [x], make_backward)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalization over (N,F,H,W) with EMA running statistics.

    Train mode normalizes with biased batch statistics and, when
    update_running is set, moves the running buffers by `momentum` toward
    them. Eval mode normalizes with the running buffers.
    """
    if x.ndim != 5:
        raise ValueError(f"batchnorm3d: input must be rank 5, got shape {x.shape}")
    n, c, f, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm3d: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    m = n * f * h * w
    axes = (0, 2, 3, 4)
    gshape = (1, c, 1, 1, 1)

    if training:
        if m < 2:
            raise ValueError(
                f"batchnorm3d: train mode needs at least 2 samples per channel, got {m}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.astype(running_mean.dtype)
            running_var *= 1.0 - momentum
            running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(gshape)) * inv_std.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def make_backward(needs):
        def backward_fn(g):
            dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
            dbeta = g.sum(axis=axes) if needs[2] else None
            dx = None
            if needs[0]:
                dxhat = g * gamma.data.reshape(gshape)
                if training:
                    sum_dxhat = dxhat.sum(axis=axes).reshape(gshape)
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(gshape)
                    dx = (inv_std.reshape(gshape) / m) * (
                        m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
                    )
                else:
                    dx = dxhat * inv_std.reshape(gshape)
                dx = dx.astype(g.dtype, copy=False)
            return (dx, dgamma, dbeta)

        return backward_fn

    return _finish("batchnorm3d", out, [x, gamma, beta], make_backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def make_backward(needs):
        mask = x.data > 0

        def backward_fn(g):
            return (g * mask,)

        return backward_fn

    return _finish("relu", out, [x], make_backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, clamped strictly inside (0, 1).

    The clamp keeps the open-interval mask contract valid in float32, where
    the exact logistic would round to 1.0 for moderate inputs.
    """
    z = np.clip(x.data, -30.0, 30.0)
    out = 1.0 / (1.0 + np.exp(-z))
    one = np.asarray(1.0, dtype=out.dtype)
    zero = np.asarray(0.0, dtype=out.dtype)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)

    def make_backward(needs):
        def backward_fn(g):
            return (g * out * (1.0 - out),)

        return backward_fn

    return _finish("sigmoid", out, [x], make_backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of (N, D) rows by (Dout, D) weight plus (Dout,) bias."""
    if x.ndim != 2:
        raise ValueError(f"linear: input must be rank 2, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"linear: weight shape {weight.shape} does not match input features {x.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]}")
        out = out + bias.data
    inputs = [x, weight] if bias is None else [x, weight, bias]

    def make_backward(needs):
        def backward_fn(g):
            dx = g @ weight.data if needs[0] else None
            dw = g.T @ x.data if needs[1] else None
            if bias is None:
                return (dx, dw)
            db = g.sum(axis=0) if needs[2] else None
            return (dx, dw, db)

        return backward_fn

    return _finish("linear", out, inputs, make_backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between row-softmax of logits and integer labels."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be rank 2, got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if y.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {y.shape} does not match batch {n}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    loss = np.asarray(-logp[np.arange(n), y].mean(), dtype=logits.dtype)

    def make_backward(needs):
        softmax = expz / denom

        def backward_fn(g):
            d = softmax.copy()
            d[np.arange(n), y] -= 1.0
            d *= g / n
            return (d,)

        return backward_fn

    return _finish("softmax_cross_entropy", loss, [logits], make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (skip merges use this)."""
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def make_backward(needs):
        def backward_fn(g):
            # copies so accumulation into either input never aliases g
            return (g.copy() if needs[0] else None, g.copy() if needs[1] else None)

        return backward_fn

    return _finish("add", out, [a, b], make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors (mask fusion uses this)."""
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def make_backward(needs):
        def backward_fn(g):
            da = g * b.data if needs[0] else None
            db = g * a.data if needs[1] else None
            return (da, db)

        return backward_fn

    return _finish("mul", out, [a, b], make_backward)


def add_scalar(x: Tensor, value: float) -> Tensor:
    """Elementwise x + value."""
    out = x.data + np.asarray(value, dtype=x.dtype)

    def make_backward(needs):
        def backward_fn(g):
            return (g.copy(),)

        return backward_fn

    return _finish("add_scalar", out, [x], make_backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def make_backward(needs):
        def backward_fn(g):
            return (g.reshape(x.shape).copy(),)

        return backward_fn

    return _finish("reshape", out, [x], make_backward)


def sum_all(x: Tensor) -> Tensor:
    """Scalar sum of all elements."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def make_backward(needs):
        def backward_fn(g):
            return (np.broadcast_to(g, x.shape).astype(g.dtype, copy=True),)

        return backward_fn

    return _finish("sum_all", out, [x], make_backward)
