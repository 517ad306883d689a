"""Differentiable primitives and the layers composed from them.

Linear structural ops come in adjoint pairs (unfold/fold, upsample/sum-pool,
broadcast/sum-to, slice/embed) so that each one's backward is the other and
higher-order derivatives fall out without special cases.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import AutodiffError, Function, Tensor, as_tensor, is_grad_enabled


def _shape_error(kind: str, *shapes) -> AutodiffError:
    return AutodiffError(f"{kind}: incompatible shapes {', '.join(map(str, shapes))}")


# ---------------------------------------------------------------- elementwise


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        try:
            return a + b
        except ValueError:
            raise _shape_error(self.kind, a.shape, b.shape) from None

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        try:
            return a - b
        except ValueError:
            raise _shape_error(self.kind, a.shape, b.shape) from None

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        try:
            return a * b
        except ValueError:
            raise _shape_error(self.kind, a.shape, b.shape) from None

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    kind = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (neg(g),)


class Power(Function):
    """Elementwise ``x ** p`` for a constant real exponent."""

    kind = "power"

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)

    def forward(self, a):
        return a ** self.p

    def backward(self, g):
        (a,) = self.inputs
        if self.p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, self.p - 1.0), self.p)),)


class Tanh(Function):
    kind = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g):
        y = self.output
        return (mul(g, sub(1.0, mul(y, y))),)


class LeakyRelu(Function):
    """``max(x, slope*x)``; the subgradient at 0 is the negative-side slope."""

    kind = "leaky_relu"

    def __init__(self, slope: float = 0.0):
        super().__init__()
        self.slope = float(slope)

    def forward(self, a):
        self.mask = np.where(a > 0, 1.0, self.slope)
        return a * self.mask

    def backward(self, g):
        return (mul(g, Tensor._wrap(self.mask)),)


class Abs(Function):
    kind = "abs"

    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return (mul(g, Tensor._wrap(self.sign)),)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


class Sum(Function):
    kind = "sum"

    def __init__(self, axis=None, keepdims: bool = False):
        super().__init__()
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _norm_axes(self.axis, a.ndim)
        return np.sum(a, axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        if not self.keepdims:
            g = reshape(g, _keepdims_shape(self.in_shape, self.axes))
        return (broadcast_to(g, self.in_shape),)


class BroadcastTo(Function):
    kind = "broadcast_to"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return np.broadcast_to(a, self.shape).copy()
        except ValueError:
            raise _shape_error(self.kind, a.shape, self.shape) from None

    def backward(self, g):
        return (sum_to(g, self.in_shape),)


def _sum_to_array(a: np.ndarray, shape) -> np.ndarray:
    lead = a.ndim - len(shape)
    if lead < 0:
        raise _shape_error("sum_to", a.shape, shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and a.shape[lead + i] != 1:
            axes.append(lead + i)
        elif s != a.shape[lead + i]:
            raise _shape_error("sum_to", a.shape, shape)
    out = a.sum(axis=tuple(axes), keepdims=True) if axes else a
    return out.reshape(shape)


class SumTo(Function):
    kind = "sum_to"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        return _sum_to_array(a, self.shape)

    def backward(self, g):
        return (broadcast_to(g, self.in_shape),)


class L2Norm(Function):
    """Euclidean norm over ``axes``; the gradient at a zero vector is zero."""

    kind = "l2_norm"

    def __init__(self, axis=None):
        super().__init__()
        self.axis = axis

    def forward(self, a):
        self.in_shape = a.shape
        self.axes = _norm_axes(self.axis, a.ndim)
        return np.sqrt(np.sum(a * a, axis=self.axes))

    def backward(self, g):
        (a,) = self.inputs
        n = self.output
        safe = add(n, Tensor._wrap((n.data == 0).astype(float)))
        scale = reshape(div(g, safe), _keepdims_shape(self.in_shape, self.axes))
        return (mul(a, scale),)


# ---------------------------------------------------------------- shape ops


class Reshape(Function):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise _shape_error(self.kind, a.shape, self.shape) from None

    def backward(self, g):
        return (reshape(g, self.in_shape),)


class Transpose(Function):
    kind = "transpose"

    def __init__(self, axes):
        super().__init__()
        self.axes = tuple(axes)

    def forward(self, a):
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, g):
        return (transpose(g, tuple(np.argsort(self.axes))),)


class Slice(Function):
    kind = "slice"

    def __init__(self, index):
        super().__init__()
        self.index = index

    def forward(self, a):
        self.in_shape = a.shape
        return a[self.index].copy()

    def backward(self, g):
        return (Embed.apply(g, index=self.index, shape=self.in_shape),)


class Embed(Function):
    """Place the input at ``index`` inside a zero tensor of ``shape`` (adjoint of slice)."""

    kind = "embed"

    def __init__(self, index, shape):
        super().__init__()
        self.index = index
        self.shape = tuple(shape)

    def forward(self, a):
        out = np.zeros(self.shape)
        out[self.index] = a
        return out

    def backward(self, g):
        return (Slice.apply(g, index=self.index),)


class Concat(Function):
    kind = "concat"

    def __init__(self, axis: int = 0):
        super().__init__()
        self.axis = axis

    def forward(self, *arrays):
        try:
            out = np.concatenate(arrays, axis=self.axis)
        except ValueError:
            raise _shape_error(self.kind, *(a.shape for a in arrays)) from None
        self.bounds = np.cumsum([0] + [a.shape[self.axis] for a in arrays])
        return out

    def backward(self, g):
        ax = self.axis % g.ndim
        grads = []
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            idx = tuple(slice(None) if i != ax else slice(int(lo), int(hi)) for i in range(g.ndim))
            grads.append(Slice.apply(g, index=idx))
        return grads


# ---------------------------------------------------------------- linear algebra


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


class MatMul(Function):
    """Batched matrix product with numpy broadcasting over leading axes."""

    kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise AutodiffError("matmul: operands need at least two dimensions")
        try:
            return np.matmul(a, b)
        except ValueError:
            raise _shape_error(self.kind, a.shape, b.shape) from None

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb


# ---------------------------------------------------------------- convolution plumbing


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _unfold_wide(a: np.ndarray, k: int, p: int):
    """Stride-1 im2col on rows of the full padded width.

    Returns cols of shape (N, C*k*k, Ho*Wp) plus (Ho, Wo, Wp). Columns with
    w >= Wo hold wrapped-around values and must be ignored by the caller.
    Every copy runs over Ho*Wp contiguous elements instead of Wo.
    """
    n, c, h, w = a.shape
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise _shape_error("unfold", a.shape, (k, k))
    buf = np.zeros((n, c, hp + 1, wp))  # one spare row keeps every window in bounds
    buf[:, :, p : p + h, p : p + w] = a
    flat = buf.reshape(n, c, (hp + 1) * wp)
    span = ho * wp
    cols = np.empty((n, c, k, k, span))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[:, :, i, j] = flat[:, :, off : off + span]
    return cols.reshape(n, c * k * k, span), ho, wo, wp


def _fold_wide(cols: np.ndarray, size, k: int, p: int) -> np.ndarray:
    """Adjoint of :func:`_unfold_wide`; garbage columns of ``cols`` must be zero."""
    h, w = size
    hp, wp = h + 2 * p, w + 2 * p
    n, ckk, span = cols.shape
    c = ckk // (k * k)
    blocks = cols.reshape(n, c, k, k, span)
    buf = np.zeros((n, c, (hp + 1) * wp))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            buf[:, :, off : off + span] += blocks[:, :, i, j]
    return np.ascontiguousarray(buf.reshape(n, c, hp + 1, wp)[:, :, p : p + h, p : p + w])


def _unfold_np(a: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    if a.ndim != 4:
        raise AutodiffError(f"unfold expects a 4-d input, got {a.shape}")
    n, c, h, w = a.shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise _shape_error("unfold", a.shape, (k, k))
    if p:
        a = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(a, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def _fold_np(cols: np.ndarray, size, k: int, s: int, p: int) -> np.ndarray:
    h, w = size
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    n, ckk, l = cols.shape
    if ckk % (k * k) or l != ho * wo:
        raise _shape_error("fold", cols.shape, size)
    if s == 1:
        wp = w + 2 * p
        wide = np.zeros((n, ckk, ho, wp))
        wide[..., :wo] = cols.reshape(n, ckk, ho, wo)
        return _fold_wide(wide.reshape(n, ckk, ho * wp), size, k, p)
    c = ckk // (k * k)
    blocks = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += blocks[:, :, i, j]
    return out[:, :, p : p + h, p : p + w].copy() if p else out


class Unfold(Function):
    """im2col: (N, C, H, W) -> (N, C*k*k, Ho*Wo)."""

    kind = "unfold"

    def __init__(self, k: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, a):
        self.in_hw = a.shape[2:]
        return _unfold_np(a, self.k, self.stride, self.padding)

    def backward(self, g):
        return (fold(g, self.in_hw, self.k, self.stride, self.padding),)


class Fold(Function):
    """col2im, the adjoint of :class:`Unfold` (overlapping entries are summed)."""

    kind = "fold"

    def __init__(self, size, k: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.size = tuple(size)
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, cols):
        return _fold_np(cols, self.size, self.k, self.stride, self.padding)

    def backward(self, g):
        return (unfold(g, self.k, self.stride, self.padding),)


class Upsample2(Function):
    """Nearest-neighbour x2 upsampling of the two trailing axes."""

    kind = "upsample2"

    def forward(self, a):
        return a.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g):
        return (SumPool2.apply(g),)


class SumPool2(Function):
    """Sum over non-overlapping 2x2 windows (adjoint of :class:`Upsample2`)."""

    kind = "sum_pool2"

    def forward(self, a):
        *lead, h, w = a.shape
        if h % 2 or w % 2:
            raise AutodiffError(f"2x2 pooling needs even spatial dims, got {a.shape}")
        return a.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))

    def backward(self, g):
        return (Upsample2.apply(g),)


class Conv2dOp(Function):
    """Fused cross-correlation (unfold + matmul + bias) as a single node."""

    kind = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise _shape_error(self.kind, x.shape, w.shape)
        n, _, h, wd = x.shape
        c_out, c_in, k, _ = w.shape
        self.k = k
        wm = w.reshape(c_out, -1)
        if self.stride == 1:
            self.cols, ho, wo, self.wp = _unfold_wide(x, k, self.padding)
            out = np.matmul(wm, self.cols).reshape(n, c_out, ho, self.wp)[..., :wo]
            return out + b.reshape(1, c_out, 1, 1)
        ho, wo = conv_out_size(h, k, self.stride, self.padding), conv_out_size(wd, k, self.stride, self.padding)
        self.cols = _unfold_np(x, k, self.stride, self.padding)
        out = np.matmul(wm, self.cols)
        out += b.reshape(1, c_out, 1)
        return out.reshape(n, c_out, ho, wo)

    def backward(self, g):
        x, w, b = self.inputs
        n, c_out = g.shape[:2]
        k, s, p = self.k, self.stride, self.padding
        if not is_grad_enabled():
            wm = w.data.reshape(c_out, -1)
            if s == 1:
                ho, wo = g.shape[2:]
                wide = np.zeros((n, c_out, ho, self.wp))
                wide[..., :wo] = g.data
                gf = wide.reshape(n, c_out, ho * self.wp)
            else:
                gf = g.data.reshape(n, c_out, -1)
            gx = gw = gb = None
            if x.requires_grad:
                gcols = np.matmul(wm.T, gf)
                gx = _fold_wide(gcols, x.shape[2:], k, p) if s == 1 else _fold_np(gcols, x.shape[2:], k, s, p)
                gx = Tensor._wrap(gx)
            if w.requires_grad:
                gw = Tensor._wrap(np.tensordot(gf, self.cols, axes=([0, 2], [0, 2])).reshape(w.shape))
            if b.requires_grad:
                gb = Tensor._wrap(g.data.sum(axis=(0, 2, 3)))
            return gx, gw, gb
        gf = reshape(g, (n, c_out, g.shape[2] * g.shape[3]))
        wm = reshape(w, (c_out, w.size // c_out))
        gx = gw = gb = None
        if x.requires_grad:
            gx = fold(matmul(transpose(wm, (1, 0)), gf), x.shape[2:], k, s, p)
        if w.requires_grad:
            cols = unfold(x, k, s, p)
            gw = reshape(sum_to(matmul(gf, transpose(cols, (0, 2, 1))), wm.shape), w.shape)
        if b.requires_grad:
            gb = sum(g, (0, 2, 3))
        return gx, gw, gb


# ---------------------------------------------------------------- functional API


def _binary(cls, a, b):
    return cls.apply(as_tensor(a), as_tensor(b))


def add(a, b) -> Tensor:
    return _binary(Add, a, b)


def sub(a, b) -> Tensor:
    return _binary(Sub, a, b)


def mul(a, b) -> Tensor:
    return _binary(Mul, a, b)


def div(a, b) -> Tensor:
    return mul(a, power(as_tensor(b), -1.0))


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, p: float) -> Tensor:
    return Power.apply(a, p=p)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def tanh(a) -> Tensor:
    return Tanh.apply(a)


def relu(a) -> Tensor:
    return LeakyRelu.apply(a, slope=0.0)


def leaky_relu(a, slope: float = 0.3) -> Tensor:
    return LeakyRelu.apply(a, slope=slope)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Abs.apply(a)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / count)


def l2_norm(a, axis=None) -> Tensor:
    return L2Norm.apply(a, axis=axis)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=shape)


def sum_to(g, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return SumTo.apply(g, shape=shape)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return Reshape.apply(a, shape=shape)


def transpose(a, axes) -> Tensor:
    return Transpose.apply(a, axes=axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a, b) -> Tensor:
    return _binary(MatMul, a, b)


def unfold(a, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    return Unfold.apply(a, k=k, stride=stride, padding=padding)


def fold(cols, size, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    return Fold.apply(cols, size=size, k=k, stride=stride, padding=padding)


def upsample2(a) -> Tensor:
    return Upsample2.apply(a)


def avg_pool2(a) -> Tensor:
    return mul(SumPool2.apply(a), 0.25)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight of shape (C_out, C_in, k, k)."""
    if bias is None:
        bias = Tensor._wrap(np.zeros(weight.shape[0]))
    return Conv2dOp.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with weight of shape (C_in, C_out, k, k)."""
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise _shape_error("conv_transpose2d", x.shape, weight.shape)
    n, c_in, h, w = x.shape
    _, c_out, k, _ = weight.shape
    ho, wo = (h - 1) * stride - 2 * padding + k, (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise _shape_error("conv_transpose2d", x.shape, weight.shape)
    wmat = transpose(reshape(weight, (c_in, c_out * k * k)), (1, 0))
    cols = matmul(wmat, reshape(x, (n, c_in, h * w)))
    out = fold(cols, (ho, wo), k, stride, padding)
    if bias is not None:
        out = add(out, reshape(bias, (1, c_out, 1, 1)))
    return out


class BatchNormTrain(Function):
    """Batch-statistics normalisation followed by the affine map, as one node.

    Plain first-order backward uses a direct numpy formula; when the backward
    pass is itself being recorded, the gradient is rebuilt from primitive ops
    so it can be differentiated again.
    """

    kind = "batch_norm"

    def __init__(self, axes, eps: float):
        super().__init__()
        self.axes, self.eps = axes, eps

    def forward(self, x, gamma, beta):
        self.mu = x.mean(axis=self.axes, keepdims=True)
        xc = x - self.mu
        self.var = (xc * xc).mean(axis=self.axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(self.var + self.eps)
        self.xhat = xc * self.inv
        return self.xhat * gamma + beta

    def backward(self, g):
        x, gamma, beta = self.inputs
        if not is_grad_enabled():
            gd = g.data
            gg = gd * gamma.data
            gx = self.inv * (
                gg - gg.mean(axis=self.axes, keepdims=True)
                - self.xhat * (gg * self.xhat).mean(axis=self.axes, keepdims=True)
            )
            return (
                Tensor._wrap(gx),
                Tensor._wrap((gd * self.xhat).sum(axis=self.axes, keepdims=True).reshape(gamma.shape)),
                Tensor._wrap(gd.sum(axis=self.axes, keepdims=True).reshape(beta.shape)),
            )
        xc = sub(x, mean(x, self.axes, keepdims=True))
        inv = power(add(mean(mul(xc, xc), self.axes, keepdims=True), self.eps), -0.5)
        xhat = mul(xc, inv)
        gg = mul(g, gamma)
        gx = mul(inv, sub(sub(gg, mean(gg, self.axes, keepdims=True)),
                          mul(xhat, mean(mul(gg, xhat), self.axes, keepdims=True))))
        ggamma = sum_to(mul(g, xhat), gamma.shape)
        gbeta = sum_to(g, beta.shape)
        return gx, ggamma, gbeta


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (N, H, W) for 4-d or over N for 2-d input.

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``momentum*running + (1-momentum)*batch``
    (unbiased variance).
    """
    x = as_tensor(x)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, x.shape[1], 1, 1) if x.ndim == 4 else (1, x.shape[1])
    g = reshape(gamma, shape)
    b = reshape(beta, shape)
    if training:
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise AutodiffError("batch_norm in training mode needs more than one value per channel")
        out, fn = BatchNormTrain.call(x, g, b, axes=axes, eps=eps)
        running_mean *= momentum
        running_mean += (1 - momentum) * fn.mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * fn.var.reshape(-1) * count / (count - 1)
        return out
    inv = 1.0 / np.sqrt(running_var + eps)
    y = mul(sub(x, Tensor._wrap(running_mean.reshape(shape))), Tensor._wrap(inv.reshape(shape)))
    return add(mul(y, g), b)


def dropout_mask(shape, probability: float, seed) -> np.ndarray:
    """Inverted-dropout mask: kept entries scaled by 1/(1-p), reproducible from ``seed``."""
    if not 0.0 <= probability < 1.0:
        raise AutodiffError(f"dropout probability must be in [0, 1), got {probability}")
    if probability == 0.0:
        return np.ones(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(shape) >= probability
    return keep / (1.0 - probability)


def dropout(x, probability: float, seed) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= probability < 1.0:
        raise AutodiffError(f"dropout probability must be in [0, 1), got {probability}")
    if probability == 0.0:
        return x
    return mul(x, Tensor._wrap(dropout_mask(x.shape, probability, seed)))


def dropout_pair(x, probability: float, seed_a, seed_b) -> tuple[Tensor, Tensor]:
    """Two independently masked copies of ``x`` (as used for consistency terms)."""
    return dropout(x, probability, seed_a), dropout(x, probability, seed_b)


_KINDS = {
    "add": add,
    "sub": sub,
    "scalar_mul": mul,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "mean": mean,
    "sum": sum,
    "l2_norm": l2_norm,
    "upsample2": upsample2,
    "avg_pool2": avg_pool2,
    "reshape": reshape,
    "concat": concat,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by name, e.g. ``forward_op("leaky_relu", x, slope=0.2)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def op_kinds() -> list[str]:
    return sorted(_KINDS)
