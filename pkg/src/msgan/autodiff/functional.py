"""Differentiable primitives.

Each backward is expressed with the primitives in this module, so the set is
closed under differentiation: conv2d's adjoints are two further recorded
convolution forms, the pooling gather/scatter pair are adjoints of each other,
and so on.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels
from .tensor import Function, Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


def _pair(a, b):
    """Coerce a Python/numpy constant to the dtype of its tensor partner."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------- broadcasting

class SumTo(Function):
    name = "sum_to"

    @staticmethod
    def forward(ctx, x, shape):
        if x.shape == tuple(shape):
            return x.copy()
        lead = x.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
        return x.sum(axis=axes, keepdims=True).reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (broadcast_to(g, ctx.inputs[0].shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    @staticmethod
    def forward(ctx, x, shape):
        return np.ascontiguousarray(np.broadcast_to(x, shape))

    @staticmethod
    def backward(ctx, g):
        return (sum_to(g, ctx.inputs[0].shape),)


def sum_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


# ------------------------------------------------------------------ arithmetic

class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(mul(g, -1.0), b.shape)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        ga = sum_to(mul(g, b), a.shape) if ctx.needs_input_grad[0] else None
        gb = sum_to(mul(g, a), b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Pow(Function):
    name = "pow"

    @staticmethod
    def forward(ctx, x, p):
        return np.power(x, x.dtype.type(p))

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.inputs
        p = ctx.params["p"]
        if p == 1.0:
            return (g,)
        dx = mul(pow(x, p - 1.0), p) if p != 2.0 else mul(x, 2.0)
        return (mul(g, dx),)


class ScaleConst(Function):
    """Elementwise product with a constant (non-differentiable) array."""

    name = "scale_const"

    @staticmethod
    def forward(ctx, x, c):
        return x * c

    @staticmethod
    def backward(ctx, g):
        return (ScaleConst.apply(g, c=ctx.params["c"]),)


def add(a, b):
    return Add.apply(*_pair(a, b))


def sub(a, b):
    return Sub.apply(*_pair(a, b))


def mul(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        return ScaleConst.apply(a, c=a.dtype.type(b))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        return ScaleConst.apply(b, c=b.dtype.type(a))
    return Mul.apply(*_pair(a, b))


def pow(x, p):
    return Pow.apply(x, p=float(p))


def sqrt(x):
    return pow(x, 0.5)


# ------------------------------------------------------------------ reductions

class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, x, axis, keepdims):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.inputs
        axis = ctx.params["axis"]
        kshape = tuple(1 if i in axis else s for i, s in enumerate(x.shape))
        return (broadcast_to(reshape(g, kshape), x.shape),)


def sum(x, axis=None, keepdims=False):
    axis = _norm_axis(axis, x.ndim)
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    axis = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axis])) if axis else 1
    return mul(sum(x, axis, keepdims), 1.0 / count)


# ----------------------------------------------------------------------- shape

class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, x, shape):
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (reshape(g, ctx.inputs[0].shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, x, axes):
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def backward(ctx, g):
        axes = ctx.params["axes"]
        inv = None if axes is None else tuple(np.argsort(axes))
        return (transpose(g, inv),)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return Reshape.apply(x, shape=shape)


def transpose(x, axes=None):
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


class SliceAxis(Function):
    name = "slice"

    @staticmethod
    def forward(ctx, x, axis, start, stop):
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        return np.ascontiguousarray(x[tuple(index)])

    @staticmethod
    def backward(ctx, g):
        p = ctx.params
        n = ctx.inputs[0].shape[p["axis"]]
        return (PadAxis.apply(g, axis=p["axis"], before=p["start"], after=n - p["stop"]),)


class PadAxis(Function):
    name = "pad"

    @staticmethod
    def forward(ctx, x, axis, before, after):
        widths = [(0, 0)] * x.ndim
        widths[axis] = (before, after)
        return np.pad(x, widths)

    @staticmethod
    def backward(ctx, g):
        p = ctx.params
        n = ctx.inputs[0].shape[p["axis"]]
        return (SliceAxis.apply(g, axis=p["axis"], start=p["before"], stop=p["before"] + n),)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *xs, axis):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis = ctx.params["axis"]
        out, start = [], 0
        for t, need in zip(ctx.inputs, ctx.needs_input_grad):
            stop = start + t.shape[axis]
            out.append(SliceAxis.apply(g, axis=axis, start=start, stop=stop) if need else None)
            start = stop
        return tuple(out)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def concat_channels(a, b):
    """Concatenate ``a[N,Ca,H,W]`` and ``b[N,Cb,H,W]`` along channels, ``a`` first."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d operands, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N,H,W mismatch between {a.shape} and {b.shape}")
    if b.shape[1] == 0:
        return a
    if a.shape[1] == 0:
        return b
    return Concat.apply(a, b, axis=1)


# ---------------------------------------------------------------------- linear

class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        ga = matmul(g, transpose(b)) if ctx.needs_input_grad[0] else None
        gb = matmul(transpose(a), g) if ctx.needs_input_grad[1] else None
        return ga, gb


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


def dense(input, weight, bias=None):
    """Affine map ``input @ weight.T + bias`` for ``input[N,F]``, ``weight[O,F]``."""
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {input.shape} does not match weight {weight.shape}")
    out = matmul(input, transpose(weight))
    if bias is not None:
        out = add(out, reshape(bias, (1, -1) if bias.ndim == 1 else bias.shape))
    return out


# ----------------------------------------------------------------- convolution

def _conv_out(h, k, padding):
    return h + 2 * padding - k + 1


def _conv_forward(x, w, padding):
    n = x.shape[0]
    cout, _, k, _ = w.shape
    ho, wo = _conv_out(x.shape[2], k, padding), _conv_out(x.shape[3], k, padding)
    cols = _kernels.get().im2col(x, k, padding)
    y = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def _conv_input_grad(gy, w, x_shape, padding):
    cout, _, k, _ = w.shape
    g2 = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
    return _kernels.get().col2im(g2 @ w.reshape(cout, -1), x_shape, k, padding)


def _conv_weight_grad(x, gy, w_shape, padding):
    cout, _, k, _ = w_shape
    cols = _kernels.get().im2col(x, k, padding)
    g2 = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
    return np.ascontiguousarray((g2.T @ cols).reshape(w_shape))


class Conv2d(Function):
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,k,k]``, stride 1."""

    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, padding):
        return _conv_forward(x, w, padding)

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.inputs
        p = ctx.params["padding"]
        gx = Conv2dInputGrad.apply(g, w, x_shape=x.shape, padding=p) if ctx.needs_input_grad[0] else None
        gw = Conv2dWeightGrad.apply(x, g, w_shape=w.shape, padding=p) if ctx.needs_input_grad[1] else None
        return gx, gw


class Conv2dInputGrad(Function):
    """Adjoint of :class:`Conv2d` with respect to its input (a transposed conv)."""

    name = "conv2d_input_grad"

    @staticmethod
    def forward(ctx, gy, w, x_shape, padding):
        return _conv_input_grad(gy, w, x_shape, padding)

    @staticmethod
    def backward(ctx, g):
        gy, w = ctx.inputs
        p = ctx.params["padding"]
        ggy = Conv2d.apply(g, w, padding=p) if ctx.needs_input_grad[0] else None
        gw = Conv2dWeightGrad.apply(g, gy, w_shape=w.shape, padding=p) if ctx.needs_input_grad[1] else None
        return ggy, gw


class Conv2dWeightGrad(Function):
    """Adjoint of :class:`Conv2d` with respect to its weight."""

    name = "conv2d_weight_grad"

    @staticmethod
    def forward(ctx, x, gy, w_shape, padding):
        return _conv_weight_grad(x, gy, w_shape, padding)

    @staticmethod
    def backward(ctx, g):
        x, gy = ctx.inputs
        p = ctx.params["padding"]
        gx = Conv2dInputGrad.apply(gy, g, x_shape=x.shape, padding=p) if ctx.needs_input_grad[0] else None
        ggy = Conv2d.apply(x, g, padding=p) if ctx.needs_input_grad[1] else None
        return gx, ggy


def conv2d(input, weight, bias=None, padding=0):
    """2-d cross-correlation with stride 1; output extent ``H + 2*padding - k + 1``."""
    if input.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {input.shape} and {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k not in (1, 3, 4):
        raise ShapeError(f"conv2d: unsupported kernel {k}x{k2}")
    if input.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {input.shape[1]} channels, weight expects {cin} "
                         f"(input {input.shape}, weight {weight.shape})")
    if min(_conv_out(input.shape[2], k, padding), _conv_out(input.shape[3], k, padding)) < 1:
        raise ShapeError(f"conv2d: kernel {k} with padding {padding} too large for {input.shape}")
    out = Conv2d.apply(input, weight, padding=int(padding))
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = add(out, reshape(bias, (1, cout, 1, 1)))
    return out


# --------------------------------------------------------------------- pooling

def _check_even(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a 4-d tensor, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"{op}: spatial extents must be even, got {x.shape[2]}x{x.shape[3]}")


class PoolGather(Function):
    """Pick one element per 2x2 window at fixed indices."""

    name = "max_pool2x"

    @staticmethod
    def forward(ctx, x, idx):
        return _kernels.get().pool_gather(x, idx)

    @staticmethod
    def backward(ctx, g):
        return (PoolScatter.apply(g, idx=ctx.params["idx"]),)


class PoolScatter(Function):
    name = "pool_scatter"

    @staticmethod
    def forward(ctx, g, idx):
        return _kernels.get().pool_scatter(g, idx)

    @staticmethod
    def backward(ctx, g):
        return (PoolGather.apply(g, idx=ctx.params["idx"]),)


def max_pool2x(input):
    """2x2 max pooling; ties route the gradient to the first window element (row-major)."""
    _check_even(input, "max_pool2x")
    idx = _kernels.get().pool_argmax(input.data)
    return PoolGather.apply(input, idx=idx)


class SumPool2x(Function):
    name = "sum_pool2x"

    @staticmethod
    def forward(ctx, x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))

    @staticmethod
    def backward(ctx, g):
        return (Upsample2x.apply(g),)


class Upsample2x(Function):
    name = "upsample_nearest2x"

    @staticmethod
    def forward(ctx, x):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    @staticmethod
    def backward(ctx, g):
        return (SumPool2x.apply(g),)


def avg_pool2x(input):
    """Mean over non-overlapping 2x2 windows."""
    _check_even(input, "avg_pool2x")
    return mul(SumPool2x.apply(input), 0.25)


def upsample_nearest2x(input):
    """Replicate every pixel into a 2x2 block."""
    if input.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects a 4-d tensor, got {input.shape}")
    return Upsample2x.apply(input)


# ------------------------------------------------------------------ activation

def leaky_relu(input, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = np.where(input.data >= 0, input.dtype.type(1.0), input.dtype.type(slope))
    return ScaleConst.apply(input, c=mask)
