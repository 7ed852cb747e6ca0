"""Tensor type, recorded operation graph and reverse-mode differentiation.

Every primitive is a :class:`Function` whose ``backward`` is written in terms
of other primitives acting on :class:`Tensor` objects. With
``create_graph=True`` the backward pass is therefore recorded like any forward
computation, which is what makes gradients of gradients available.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import threading
import warnings

import numpy as np

_DTYPES = {"single": np.float32, "double": np.float64}
_state = threading.local()
_seq = itertools.count()


class DetachedGradientWarning(UserWarning):
    """A gradient was requested for a tensor the output does not depend on."""


def _env_precision():
    value = os.environ.get("MSGAN_PRECISION", "single").strip().lower()
    if value not in _DTYPES:
        raise ValueError(f"MSGAN_PRECISION must be 'single' or 'double', got {value!r}")
    return value


_default_precision = _env_precision()


def set_default_precision(precision):
    global _default_precision
    if precision not in _DTYPES:
        raise ValueError(f"unknown precision {precision!r}")
    _default_precision = precision


def get_default_precision():
    return _default_precision


def default_dtype():
    return _DTYPES[_default_precision]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default precision ('single' or 'double')."""
    old = _default_precision
    set_default_precision(name)
    try:
        yield
    finally:
        set_default_precision(old)


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode):
    old = is_grad_enabled()
    _state.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _state.grad_enabled = old


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """N-d array of float32/float64 values that may take part in autodiff."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy scalars count too: 0-d arithmetic returns np.float64, not an ndarray
            dtype = data.dtype if isinstance(data, (np.ndarray, np.floating)) \
                and data.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self):
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in functional) ---------------------------
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return F.mul(self, F.pow(other, -1.0))
        return F.mul(self, 1.0 / other)

    def __neg__(self):
        return F.mul(self, -1.0)

    def __pow__(self, p):
        return F.pow(self, p)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return F.transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return F.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return F.mean(self, axis, keepdims)

    def sqrt(self):
        return F.pow(self, 0.5)

    def backward(self, grad_output=None, create_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        leaves = _collect_leaves(self)
        grads = grad(self, leaves, grad_output=grad_output, create_graph=create_graph)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = default_dtype()
    return Tensor(x, dtype=dtype)


class Context:
    """Per-node storage: the input tensors, static parameters and saved arrays."""

    __slots__ = ("inputs", "params", "saved", "needs_input_grad")

    def __init__(self, inputs, params):
        self.inputs = inputs
        self.params = params
        self.saved = {}
        self.needs_input_grad = tuple(t.requires_grad for t in inputs)


class Node:
    __slots__ = ("fn", "ctx", "seq", "output_shape")

    def __init__(self, fn, ctx, output_shape):
        self.fn = fn
        self.ctx = ctx
        self.seq = next(_seq)
        self.output_shape = output_shape

    @property
    def inputs(self):
        return self.ctx.inputs


class Tape:
    """Ordered record of nodes created while the tape is active.

    Nodes appear in creation order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes = []
        self.outputs = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)

    def __len__(self):
        return len(self.nodes)

    def _record(self, node, out):
        self.nodes.append(node)
        self.outputs.append(out)

    def replay(self):
        """Re-run every recorded forward from the current leaf values.

        Returns the recomputed output arrays in tape order.
        """
        fresh = {}
        results = []
        for node, out in zip(self.nodes, self.outputs):
            arrays = [fresh.get(id(t), t.data) for t in node.ctx.inputs]
            ctx = Context(node.ctx.inputs, node.ctx.params)
            value = node.fn.forward(ctx, *arrays, **node.ctx.params)
            fresh[id(out)] = value
            results.append(value)
        return results


class Function:
    """Base class for recorded primitives.

    Subclasses implement ``forward(ctx, *arrays, **params) -> ndarray`` and
    ``backward(ctx, grad_output: Tensor) -> tuple[Tensor | None, ...]``. The
    backward must only use Tensor operations so it can itself be recorded.
    """

    name = "function"

    @staticmethod
    def forward(ctx, *arrays, **params):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad_output):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **params):
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context(tensors, params)
        out = Tensor(cls.forward(ctx, *[t.data for t in tensors], **params))
        if is_grad_enabled() and any(ctx.needs_input_grad):
            out.requires_grad = True
            node = Node(cls, ctx, out.shape)
            out._node = node
            for tape in getattr(_state, "tapes", ()) or ():
                tape._record(node, out)
        return out


def _collect_leaves(output):
    leaves, seen, stack = [], set(), [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is None:
            if t.requires_grad:
                leaves.append(t)
        else:
            stack.extend(t._node.inputs)
    return leaves


def grad(output, inputs, grad_output=None, create_graph=False):
    """Return d(output)/d(input) for each tensor in ``inputs``.

    ``output`` must hold a single element unless ``grad_output`` is given.
    Tensors the output does not depend on get a zero gradient and a
    :class:`DetachedGradientWarning`. With ``create_graph=True`` the returned
    gradients are themselves differentiable.
    """
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))
    else:
        grad_output = as_tensor(grad_output, dtype=output.dtype)
        if grad_output.shape != output.shape:
            raise ValueError(f"grad_output shape {grad_output.shape} != output shape {output.shape}")

    # Discover the reachable graph; remember each node's output tensor.
    owner = {}
    stack, seen = [output], set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            owner[t._node.seq] = t
            stack.extend(x for x in t._node.inputs if x.requires_grad)

    grads = {id(output): grad_output}
    wanted = {id(t) for t in inputs}
    results = {}
    with set_grad_enabled(create_graph):
        for seq in sorted(owner, reverse=True):
            out = owner[seq]
            g = grads.pop(id(out), None)
            if id(out) in wanted:
                results[id(out)] = g
            if g is None:
                continue
            node = out._node
            in_grads = node.fn.backward(node.ctx, g)
            for t, gi, need in zip(node.ctx.inputs, in_grads, node.ctx.needs_input_grad):
                if gi is None or not need:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        for t in inputs:
            if t._node is None and id(t) in grads:
                results[id(t)] = grads[id(t)]

    out_list = []
    for t in inputs:
        g = results.get(id(t))
        if g is None:
            warnings.warn(f"{t!r} is not connected to the output; gradient is zero",
                          DetachedGradientWarning, stacklevel=2)
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        out_list.append(g)
    return out_list[0] if single else out_list


from . import functional as F  # noqa: E402  (operators need the op table)
