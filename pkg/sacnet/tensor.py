# SPDX-FileCopyrightText: 2024 SAC-Net developers
#
# SPDX-License-Identifier: MIT
"""
Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the network needs are provided. Every operation is a
``Function`` subclass with a ``forward`` over numpy arrays and a
``backward`` returning one gradient per input. Results that depend on a
tensor with ``requires_grad`` keep a reference to the function that made
them; ``backward`` walks that record in reverse topological order and
frees it afterwards unless asked to keep it.

Broadcasting is restricted to trailing axes: the smaller operand's shape
must be a suffix of the larger one (a scalar is the empty suffix).
"""
import contextlib
import threading

import numpy as np

from sacnet.shared import ShapeMismatch, NotScalar

#: Elements allowed in one im2col buffer before the batch is split in chunks.
IM2COL_CHUNK_ELEMENTS = 1 << 23

#: Channel roles a FeatureMap can declare.
CHANNEL_SEMANTICS = ("orientation", "scale_group", "generic")

_local = threading.local()


def grad_enabled():
    """
    :return: False inside a ``no_grad()`` block on this thread.
    """
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """
    Context manager that stops graph recording on the current thread.
    """
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def _broadcast_shape(a_shape, b_shape):
    """
    Result shape of an elementwise op under trailing-axis broadcasting.

    :raises ShapeMismatch: When neither shape is a suffix of the other.
    """
    if a_shape == b_shape:
        return a_shape
    if len(b_shape) <= len(a_shape) and a_shape[len(a_shape) - len(b_shape) :] == b_shape:
        return a_shape
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape) :] == a_shape:
        return b_shape
    raise ShapeMismatch(
        "Shapes {} and {} are not trailing-axis compatible".format(a_shape, b_shape)
    )


def _sum_to_shape(grad, shape):
    """Fold a broadcast gradient back onto the operand's (suffix) shape."""
    if grad.shape == tuple(shape):
        return grad
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` (numpy in, numpy out) and ``backward``
    (gradient of the output in, a tuple with one gradient or None per input
    out). Anything ``backward`` needs is stashed on ``self`` by ``forward``.
    """

    name = "op"

    def __init__(self, *inputs):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        """
        Must be overridden by subclass for implementation!
        """
        raise NotImplementedError

    def backward(self, grad):
        """
        Must be overridden by subclass for implementation!
        """
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        """
        Run the op on tensors (or values convertible to tensors) and record it.

        :return: The output Tensor.
        """
        tensors = tuple(as_tensor(value) for value in inputs)
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _func=func if requires_grad else None)

    def __repr__(self):
        return "<{} op>".format(self.name)


class Tensor:
    """
    Dense n-dimensional float64 array with optional gradient tracking.
    """

    # Makes ``ndarray * Tensor`` dispatch to Tensor.__rmul__.
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _func=None):
        """
        :param data: Anything numpy can turn into a float64 array.
        :param bool requires_grad: Track gradients for this tensor.
        """
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._func = _func

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
    def is_leaf(self):
        return self._func is None

    def numpy(self):
        """
        :return: The underlying numpy array (not a copy).
        """
        return self.data

    def item(self):
        """
        :return: The single value held by a one-element tensor as a float.
        """
        if self.size != 1:
            raise NotScalar("item() needs one element, found {}".format(self.size))
        return float(self.data.reshape(()))

    def zero_grad(self):
        """Drop the accumulated gradient."""
        self.grad = None

    def grad_or_zeros(self):
        """
        :return: The gradient, or zeros when nothing reached this tensor.
        """
        return np.zeros(self.shape) if self.grad is None else self.grad

    def detach(self):
        """
        :return: A new leaf holding the same values without gradient tracking.
        """
        return Tensor(self.data)

    def backward(self, retain_graph=False):
        """
        Back-propagate from this scalar tensor, see :func:`backward`.
        """
        backward(self, retain_graph=retain_graph)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={}, op={})".format(
            self.shape, self.requires_grad, self._func.name if self._func else None
        )


def as_tensor(value):
    """
    :return: ``value`` itself when it is a Tensor, else a constant Tensor.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data):
    """
    :return: A leaf Tensor with ``requires_grad`` set.
    """
    return Tensor(data, requires_grad=True)


# ----------- elementwise ----------- #


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _sum_to_shape(grad, self.shapes[0]), _sum_to_shape(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _sum_to_shape(grad, self.shapes[0]), -_sum_to_shape(grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _sum_to_shape(grad * self.b, self.a.shape),
            _sum_to_shape(grad * self.a, self.b.shape),
        )


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            _sum_to_shape(grad / self.b, self.a.shape),
            _sum_to_shape(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Scale(Function):
    name = "scale"

    def forward(self, a, factor=1.0):
        self.factor = float(factor)
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Cos(Function):
    name = "cos"

    def forward(self, a):
        self.a = a
        return np.cos(a)

    def backward(self, grad):
        return (-grad * np.sin(self.a),)


class Sin(Function):
    name = "sin"

    def forward(self, a):
        self.a = a
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.a),)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (grad * 2.0 * self.a,)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        # sigmoid(a) without overflow for large |a|
        return (grad * np.exp(-np.logaddexp(0.0, -self.a)),)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


# ----------- structural ----------- #


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as ex:
            raise ShapeMismatch(str(ex)) from ex

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        first = arrays[0]
        axis = axis % first.ndim
        for array in arrays[1:]:
            if array.ndim != first.ndim or any(
                array.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
            ):
                raise ShapeMismatch(
                    "Cannot concat {} with {} along axis {}".format(
                        first.shape, array.shape, axis
                    )
                )
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Take(Function):
    name = "take"

    def forward(self, a, indices=(), axis=0):
        self.in_shape = a.shape
        self.indices = np.asarray(indices, dtype=np.int64)
        self.axis = axis
        return np.take(a, self.indices, axis=axis)

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        moved = np.moveaxis(out, self.axis, 0)
        np.add.at(moved, self.indices, np.moveaxis(grad, self.axis, 0))
        return (out,)


# ----------- reductions ----------- #


def _expand_reduced(grad, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(grad, ()), in_shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, in_shape)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        return (np.array(_expand_reduced(grad, self.in_shape, self.axis, self.keepdims)),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.mean(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        expanded = _expand_reduced(grad, self.in_shape, self.axis, self.keepdims)
        return (expanded / self.count,)


class Max(Function):
    name = "max"

    def forward(self, a, axis=-1, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        # ties route the gradient to the first maximal entry
        self.winner = np.expand_dims(np.argmax(a, axis=axis), axis)
        return np.max(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        np.put_along_axis(out, self.winner, grad, axis=self.axis)
        return (out,)


# ----------- normalisation ----------- #


class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        self.out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        total = np.sum(grad, axis=self.axis, keepdims=True)
        return (grad - np.exp(self.out) * total,)


class LayerNormalize(Function):
    name = "layer_normalize"

    def forward(self, a, axis=-1, eps=1e-5):
        self.axis = axis
        centred = a - np.mean(a, axis=axis, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=axis, keepdims=True) + eps)
        self.out = centred * self.inv_std
        return self.out

    def backward(self, grad):
        mean_grad = np.mean(grad, axis=self.axis, keepdims=True)
        mean_proj = np.mean(grad * self.out, axis=self.axis, keepdims=True)
        return (self.inv_std * (grad - mean_grad - self.out * mean_proj),)


# ----------- linear algebra ----------- #


class Matmul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch("Cannot matmul {} by {}".format(a.shape, b.shape))
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeMismatch(
                "Batch axes differ in matmul {} by {}".format(a.shape, b.shape)
            )
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _sum_to_shape(grad_a, self.a.shape), _sum_to_shape(grad_b, self.b.shape)


def _conv_geometry(x_shape, w_shape, stride, padding):
    batch, channels, height, width = x_shape
    out_channels, in_channels, k_h, k_w = w_shape
    if in_channels != channels:
        raise ShapeMismatch(
            "Kernel expects {} input channels, input has {}".format(in_channels, channels)
        )
    if stride < 1:
        raise ValueError("stride must be >= 1, got {}".format(stride))
    if k_h > height + 2 * padding or k_w > width + 2 * padding:
        raise ShapeMismatch(
            "Kernel {}x{} larger than padded input {}x{}".format(
                k_h, k_w, height + 2 * padding, width + 2 * padding
            )
        )
    out_h = (height + 2 * padding - k_h) // stride + 1
    out_w = (width + 2 * padding - k_w) // stride + 1
    return batch, out_channels, out_h, out_w


class Conv2d(Function):
    """
    2D cross-correlation over ``[b, c, h, w]`` inputs with ``[o, c, k, k]``
    kernels and zero padding.

    ``method="im2col"`` unfolds patches into a matrix (in batch chunks) and
    uses one matrix product; ``method="loop"`` walks the kernel offsets and
    accumulates shifted slices. Both share the same geometry and agree to
    rounding.
    """

    name = "conv2d"

    def forward(self, x, w, stride=1, padding=0, method="im2col"):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeMismatch(
                "conv2d needs 4D input and kernels, got {} and {}".format(x.shape, w.shape)
            )
        if method not in ("im2col", "loop"):
            raise ValueError("Unknown conv2d method '{}'".format(method))
        self.geometry = _conv_geometry(x.shape, w.shape, stride, padding)
        self.stride, self.padding, self.method = stride, padding, method
        self.x_shape = x.shape
        self.w = w
        self.xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if method == "loop":
            return self._forward_loop()
        return self._forward_im2col()

    def _windows(self, start, stop):
        _, _, k_h, k_w = self.w.shape
        _, _, out_h, out_w = self.geometry
        s = self.stride
        view = np.lib.stride_tricks.sliding_window_view(
            self.xp[start:stop], (k_h, k_w), axis=(2, 3)
        )
        view = view[:, :, : (out_h - 1) * s + 1 : s, : (out_w - 1) * s + 1 : s]
        # [n, c, oh, ow, kh, kw] -> rows per output pixel
        return view.transpose(0, 2, 3, 1, 4, 5).reshape(-1, int(np.prod(self.w.shape[1:])))

    def _chunk(self):
        _, _, out_h, out_w = self.geometry
        per_sample = out_h * out_w * int(np.prod(self.w.shape[1:]))
        return max(1, IM2COL_CHUNK_ELEMENTS // max(per_sample, 1))

    def _forward_im2col(self):
        batch, out_c, out_h, out_w = self.geometry
        w_flat = self.w.reshape(out_c, -1)
        out = np.empty((batch, out_h, out_w, out_c))
        chunk = self._chunk()
        for start in range(0, batch, chunk):
            stop = min(start + chunk, batch)
            cols = self._windows(start, stop)
            out[start:stop] = (cols @ w_flat.T).reshape(stop - start, out_h, out_w, out_c)
        return out.transpose(0, 3, 1, 2)

    def _forward_loop(self):
        batch, out_c, out_h, out_w = self.geometry
        _, _, k_h, k_w = self.w.shape
        s = self.stride
        out = np.zeros((batch, out_c, out_h, out_w))
        for i in range(k_h):
            for j in range(k_w):
                rows = slice(i, i + s * (out_h - 1) + 1, s)
                cols = slice(j, j + s * (out_w - 1) + 1, s)
                patch = self.xp[:, :, rows, cols]
                out += np.einsum("oc,bchw->bohw", self.w[:, :, i, j], patch)
        return out

    def backward(self, grad):
        batch, out_c, out_h, out_w = self.geometry
        _, in_c, k_h, k_w = self.w.shape
        s, p = self.stride, self.padding
        grad_xp = np.zeros_like(self.xp)
        grad_w = np.zeros_like(self.w)
        if self.method == "loop":
            for i in range(k_h):
                for j in range(k_w):
                    rows = slice(i, i + s * (out_h - 1) + 1, s)
                    cols = slice(j, j + s * (out_w - 1) + 1, s)
                    patch = self.xp[:, :, rows, cols]
                    grad_w[:, :, i, j] = np.einsum("bohw,bchw->oc", grad, patch)
                    grad_xp[:, :, rows, cols] += np.einsum("oc,bohw->bchw",
                                                           self.w[:, :, i, j], grad)
        else:
            w_flat = self.w.reshape(out_c, -1)
            grad_w_flat = grad_w.reshape(out_c, -1)
            chunk = self._chunk()
            for start in range(0, batch, chunk):
                stop = min(start + chunk, batch)
                g_rows = grad[start:stop].transpose(0, 2, 3, 1).reshape(-1, out_c)
                grad_w_flat += g_rows.T @ self._windows(start, stop)
                d_cols = (g_rows @ w_flat).reshape(stop - start, out_h, out_w, in_c, k_h, k_w)
                for i in range(k_h):
                    for j in range(k_w):
                        rows = slice(i, i + s * (out_h - 1) + 1, s)
                        cols = slice(j, j + s * (out_w - 1) + 1, s)
                        grad_xp[start:stop, :, rows, cols] += d_cols[:, :, :, :, i, j].transpose(
                            0, 3, 1, 2
                        )
            grad_w = grad_w_flat.reshape(self.w.shape)
        height, width = self.x_shape[2], self.x_shape[3]
        return grad_xp[:, :, p : p + height, p : p + width], grad_w


# ----------- functional API ----------- #


def add(a, b):
    """Elementwise ``a + b`` with trailing-axis broadcasting."""
    return Add.apply(a, b)


def sub(a, b):
    """Elementwise ``a - b`` with trailing-axis broadcasting."""
    return Sub.apply(a, b)


def mul(a, b):
    """Elementwise ``a * b`` with trailing-axis broadcasting."""
    return Mul.apply(a, b)


def div(a, b):
    """Elementwise ``a / b`` with trailing-axis broadcasting."""
    return Div.apply(a, b)


def scale(a, factor):
    """Multiply by a python scalar."""
    return Scale.apply(a, factor=factor)


def neg(a):
    return Neg.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def cos(a):
    return Cos.apply(a)


def sin(a):
    return Sin.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def square(a):
    return Square.apply(a)


def softplus(a):
    """``log(1 + exp(a))``, evaluated without overflow."""
    return Softplus.apply(a)


def relu(a):
    return Relu.apply(a)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def concat(tensors, axis=0):
    """
    Join tensors along ``axis``; every other axis must agree.

    :raises ShapeMismatch: On disagreeing axes.
    """
    return Concat.apply(*tensors, axis=axis)


def take(a, indices, axis=0):
    """Gather entries of ``a`` along ``axis`` (repeats allowed)."""
    return Take.apply(a, indices=indices, axis=axis)


def reduce_sum(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reduce_max(a, axis=-1, keepdims=False):
    return Max.apply(a, axis=axis, keepdims=keepdims)


def softmax(a, axis=-1):
    """
    Softmax along ``axis``, computed after subtracting the per-slice maximum.
    """
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1):
    return LogSoftmax.apply(a, axis=axis)


def layer_normalize(a, axis=-1, eps=1e-5):
    """
    ``(a - mean) / sqrt(var + eps)`` over ``axis``, without affine terms.
    """
    return LayerNormalize.apply(a, axis=axis, eps=eps)


def matmul(a, b):
    """
    Matrix product over the last two axes. ``b`` is either 2D (shared by
    every leading index of ``a``) or has exactly ``a``'s leading axes.
    """
    return Matmul.apply(a, b)


def conv2d(x, kernels, stride=1, padding=0, method="im2col"):
    """
    2D convolution (cross-correlation) of ``x`` with ``kernels``.

    :param x: ``[b, c, h, w]`` Tensor or FeatureMap.
    :param kernels: ``[o, c, k, k]`` Tensor.
    :param int stride: Step between output samples, at least 1.
    :param int padding: Zero padding added to each spatial border.
    :param str method: ``"im2col"`` or ``"loop"``.
    :return: ``[b, o, (h + 2p - k) // stride + 1, ...]`` Tensor.
    """
    if isinstance(x, FeatureMap):
        x = x.tensor
    return Conv2d.apply(x, kernels, stride=stride, padding=padding, method=method)


# ----------- graph ----------- #


class Graph:
    """
    Ordered record of the ops that produced ``root``, inputs first.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = self._topological(root)

    @staticmethod
    def _topological(root):
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._func is not None:
                for parent in reversed(node._func.inputs):
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return order

    @property
    def ops(self):
        """
        :return: The recorded Function instances in execution order.
        """
        return [node._func for node in self.nodes if node._func is not None]

    def op_names(self):
        return [op.name for op in self.ops]

    def leaves(self):
        """
        :return: Every leaf that requires gradients and feeds the root.
        """
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def free(self):
        """Drop the op references so intermediate buffers can be collected."""
        for node in self.nodes:
            node._func = None


def backward(loss, retain_graph=False):
    """
    Populate ``grad`` on every leaf feeding ``loss`` with dLoss/dLeaf.

    Gradients accumulate on leaves across calls until ``zero_grad``.

    :param Tensor loss: A one-element tensor.
    :param bool retain_graph: Keep the record so backward can run again.
    :raises NotScalar: When ``loss`` holds more than one element.
    """
    if loss.size != 1:
        raise NotScalar("backward needs a scalar loss, found shape {}".format(loss.shape))
    graph = Graph(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._func is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._func.inputs, node._func.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    if not retain_graph:
        graph.free()


# ----------- feature maps ----------- #


class FeatureMap:
    """
    A 4D Tensor with declared axes ``(batch, channel, height, width)``.

    :param Tensor tensor: The values.
    :param str channel_semantics: ``orientation``, ``scale_group`` or ``generic``.
    """

    axes = ("batch", "channel", "height", "width")

    def __init__(self, tensor, channel_semantics="generic"):
        tensor = as_tensor(tensor)
        if tensor.ndim != 4:
            raise ShapeMismatch(
                "A FeatureMap needs 4 axes {}, got shape {}".format(self.axes, tensor.shape)
            )
        if channel_semantics not in CHANNEL_SEMANTICS:
            raise ValueError("Unknown channel semantics '{}'".format(channel_semantics))
        self.tensor = tensor
        self.channel_semantics = channel_semantics

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def batch(self):
        return self.tensor.shape[0]

    @property
    def channels(self):
        return self.tensor.shape[1]

    @property
    def spatial(self):
        return self.tensor.shape[2:]

    def numpy(self):
        return self.tensor.data

    def __repr__(self):
        return "FeatureMap(shape={}, channels={})".format(self.shape, self.channel_semantics)
