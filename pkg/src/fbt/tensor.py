"""Reverse-mode automatic differentiation over numpy arrays.

Every operation below builds a node in an implicit computation graph when at
least one input requires gradients. ``backward()`` on a scalar walks the graph
once in reverse topological order and accumulates ``grad`` buffers on every
tensor that requires them; the graph is then garbage-collected with the loss.

Training runs in float32. Gradient verification must run in float64
(``using_dtype(np.float64)``) because central finite differences are unreliable
in single precision.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_verification = False


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericsError(FloatingPointError):
    """A non-finite value was produced while verification mode is active."""


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    global DEFAULT_DTYPE
    saved = DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        DEFAULT_DTYPE = saved


@contextlib.contextmanager
def no_grad():
    """Disable graph construction, e.g. for frozen-teacher inference."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


@contextlib.contextmanager
def verification(enabled: bool = True):
    """Enable extra runtime checks: non-finite outputs raise NumericsError."""
    global _verification
    saved = _verification
    _verification = enabled
    try:
        yield
    finally:
        _verification = saved


def verification_enabled() -> bool:
    return _verification


def _finite_check(op: str, arr: np.ndarray) -> None:
    if _verification and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: non-finite value in output")


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn",
                 "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        # Everything follows the active default dtype unless told otherwise,
        # so switching to float64 for verification converts whole models.
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward_fn = None
        self._grad_owned = False

    # -- graph bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A view of the same data that is cut out of the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "leaf"
        out._parents = ()
        out._backward_fn = None
        out._grad_owned = False
        return out

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable requires_grad node.

        Gradients add across multiple uses of the same tensor, which is what
        makes weight sharing between a model and a fused view of it work.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: expected scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward: tensor does not require gradients")

        # Iterative topological sort; graphs are deep enough that recursion
        # would hit the interpreter limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple["Tensor", bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        if self.grad is None:
            self.grad = np.ones_like(self.data)
            self._grad_owned = True
        # Copy-on-write accumulation: a backward rule may hand the same (or a
        # read-only broadcast) buffer to several parents, so the buffer is
        # only adopted by reference until a second contribution arrives.
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                    parent._grad_owned = False
                elif parent._grad_owned:
                    parent.grad += g
                else:
                    parent.grad = parent.grad + g
                    parent._grad_owned = True

    # -- operator sugar --------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, trainable tensor. Frozen parameters never receive gradients."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result, wiring it into the graph when gradients are on."""
    _finite_check(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape its operand had before broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), backward, "div")


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(data, (x,), backward, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _make(data, (x,), backward, "exp")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / data),)

    return _make(data, (x,), backward, "sqrt")


def pow_const(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    data = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(data, (x,), backward, "pow")


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return _make(data, (x,), backward, "relu")


def gelu(x) -> Tensor:
    """Exact erf-based GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = as_tensor(x)
    inv_sqrt2 = np.asarray(0.7071067811865476, dtype=x.data.dtype)
    phi = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    data = x.data * phi

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * np.asarray(0.3989422804014327, dtype=x.data.dtype)
        return (g * (phi + x.data * pdf),)

    return _make(data.astype(x.data.dtype, copy=False), (x,), backward, "gelu")


def scale_grad(x, factor: float) -> Tensor:
    """Identity in the forward pass; scales the gradient flowing back."""
    x = as_tensor(x)
    if factor == 1.0:
        return x

    def backward(g):
        return (g * factor,)

    return _make(x.data, (x,), backward, "scale_grad")


# -- reductions and shape ops ----------------------------------------------------


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return np.broadcast_to(g.reshape([1] * len(shape)) if axis is None and not keepdims else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    expanded = list(g.shape)
    for a in sorted(axes):
        expanded.insert(a, 1)
    return np.broadcast_to(g.reshape(expanded), shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_restore_axes(np.asarray(g), x.shape, axis, keepdims),)

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(data.size, 1)

    def backward(g):
        return (_restore_axes(np.asarray(g), x.shape, axis, keepdims) / count,)

    return _make(np.asarray(data, dtype=x.data.dtype), (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    data = x.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _make(data, (x,), backward, "transpose")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    index = tuple(slice(None) if a != axis else slice(start, start + length) for a in range(x.ndim))
    data = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(np.ascontiguousarray(data), (x,), backward, "narrow")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward, "concat")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight stored as (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- softmax family ------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = sum_(mul(log_softmax(logits, axis=1), Tensor(onehot)), axis=1)
    return mul(mean(picked), -1.0)


# -- convolution and pooling -----------------------------------------------------


def _conv_geometry(h, w, kh, kw, sh, sw, ph, pw):
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) too large for padded input ({h}x{w})")
    return oh, ow


def _im2col(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) input with (O,C,KH,KW) kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels differ from kernel channels ({x.shape} vs {weight.shape})")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = _conv_geometry(h, w, kh, kw, sh, sw, ph, pw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    # (B*OH*OW, C*KH*KW) @ (C*KH*KW, O)
    cols2d = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)
    w2d = weight.data.reshape(o, c * kh * kw)
    out = (cols2d @ w2d.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gw = (g2d.T @ cols2d).reshape(weight.shape)
        gcols = (g2d @ w2d).reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping average pooling; the window must divide H and W."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: need (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"avg_pool2d: window {window} does not divide spatial dims of {x.shape}")
    data = x.data.reshape(b, c, h // window, window, w // window, window).mean(axis=(3, 5))

    def backward(g):
        g = g / (window * window)
        g = np.repeat(np.repeat(g, window, axis=2), window, axis=3)
        return (g,)

    return _make(data, (x,), backward, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """Mean over spatial positions (4-D input) or tokens (3-D input)."""
    x = as_tensor(x)
    if x.ndim == 4:
        return mean(x, axis=(2, 3))
    if x.ndim == 3:
        return mean(x, axis=1)
    raise ShapeError(f"global_avg_pool: need 3-D or 4-D input, got {x.shape}")


def patchify(x, patch: int) -> Tensor:
    """Split (B,C,H,W) into non-overlapping patches -> (B, T, C*patch*patch)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"patchify: need (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: patch {patch} does not divide spatial dims of {x.shape}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, c, gh, patch, gw, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (b, gh * gw, c * patch * patch))


# -- normalization ---------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} do not match feature dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        gx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _make(data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def batch_norm(x, gamma, beta, running_mean, running_var, momentum: float = 0.1,
               eps: float = 1e-5, train: bool = False) -> Tensor:
    """Channel-wise batch normalization for (B,C,H,W) maps.

    In train mode the batch statistics normalize and update the running
    buffers in place; in eval mode the running buffers normalize. Frozen
    teacher stages always run in eval mode, so their statistics never move.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: need (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} do not match channels of {x.shape}")
    shape = (1, c, 1, 1)
    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    data = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def backward(g):
        dxhat = g * gamma.data.reshape(shape)
        if train:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            gx = inv_std.reshape(shape) * (dxhat - s1 / n - xhat * s2 / n)
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# -- attention ----------------------------------------------------------------


def multi_head_attention(q, k, v, heads: int) -> Tensor:
    """Scaled dot-product attention over (B, T, D) tensors split into heads."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"multi_head_attention: need (B,T,D) inputs, got {q.shape}, {k.shape}, {v.shape}")
    b, t, d = q.shape
    if d % heads:
        raise ShapeError(f"multi_head_attention: dim {d} not divisible by {heads} heads")
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"multi_head_attention: mismatched q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    dh = d // heads

    def split(x):
        return transpose(reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))  # (B,H,T,dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)  # (B,H,T,dh)
    return reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm (differentiable)."""
    x = as_tensor(x)
    norm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True) + eps)
    return div(x, norm)
